"""Command-line pipeline: generate data, train the frozen experts, precompute
embeddings, train the router, evaluate and run sweeps.

Every command takes ``--config`` (JSON run config) and ``--out`` (artifact
directory). Outputs, the resolved config and a manifest of artifact hashes and
timings all land under ``--out``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import platform
import sys
import time
from dataclasses import MISSING, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from .evaluation import (
    HEURISTIC_FRACTIONS, ablation_table, evaluate, heuristic_grid, render_ablation, render_eval,
    render_heuristics,
)
from .exceptions import ArtifactHashError, ConfigError, GlanceError, MissingArtifactError
from .gnn import GCNClassifier, GcnModel
from .graph import BIN_EDGES, ingest_dataset, write_dataset
from .homophily import HomophilyEstimator
from .llm import make_provider, serialize_prompts
from .router import SEGMENTS
from .synth import SynthConfig, class_vocab, realized_mixture, synth_generate
from .trainer import GlanceClassifier, load_bundle, sampler_seed, save_bundle
from .utils import canonical_json, file_sha256, sha256_hex

log = logging.getLogger("glance")

GNN_GRID_LR = (1e-2, 1e-3, 1e-4)
GNN_GRID_WD = (1e-3, 1e-4, 1e-5)

DEFAULTS = {
    "seed": 0,
    "data": {"nodes": None, "edges": None, "num_classes": None, "class_names": [], "vocab": None},
    "synth": {f.name: f.default_factory() if f.default is MISSING else f.default
              for f in fields(SynthConfig) if f.name != "seed"},
    "gnn": {"n_layers": 2, "hidden": 64, "learning_rate": 1e-2, "weight_decay": 1e-4, "max_epochs": 1000,
            "patience": 30, "dropout_rate": 0.5, "clip_norm": 1.0},
    "q": {"hidden": 64, "learning_rate": 1e-2, "weight_decay": 1e-4, "max_epochs": 1000, "patience": 30,
          "dropout_rate": 0.5, "clip_norm": 1.0},
    "provider": {"kind": "mock", "dim": 32, "noise_scale": 0.3, "endpoint": None, "model": "",
                 "cache_path": None, "batch_size": 64, "max_retries": 3, "backoff": 0.5, "timeout": 30.0,
                 "max_in_flight": 1},
    "glance": {"beta": 0.1, "lambda_router": 1.0, "lambda_ent": 0.01, "batch_size": 32, "k_start": 32,
               "k_end": 8, "decay": 0.5, "k_test": 12, "train_cap": 3000, "max_epochs": 20, "patience": 2,
               "router_lr": 3e-3, "refiner_lr": 1e-2, "weight_decay": 1e-4, "clip_norm": 1.0,
               "refiner_hidden": 128, "ablate": [], "router_loss": "as_written", "empty_segments": "fallback",
               "mc_passes": 5, "mc_rate": 0.3, "uncertainty": "entropy", "per_node_cap": 5},
    "eval": {"k_test": [], "bins": list(BIN_EDGES), "heuristic_fractions": list(HEURISTIC_FRACTIONS),
             "beta_sweep": [0.1, 0.2, 0.3]},
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path, seed: int | None = None) -> dict:
    """Defaults overlaid with the JSON file at ``path``; unknown keys are rejected."""
    user = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULTS, user, "")
    if seed is not None:
        cfg["seed"] = seed
    return cfg


# run directory bookkeeping

class RunDir:
    def __init__(self, out, cfg: dict, command: str):
        self.root = Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.timings: dict[str, float] = {}
        path = self.root / "manifest.json"
        self.manifest = json.loads(path.read_text()) if path.exists() else {"schema": 1, "artifacts": {}}
        (self.root / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str) -> Path:
        """Path of an upstream artifact, checked against the hash the manifest pinned for it."""
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing artifact {p} (run the upstream command first)")
        pinned = self.manifest["artifacts"].get(name)
        if pinned is not None and file_sha256(p) != pinned:
            raise ArtifactHashError(f"{p} was modified after it was recorded in manifest.json")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.record(name)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def record(self, name: str) -> None:
        self.manifest["artifacts"][name] = file_sha256(self.path(name))

    def finish(self) -> None:
        self.manifest["versions"] = _versions()
        self.manifest.setdefault("timings", {})[self.command] = {k: round(v, 4) for k, v in self.timings.items()}
        self.manifest.setdefault("configs", {})[self.command] = sha256_hex(canonical_json(self.cfg))
        (self.root / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "scikit-learn", "httpx"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


# shared loaders

def _data_paths(cfg, run: RunDir):
    nodes = cfg["data"]["nodes"] or run.path("nodes.jsonl")
    edges = cfg["data"]["edges"] or run.path("edges.csv")
    return Path(nodes), Path(edges)


def load_graph(cfg, run: RunDir):
    nodes, edges = _data_paths(cfg, run)
    d = cfg["data"]
    return ingest_dataset(nodes, edges, d["num_classes"], seed=cfg["seed"], class_names=tuple(d["class_names"]))


def load_vocab(cfg, run: RunDir):
    path = cfg["data"]["vocab"] or run.path("vocab.json")
    path = Path(path)
    if not path.exists():
        if cfg["provider"]["kind"] == "mock":
            log.warning("no vocab file at %s; mock embeddings carry no class signal", path)
        return None
    return json.loads(path.read_text())["class_tokens"]


def build_provider(cfg, run: RunDir):
    pcfg = {**cfg["provider"], "seed": cfg["seed"]}
    return make_provider(pcfg, vocab=load_vocab(cfg, run) if pcfg["kind"] == "mock" else None)


def load_experts(run: RunDir):
    gnn = GCNClassifier.from_model(GcnModel.from_json(run.require("gnn.json").read_text()))
    q = HomophilyEstimator.from_json(run.require("q.json").read_text())
    return gnn, q


def glance_params(cfg) -> dict:
    params = dict(cfg["glance"])
    params["ablate"] = tuple(params["ablate"])
    params["seed"] = cfg["seed"]
    return params


def _bins(arg, cfg):
    if arg is None:
        edges = [float(x) for x in cfg["eval"]["bins"]]
    else:
        try:
            edges = [float(x) for x in arg.split(",")]
        except ValueError:
            raise ConfigError(f"--bins must be comma-separated numbers, got {arg!r}") from None
    if len(edges) < 2 or edges[0] != 0.0 or edges[-1] != 1.0 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError("bin edges must increase strictly from 0 to 1")
    return tuple(edges)


# commands

def cmd_gen(args, cfg, run: RunDir):
    t0 = time.perf_counter()
    scfg = SynthConfig(**cfg["synth"], seed=cfg["seed"])
    g, groups = synth_generate(scfg, return_groups=True)
    write_dataset(g, run.path("nodes.jsonl"), run.path("edges.csv"))
    run.record("nodes.jsonl")
    run.record("edges.csv")
    pools, _ = class_vocab(scfg)
    run.write_json("vocab.json", {"class_tokens": pools})
    realized = realized_mixture(g, groups, len(scfg.homophily_mixture))
    rows = [{"target": h, "fraction": f, "realized": r} for (h, f), r in zip(scfg.homophily_mixture, realized)]
    run.write_json("mixture.json", rows)
    run.timings["generate"] = time.perf_counter() - t0
    print(f"wrote {g.num_nodes} nodes, {len(g.edges)} edges to {run.root}")
    for row in rows:
        real = "n/a" if row["realized"] is None else f"{row['realized']:.4f}"
        print(f"  group target h={row['target']:.2f} fraction={row['fraction']:.2f} realized={real}")


def _fit_gnn(g, gcfg, seed):
    return GCNClassifier(**gcfg, seed=seed).fit(g)


def cmd_train_gnn(args, cfg, run: RunDir):
    g = load_graph(cfg, run)
    t0 = time.perf_counter()
    gcfg = dict(cfg["gnn"])
    if args.sweep:
        rows = []
        best = None
        for lr in GNN_GRID_LR:
            for wd in GNN_GRID_WD:
                est = _fit_gnn(g, {**gcfg, "learning_rate": lr, "weight_decay": wd}, cfg["seed"])
                val = max(h["val_acc"] for h in est.history_)
                rows.append({"learning_rate": lr, "weight_decay": wd, "val_accuracy": val})
                log.info("gnn sweep lr=%g wd=%g val=%.4f", lr, wd, val)
                if best is None or val > best[0]:
                    best = (val, est)
        run.write_json("gnn_sweep.json", rows)
        est = best[1]
    else:
        est = _fit_gnn(g, gcfg, cfg["seed"])
    run.timings["train_gnn"] = time.perf_counter() - t0
    run.write_text("gnn.json", est.to_json())
    run.write_json("gnn_history.json", est.history_)
    acc = {s: est.score(g, split=s) for s in ("train", "val", "test")}
    print("gcn accuracy " + " ".join(f"{s}={a:.4f}" for s, a in acc.items()))


def cmd_train_q(args, cfg, run: RunDir):
    g = load_graph(cfg, run)
    t0 = time.perf_counter()
    est = HomophilyEstimator(**cfg["q"], seed=cfg["seed"]).fit(g)
    run.timings["train_q"] = time.perf_counter() - t0
    run.write_text("q.json", est.to_json())
    print(f"homophily estimator val accuracy={est.val_accuracy_:.4f}")


def cmd_embed(args, cfg, run: RunDir):
    if not cfg["provider"]["cache_path"]:
        raise ConfigError("embed needs provider.cache_path so the embeddings persist")
    g = load_graph(cfg, run)
    provider = build_provider(cfg, run)
    inner = getattr(provider, "inner", provider)
    if args.max_in_flight is not None and hasattr(inner, "max_in_flight"):
        inner.max_in_flight = args.max_in_flight
    splits = ("train", "val", "test") if args.split == "all" else (args.split,)
    nodes = np.sort(np.concatenate([g.nodes_in(s) for s in splits]))
    seed = sampler_seed(cfg["seed"])
    cap = cfg["glance"]["per_node_cap"]
    prompts = list(dict.fromkeys(p for v in nodes for p in serialize_prompts(g, int(v), seed=seed,
                                                                             per_node_cap=cap).prompts))
    t0 = time.perf_counter()
    chunk = max(1, int(cfg["provider"]["batch_size"]))
    for start in range(0, len(prompts), chunk):
        provider.embed(prompts[start:start + chunk])
    run.timings["provider"] = time.perf_counter() - t0
    print(f"embedded {len(prompts)} prompts for {len(nodes)} nodes; provider calls={provider.calls}")


def _train(cfg, run: RunDir, graph, gnn, q, provider, **overrides):
    params = {**glance_params(cfg), **overrides}
    return GlanceClassifier(gnn=gnn, homophily=q, provider=provider, **params).fit(graph)


def cmd_train_glance(args, cfg, run: RunDir):
    g = load_graph(cfg, run)
    gnn, q = load_experts(run)
    provider = build_provider(cfg, run)
    est = _train(cfg, run, g, gnn, q, provider)
    save_bundle(est, run.path("glance"), {"gnn": run.path("gnn.json"), "q": run.path("q.json")},
                cfg["provider"])
    for name in ("router.json", "refiner.json", "manifest.json"):
        run.record(f"glance/{name}")
    run.write_json("train_report.json", est.report_)
    run.timings.update(est.report_["timings"])
    last = est.report_["epochs"][-1]
    print(f"trained {len(est.report_['epochs'])} epochs; best val accuracy={est.report_['best_val_accuracy']:.4f};"
          f" last K={last['k']}; provider calls={est.report_['provider_calls']}")


def _bundle(cfg, run: RunDir):
    run.require("glance/manifest.json")
    return load_bundle(run.path("glance"), build_provider(cfg, run))


def cmd_eval(args, cfg, run: RunDir):
    g = load_graph(cfg, run)
    est = _bundle(cfg, run)
    ks = args.k_test or cfg["eval"]["k_test"] or [est.k_test]
    t0 = time.perf_counter()
    report = evaluate(est, g, ks, _bins(args.bins, cfg), oracle_h=args.oracle_h)
    run.timings["eval"] = time.perf_counter() - t0
    text = render_eval(report)
    run.write_json("eval_report.json", report)
    run.write_text("eval_report.txt", text)
    print(text, end="")


def cmd_heuristics(args, cfg, run: RunDir):
    g = load_graph(cfg, run)
    est = _bundle(cfg, run)
    fractions = tuple(args.fractions or cfg["eval"]["heuristic_fractions"])
    t0 = time.perf_counter()
    report = heuristic_grid(est, g, fractions, oracle_h=args.oracle_h, seed=cfg["seed"])
    run.timings["heuristics"] = time.perf_counter() - t0
    text = render_heuristics(report)
    run.write_json("heuristics.json", report)
    run.write_text("heuristics.txt", text)
    print(text, end="")


def cmd_ablate(args, cfg, run: RunDir):
    g = load_graph(cfg, run)
    gnn, q = load_experts(run)
    provider = build_provider(cfg, run)
    edges = _bins(None, cfg)
    k = [cfg["glance"]["k_test"]]
    t0 = time.perf_counter()
    full = evaluate(_train(cfg, run, g, gnn, q, provider, ablate=()), g, k, edges)
    ablated = {}
    for seg in args.features or SEGMENTS:
        ablated[seg] = evaluate(_train(cfg, run, g, gnn, q, provider, ablate=(seg,)), g, k, edges)
        log.info("ablation without %s done", seg)
    run.timings["ablate"] = time.perf_counter() - t0
    table = ablation_table(full, ablated)
    text = render_ablation(table)
    run.write_json("ablation.json", table)
    run.write_text("ablation.txt", text)
    print(text, end="")


def cmd_sweep_beta(args, cfg, run: RunDir):
    g = load_graph(cfg, run)
    gnn, q = load_experts(run)
    provider = build_provider(cfg, run)
    rows = []
    t0 = time.perf_counter()
    for beta in args.beta or cfg["eval"]["beta_sweep"]:
        est = _train(cfg, run, g, gnn, q, provider, beta=float(beta))
        rep = evaluate(est, g, [est.k_test], _bins(None, cfg))
        rows.append({"beta": float(beta), "best_val_accuracy": est.report_["best_val_accuracy"],
                     "test": rep["runs"][0]["rows"]["glance"]})
    run.timings["sweep_beta"] = time.perf_counter() - t0
    run.write_json("beta_sweep.json", rows)
    for row in rows:
        print(f"beta={row['beta']:.2f} val={row['best_val_accuracy']:.4f} test={row['test']['overall']:.4f}")


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic text-attributed graph"),
    "train-gnn": (cmd_train_gnn, "train the frozen GCN expert"),
    "train-q": (cmd_train_q, "train the feature-only homophily estimator"),
    "embed": (cmd_embed, "precompute the embedding cache for a split"),
    "train-glance": (cmd_train_glance, "train router and refiner over the frozen experts"),
    "eval": (cmd_eval, "evaluate on the test split"),
    "heuristics": (cmd_heuristics, "NCS grid of static routing heuristics"),
    "ablate": (cmd_ablate, "retrain without each routing feature and report deltas"),
    "sweep-beta": (cmd_sweep_beta, "retrain for several query costs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glance", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="JSON run config")
        p.add_argument("--out", type=Path, required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train-gnn":
            p.add_argument("--sweep", action="store_true", help="grid over learning rate and weight decay")
        if name == "embed":
            p.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
            p.add_argument("--max-in-flight", type=int, default=None)
        if name == "eval":
            p.add_argument("--k-test", type=int, nargs="+", default=None)
            p.add_argument("--bins", default=None, help="comma-separated bin edges, e.g. 0,0.25,0.5,0.75,1")
        if name in ("eval", "heuristics"):
            p.add_argument("--oracle-h", action="store_true", help="allow label-reading true-homophily routing")
        if name == "heuristics":
            p.add_argument("--fractions", type=float, nargs="+", default=None)
        if name == "ablate":
            p.add_argument("--features", nargs="+", choices=SEGMENTS, default=None)
        if name == "sweep-beta":
            p.add_argument("--beta", type=float, nargs="+", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        run = RunDir(args.out, cfg, args.command)
        COMMANDS[args.command][0](args, cfg, run)
        run.finish()
    except GlanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return MissingArtifactError.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
