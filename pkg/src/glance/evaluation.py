"""Builds evaluation reports from a trained router: binned accuracy, NCS,
routed-set homophily, K sweeps, heuristic NCS grids and ablation deltas."""

from __future__ import annotations

import numpy as np
from sklearn.linear_model import LogisticRegression

from .gnn import mc_dropout_uncertainty, normalize_adjacency
from .graph import BIN_EDGES, all_local_homophily, all_relative_degree
from .metrics import (
    HEURISTICS, HeuristicRouter, average_rank, bin_labels, c_density, heuristic_route, ncs, render_table,
    routed_homophily_summary, stratified_accuracy,
)
from .trainer import EmbeddingStore, GlanceClassifier
from .utils import make_rng

HEURISTIC_FRACTIONS = (0.10, 0.15, 0.20)


def _rounded(x, nd=6):
    """Round floats for stable JSON output."""
    if isinstance(x, float):
        return round(x, nd)
    if isinstance(x, dict):
        return {k: _rounded(v, nd) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_rounded(v, nd) for v in x]
    return x


def _binned(pred, y, h, keep, edges):
    acc, pop = stratified_accuracy(pred[keep], y[keep], h[keep], edges)
    return {"overall": float(np.mean(pred == y)) if len(y) else None, "bins": acc}, pop


def _store(est: GlanceClassifier, graph) -> EmbeddingStore:
    return EmbeddingStore(est.provider, graph, est.sampler_seed_, est.per_node_cap, est.empty_segments)


def oracle_h_predictions(est: GlanceClassifier, graph, nodes, k_test, h_true):
    """Route the k_test lowest true-homophily nodes of each batch (label-reading upper bound)."""
    sig = est.expert_signals(graph)
    store = _store(est, graph)
    preds = np.argmax(sig.gnn_logits[nodes], axis=1)
    for start in range(0, len(nodes), est.batch_size):
        batch = nodes[start:start + est.batch_size]
        order = np.lexsort((batch, h_true[batch]))[:min(k_test, len(batch))]
        if len(order):
            picked = batch[order]
            preds[start + order] = est.refiner_.predict(sig.z_G[picked], store.get(picked))
    return preds


def evaluate(est: GlanceClassifier, graph, k_values=None, edges=BIN_EDGES, oracle_h=False) -> dict:
    """EvalReport over the test split for each routing budget in ``k_values``.

    Contains no timings or paths, so identical inputs give identical reports.
    """
    k_values = [est.k_test] if not k_values else [int(k) for k in k_values]
    nodes = np.sort(graph.nodes_in("test"))
    y = graph.labels[nodes]
    h_all = all_local_homophily(graph)
    h = h_all[nodes]
    keep = graph.degrees[nodes] > 0
    gnn_pred = np.argmax(est.expert_signals(graph).gnn_logits[nodes], axis=1)
    gnn_row, pop = _binned(gnn_pred, y, h, keep, edges)
    gnn_correct = gnn_pred == y
    runs = []
    for k in k_values:
        store = _store(est, graph)
        calls0 = est.provider.calls
        trace = est._route(graph, nodes, k, store)
        calls = est.provider.calls - calls0
        rows = {"gnn": gnn_row}
        rows["glance"], _ = _binned(trace.predictions, y, h, keep, edges)
        if oracle_h:
            rows["oracle_h"], _ = _binned(oracle_h_predictions(est, graph, nodes, k, h_all), y, h, keep, edges)
        post_correct = trace.predictions == y
        run = {
            "k_test": k,
            "rows": rows,
            "routed": int(trace.routed.sum()),
            "prompts_requested": store.prompts,
            "provider_calls": calls,
            "ncs": ncs(gnn_correct, post_correct, trace.routed) if trace.routed.any() else None,
            "routed_homophily": None,
            "dataset_median_homophily": float(np.median(h[keep])) if keep.any() else None,
            "average_rank": average_rank({m: r["bins"] + [r["overall"]] for m, r in rows.items()}),
        }
        sel = trace.routed & keep
        if sel.any():
            run["routed_homophily"] = routed_homophily_summary(h[sel], (~gnn_correct & post_correct)[sel])
        runs.append(run)
    report = {
        "schema": 1,
        "split": "test",
        "n_eval": int(len(nodes)),
        "n_isolated_excluded_from_bins": int((~keep).sum()),
        "bin_edges": [float(e) for e in edges],
        "bin_populations": pop,
        "batch_size": est.batch_size,
        "runs": runs,
    }
    return _rounded(report)


def render_eval(report: dict) -> str:
    chunks = []
    labels = bin_labels(report["bin_edges"])
    for run in report["runs"]:
        head = f"K_test={run['k_test']}  routed={run['routed']}  provider_calls={run['provider_calls']}"
        if run["ncs"] is not None:
            head += f"  NCS={run['ncs']:.4f}"
        table = render_table(run["rows"], report["bin_populations"], labels)
        chunks.append(head + "\n" + table)
    return "\n".join(chunks)


def heuristic_metrics(est: GlanceClassifier, graph, include_oracle: bool) -> dict:
    sig = est.expert_signals(graph)
    A_hat = normalize_adjacency(graph)
    metrics = {
        "c_density": c_density(graph.features, graph.num_classes, est.seed),
        "degree": graph.degrees.astype(np.float64),
        "uncertainty": mc_dropout_uncertainty(est.gnn.model_, A_hat, graph.features, est.mc_passes,
                                              est.mc_rate, seed=est.seed, statistic=est.uncertainty),
        "soft_h": sig.soft_h,
        "rel_degree": all_relative_degree(graph),
    }
    if include_oracle:
        metrics["true_h"] = all_local_homophily(graph)
    return metrics


def text_probe(est: GlanceClassifier, graph, store: EmbeddingStore) -> LogisticRegression:
    """Text-only classifier on z_L, fit on (up to train_cap) train nodes."""
    train = np.sort(graph.nodes_in("train"))
    if len(train) > est.train_cap:
        train = np.sort(make_rng(est.seed, "probe").choice(train, est.train_cap, replace=False))
    return LogisticRegression(max_iter=2000).fit(store.get(train), graph.labels[train])


def heuristic_grid(est: GlanceClassifier, graph, fractions=HEURISTIC_FRACTIONS, oracle_h=False, seed=0) -> dict:
    """NCS of each static heuristic at each routing fraction, routing within the test split.

    Routed nodes take the prediction of a text-only probe on z_L; the rest keep
    the GCN head's. ``true_h`` reads labels and is only scored with ``oracle_h``.
    """
    nodes = np.sort(graph.nodes_in("test"))
    y = graph.labels
    sig = est.expert_signals(graph)
    gnn_pred = np.argmax(sig.gnn_logits, axis=1)
    metrics = heuristic_metrics(est, graph, oracle_h)
    store = _store(est, graph)
    probe = text_probe(est, graph, store)
    grid = {}
    for kind in HEURISTICS:
        cells = []
        for frac in fractions:
            if kind == "true_h" and not oracle_h:
                cells.append(None)
                continue
            routed = heuristic_route(nodes, metrics, HeuristicRouter(kind, frac), seed=seed, allow_oracle=oracle_h)
            if len(routed) == 0:
                cells.append(None)
                continue
            post = probe.predict(store.get(routed))
            cells.append(ncs(gnn_pred[routed] == y[routed], post == y[routed], np.arange(len(routed))))
        grid[kind] = cells
    ranks = average_rank(grid)
    return _rounded({
        "schema": 1,
        "split": "test",
        "routing_scope": "test split only",
        "post_prediction": "text-only logistic probe on z_L",
        "n_eval": int(len(nodes)),
        "fractions": list(fractions),
        "ncs": grid,
        "average_rank": ranks,
    })


def render_heuristics(report: dict) -> str:
    fr = report["fractions"]
    header = f"{'heuristic':<14}" + "".join(f"{int(round(100 * f)):>9d}%" for f in fr) + f"{'avg rank':>10}"
    lines = [header, "-" * len(header)]
    for kind, cells in report["ncs"].items():
        vals = "".join(f"{'-':>10}" if c is None else f"{c:>10.4f}" for c in cells)
        rank = report["average_rank"][kind]
        lines.append(f"{kind:<14}" + vals + (f"{'-':>10}" if rank is None else f"{rank:>10.2f}"))
    return "\n".join(lines) + "\n"


def ablation_table(full: dict, ablated: dict) -> dict:
    """Per-feature accuracy deltas (ablated minus full) for overall and each bin."""
    base = full["runs"][0]["rows"]["glance"]
    out = {"full": base, "deltas": {}}
    for name, rep in ablated.items():
        row = rep["runs"][0]["rows"]["glance"]
        out["deltas"][name] = {
            "overall": row["overall"] - base["overall"],
            "bins": [None if a is None or b is None else a - b for a, b in zip(row["bins"], base["bins"])],
        }
    return _rounded(out)


def render_ablation(table: dict) -> str:
    rows = {"full": table["full"]}
    rows.update({f"no-{k}": v for k, v in table["deltas"].items()})
    return "accuracy of the full router, then deltas per dropped feature\n" + render_table(rows)

