import json

import pytest

from glance.cli import load_config, main
from glance.exceptions import ConfigError
from glance.graph import ingest_dataset

SMALL = {
    "seed": 1,
    "synth": {"num_nodes": 300, "num_classes": 3, "homophily_mixture": [[0.1, 0.3], [0.9, 0.7]]},
    "gnn": {"max_epochs": 150},
    "q": {"max_epochs": 150},
    "provider": {"dim": 16},
    "glance": {"max_epochs": 3},
}


def write_cfg(path, cfg=SMALL):
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "cfg.json")
    out = root / "run"
    for cmd in ("gen", "train-gnn", "train-q", "train-glance"):
        assert run(cmd, "--config", cfg, "--out", out) == 0, cmd
    return cfg, out


def test_unknown_key_exits_2(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"glance": {"betta": 0.1}})
    assert run("gen", "--config", cfg, "--out", tmp_path / "o") == 2


def test_unknown_key_raises_with_path(tmp_path):
    with pytest.raises(ConfigError, match="glance.'betta'"):
        load_config(write_cfg(tmp_path / "c.json", {"glance": {"betta": 0.1}}))


def test_missing_config_exits_3(tmp_path):
    assert run("gen", "--config", tmp_path / "none.json", "--out", tmp_path / "o") == 3


def test_missing_artifact_exits_3(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    assert run("gen", "--config", cfg, "--out", tmp_path / "o") == 0
    assert run("train-glance", "--config", cfg, "--out", tmp_path / "o") == 3
    assert "gnn.json" in capsys.readouterr().err


def test_gen_is_byte_deterministic_and_round_trips(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    for d in ("a", "b"):
        assert run("gen", "--config", cfg, "--out", tmp_path / d) == 0
    for name in ("nodes.jsonl", "edges.csv", "vocab.json", "mixture.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    g = ingest_dataset(tmp_path / "a" / "nodes.jsonl", tmp_path / "a" / "edges.csv")
    assert g.num_nodes == 300
    for row in json.loads((tmp_path / "a" / "mixture.json").read_text()):
        assert abs(row["realized"] - row["target"]) <= 0.05


def test_pipeline_writes_manifest(pipeline):
    _, out = pipeline
    manifest = json.loads((out / "manifest.json").read_text())
    for name in ("nodes.jsonl", "gnn.json", "q.json", "glance/router.json", "glance/manifest.json"):
        assert name in manifest["artifacts"]
    assert set(manifest["timings"]) >= {"gen", "train-gnn", "train-q", "train-glance"}
    assert (out / "resolved_config.json").exists()
    report = json.loads((out / "train_report.json").read_text())
    assert report["epochs"] and report["provider_calls"] > 0


def test_eval_k0_equals_gnn_row(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("eval", "--config", cfg, "--out", out, "--k-test", 0, 12) == 0
    report = json.loads((out / "eval_report.json").read_text())
    zero, twelve = report["runs"]
    assert zero["rows"]["glance"] == zero["rows"]["gnn"]
    assert zero["routed"] == 0 and zero["provider_calls"] == 0 and zero["ncs"] is None
    assert twelve["routed"] > 0
    assert sum(report["bin_populations"]) + report["n_isolated_excluded_from_bins"] == report["n_eval"]


def test_eval_custom_bins_and_oracle_row(pipeline):
    cfg, out = pipeline
    assert run("eval", "--config", cfg, "--out", out, "--bins", "0,0.5,1", "--oracle-h") == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert report["bin_edges"] == [0.0, 0.5, 1.0]
    assert set(report["runs"][0]["rows"]) == {"gnn", "glance", "oracle_h"}
    assert run("eval", "--config", cfg, "--out", out, "--bins", "0,0.7,0.5,1") == 2


def test_heuristics_grid_shape(pipeline):
    cfg, out = pipeline
    assert run("heuristics", "--config", cfg, "--out", out, "--oracle-h") == 0
    report = json.loads((out / "heuristics.json").read_text())
    assert len(report["ncs"]) == 7 and all(len(c) == 3 for c in report["ncs"].values())
    assert all(-1 <= v <= 1 for cells in report["ncs"].values() for v in cells)
    assert "true_h" in (out / "heuristics.txt").read_text()


def test_heuristics_without_oracle_leaves_true_h_empty(pipeline):
    cfg, out = pipeline
    assert run("heuristics", "--config", cfg, "--out", out) == 0
    report = json.loads((out / "heuristics.json").read_text())
    assert report["ncs"]["true_h"] == [None, None, None] and report["average_rank"]["true_h"] is None


def test_tampered_checkpoint_exits_with_hash_error(pipeline, tmp_path, capsys):
    import shutil
    cfg, out = pipeline
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    q = copy / "q.json"
    q.write_text(q.read_text().replace('"kind"', '"kind" ', 1))
    assert run("train-glance", "--config", cfg, "--out", copy) == 3
    assert "modified" in capsys.readouterr().err


def test_ablate_and_beta_sweep(pipeline, tmp_path):
    import shutil
    cfg, out = pipeline
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    assert run("ablate", "--config", cfg, "--out", copy, "--features", "degree", "homophily") == 0
    table = json.loads((copy / "ablation.json").read_text())
    assert set(table["deltas"]) == {"degree", "homophily"}
    assert run("sweep-beta", "--config", cfg, "--out", copy, "--beta", 0.1, 0.3) == 0
    rows = json.loads((copy / "beta_sweep.json").read_text())
    assert [r["beta"] for r in rows] == [0.1, 0.3]


def test_embed_requires_cache_path(pipeline):
    cfg, out = pipeline
    assert run("embed", "--config", cfg, "--out", out) == 2
