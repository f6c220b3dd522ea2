import json

import numpy as np
import pytest
import yaml

from mdvit import pipeline as P
from mdvit.cli import main
from mdvit.config import PruningPolicy
from mdvit.flops import cost

SMALL = {
    "data": {"train_per_class": 16, "val_per_class": 8, "holdout_per_class": 8},
    "budget": 0.6,
    "pretrain": {"steps": 15},
    "search": {"init": 3, "iterations": 2, "restarts": 1},
    "prune": {"calib_batch": 16},
    "finetune": {"steps": 5},
}


def small_config(out, **extra):
    return P.ExperimentConfig.from_dict({**SMALL, "out": str(out), **extra})


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    cfg = small_config(tmp_path_factory.mktemp("run"))
    return cfg, P.run_pipeline(cfg)


# -- configuration -----------------------------------------------------------------------


def test_config_yaml_roundtrip(tmp_path):
    cfg = small_config(tmp_path, seed=3, rho_max={"neuron": 0.8, "head": 0.5, "seq": 0.7})
    path = tmp_path / "c.yaml"
    path.write_text(cfg.dumps())
    back = P.ExperimentConfig.load(path)
    assert back == cfg
    assert back.rho == {"neuron": 0.8, "head": 0.5, "seq": 0.7}
    assert yaml.safe_load(P.ExperimentConfig().dumps())["model"]["layers"] == 4


@pytest.mark.parametrize("bad", [
    {"budget": 0}, {"budget": -1}, {"budget": 1.5}, {"seed": -1}, {"sigma": 0}, {"bogus": 1},
    {"search": {"dims": ["width"]}}, {"search": {"init": 1}}, {"prune": {"criterion": "l1"}},
    {"rho_max": [0.9, 1.0, 0.5]}, {"train": {"lr": 0.1}}, {"model": "huge"}, {"model": {"depth": 3}},
    {"pretrain": {"steps": 0}},
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        P.ExperimentConfig.from_dict(bad)


def test_dims_canonical_and_overrides():
    assert P.parse_dims("seq,neuron") == ("neuron", "seq")
    assert P.parse_dims("head+seq") == ("head", "seq")
    cfg = P.ExperimentConfig().with_overrides(seed=4, budget=0.5, dims="seq", criterion="random", out="x")
    assert (cfg.seed, cfg.budget, cfg.search.dims, cfg.prune.criterion, cfg.out) == (4, 0.5, ("seq",), "random",
                                                                                      "x")
    assert cfg.budget_macs == int(0.5 * cost(cfg.model).total)
    assert P.ExperimentConfig(budget=1e6).budget_macs == 1_000_000


def test_stage_hashes_cover_upstream_sections():
    a = P.ExperimentConfig()
    b = a.with_overrides(criterion="magnitude")
    assert a.stage_hash("pretrain") == b.stage_hash("pretrain")
    assert a.stage_hash("prune") != b.stage_hash("prune")
    c = a.with_overrides(seed=1)
    assert all(a.stage_hash(s) != c.stage_hash(s) for s in ("pretrain", "search", "finetune", "report"))
    assert a.with_overrides(out="elsewhere").stage_hash("report") == a.stage_hash("report")


# -- stage artifacts ---------------------------------------------------------------------


def test_missing_upstream_names_stage(tmp_path):
    cfg = small_config(tmp_path)
    upstream = ("pretrain", "search", "prune", "finetune", "eval")
    for i, cmd in enumerate((P.cmd_search, P.cmd_prune, P.cmd_finetune, P.cmd_eval, P.cmd_report)):
        with pytest.raises(P.StageError) as e:
            cmd(cfg)
        assert e.value.kind == "missing_artifact" and e.value.stage in upstream[:i + 1]
        assert e.value.stage in str(e.value)


def test_mismatched_and_corrupt_artifacts(tmp_path):
    cfg = small_config(tmp_path)
    P.cmd_pretrain(cfg)
    other = cfg.with_overrides(seed=9)
    with pytest.raises(P.StageError) as e:
        P.cmd_search(other)
    assert e.value.kind == "config_mismatch" and e.value.stage == "pretrain"
    w = next((tmp_path / "pretrain" / "weights").iterdir())
    w.write_bytes(w.read_bytes()[:-8] + bytes(8))
    with pytest.raises(P.StageError) as e:
        P.load_weights(tmp_path / "pretrain", cfg.stage_hash("pretrain"), "pretrain")
    assert e.value.kind == "corrupt_artifact"
    assert set(e.value.to_dict()) == {"error", "stage", "message"}


def test_weights_roundtrip_exact(tmp_path):
    weights = {"a": np.random.default_rng(0).normal(size=(3, 4)), "b.c": np.arange(5.0)}
    P.save_weights(tmp_path, weights, "abc", "pretrain", {"note": 1})
    back, manifest = P.load_weights(tmp_path, "abc", "pretrain")
    assert manifest["note"] == 1
    for k in weights:
        np.testing.assert_array_equal(back[k], weights[k])


# -- end-to-end ----------------------------------------------------------------------------


def test_pipeline_report_consistent(run):
    cfg, report = run
    out = cfg.out
    policy = PruningPolicy.from_dict(report.policy)
    assert report.pruned_flops["total"] == cost(cfg.model, policy).total <= cfg.budget_macs
    assert report.reduction == 1 - report.pruned_flops["total"] / report.baseline_flops["total"]
    loaded = P.RunReport.load(f"{out}/report/report.json")
    assert loaded.config_hash == cfg.stage_hash("report")
    assert set(report.accuracy) == {"baseline", "inherited", "post_prune", "post_finetune"}
    assert all(0 <= a <= 1 for a in report.accuracy.values())
    assert report.retained["neuron"] == policy.neurons_kept(cfg.model)
    history = open(f"{out}/search/history.jsonl").read().splitlines()
    assert len(history) == cfg.search.init + cfg.search.iterations
    assert all(json.loads(line)["config_hash"] == cfg.stage_hash("search") for line in history)


def test_attention_dump(run):
    cfg, report = run
    d = f"{cfg.out}/report/{report.attention_dir}"
    n = cfg.model.seq_len
    grid = np.loadtxt(f"{d}/layer00_head00.txt")
    assert grid.shape == (n, n)
    np.testing.assert_allclose(grid.sum(1), 1.0, atol=1e-5)
    index = json.load(open(f"{d}/index.json"))["kept"]
    assert sum(index["0"].values()) == report.retained["head"][0]


def test_report_rejects_tampered_reduction(run):
    cfg, report = run
    d = report.to_dict()
    d["reduction"] += 0.01
    with pytest.raises(ValueError):
        P.RunReport.from_dict(d)


def test_repeat_run_identical(run, tmp_path):
    cfg, report = run
    again = P.run_pipeline(cfg.with_overrides(out=tmp_path))
    assert json.dumps(P.strip_wall_clock(again.to_dict()), sort_keys=True) == \
        json.dumps(P.strip_wall_clock(report.to_dict()), sort_keys=True)
    assert (tmp_path / "prune" / "plan.json").read_text() == open(f"{cfg.out}/prune/plan.json").read()


def test_stages_rerun_independently(run, tmp_path):
    cfg, report = run
    # each stage reads only upstream artifacts, so rerunning one in place reproduces its outputs
    before = open(f"{cfg.out}/eval/eval.json").read()
    P.cmd_eval(cfg)
    assert P.strip_wall_clock(json.loads(open(f"{cfg.out}/eval/eval.json").read())) == \
        P.strip_wall_clock(json.loads(before))


def test_seq_only_ablation(tmp_path):
    cfg = small_config(tmp_path, search={"init": 2, "iterations": 1, "restarts": 1})
    data = P.dataset(cfg)
    w = P.cmd_pretrain(cfg, data)
    rows = {r["variant"]: r for r in P.run_ablation(cfg, w, data)}
    assert list(rows) == ["joint", "neuron-only", "head-only", "seq-only"]
    seq = rows["seq-only"]
    assert seq["feasible"]
    v = PruningPolicy.from_dict(seq["policy"]).to_vector().reshape(-1, 3)
    assert np.all(v[:, :2] == 0)
    assert seq["exact_cost"] <= cfg.budget_macs
    for r in rows.values():
        if r["min_cost"] > cfg.budget_macs:
            assert not r["feasible"]
        assert r["feasible"] == ("post_finetune" in r)


# -- command line -----------------------------------------------------------------------------


def test_cli_defaults_and_flops(capsys):
    assert main(["defaults"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["budget"] == 0.4
    assert main(["flops", "--model", "deit-s"]) == 0
    out = capsys.readouterr().out
    assert "4.60G" in out and "2.79G" in out


def test_cli_errors_are_json(tmp_path, capsys):
    assert main(["search", "--out", str(tmp_path / "none")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing_artifact" and err["stage"] == "pretrain"
    assert main(["pretrain", "--seed", "-1", "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ValueError"
    assert main(["flops", "--config", str(tmp_path / "missing.yaml")]) == 1
    capsys.readouterr()
    bad = tmp_path / "bad.yaml"
    bad.write_text("budget: 0\n")
    assert main(["flops", "--config", str(bad)]) == 1


def test_cli_flops_prints_searched_policy(run, tmp_path, capsys):
    cfg, _ = run
    path = tmp_path / "c.yaml"
    path.write_text(cfg.dumps())
    assert main(["flops", "--config", str(path)]) == 0
    assert "searched policy" in capsys.readouterr().out
