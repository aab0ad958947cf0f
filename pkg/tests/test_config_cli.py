import json

import pytest

from advlora import cli
from advlora import config as config_mod
from advlora import trainer as trainer_mod
from advlora.errors import ConfigurationError

SMALL = {
    "model": {"hidden": [8], "embed_dim": 5, "rank": 2, "gamma": 0.1, "head": "random"},
    "data": {"K": 4, "n": 6, "per_class": 20, "spread": 0.3, "shots": 2},
    "train": {"lr": 0.05, "total_iterations": 10, "batch_size": 8, "eps": 0.05},
    "attack": {"eps": 0.05, "alpha": 0.02, "steps": 3},
}

SMALL_THEORY = {
    "theory": {"bench": {
        "lipschitz_pairs": 50, "danskin_samples": 3, "smoothness_pairs": 50, "contraction_iterations": 200,
        "rate_iterations": 10000, "plateau_iterations": 400, "plateau_seeds": 2,
    }},
}


def _write(tmp_path, cfg, name="run"):
    cfg = json.loads(json.dumps(cfg))
    cfg.setdefault("output", {})
    cfg["output"].update({"dir": str(tmp_path / "out"), "name": name})
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path, tmp_path / "out" / name


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# -- config ----------------------------------------------------------------------

def test_defaults_resolve_and_round_trip():
    cfg = config_mod.resolve({})
    assert config_mod.resolve(json.loads(config_mod.dump(cfg))) == cfg


@pytest.mark.parametrize("bad", [{"taus": [2]}, {"train": {"taus": 2}}, {"model": {"placement": {"layers": "all"}}}])
def test_unknown_keys_rejected_by_name(bad):
    with pytest.raises(ConfigurationError, match="unknown config key"):
        config_mod.resolve(bad)


@pytest.mark.parametrize("bad", [{"train": {"tau": "ten"}}, {"train": {"tau": 2.5}}, {"model": {"qv": 1}}, {"model": "x"}])
def test_wrong_types_rejected(bad):
    with pytest.raises(ConfigurationError):
        config_mod.resolve(bad)


def test_override_parsing_and_application():
    cfg = config_mod.apply_override(config_mod.resolve({}), "train.tau", config_mod.parse_value("10"))
    assert cfg["train"]["tau"] == 10
    cfg = config_mod.apply_override(cfg, "train.norm", config_mod.parse_value("l2"))
    assert cfg["train"]["norm"] == "l2"
    cfg = config_mod.apply_override(cfg, "sweep.axes.rank", [1, 2])
    assert cfg["sweep"]["axes"] == {"rank": [1, 2]}
    with pytest.raises(ConfigurationError):
        config_mod.apply_override(cfg, "train.nope", 1)


# -- train / eval / attack / data gen ------------------------------------------------

def test_train_writes_outputs_and_resolved_config_reproduces(tmp_path):
    path, out = _write(tmp_path, SMALL)
    assert cli.main(["train", "--config", str(path), "--train.tau", "3"]) == 0
    assert {"checkpoint.json", "history.csv", "config.resolved.json"} <= set(_files(out))
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["tau"] == 3
    first = _files(out)
    # The resolved file alone reproduces the run.
    assert cli.main(["train", "--config", str(out / "config.resolved.json")]) == 0
    assert _files(out) == first


def test_train_is_byte_identical_across_runs(tmp_path):
    path, out = _write(tmp_path, SMALL)
    assert cli.main(["train", "--config", str(path)]) == 0
    first = _files(out)
    assert cli.main(["train", "--config", str(path)]) == 0
    assert _files(out) == first


def test_eval_and_attack(tmp_path, capsys):
    path, out = _write(tmp_path, SMALL)
    assert cli.main(["train", "--config", str(path)]) == 0
    ckpt = str(out / "checkpoint.json")
    epath, eout = _write(tmp_path, SMALL, "ev")
    assert cli.main(["eval", "--config", str(epath), "--checkpoint", ckpt]) == 0
    first = _files(eout)
    assert {"report.json", "report.csv", "metrics.json", "config.resolved.json"} <= set(first)
    metrics = json.loads(first["metrics.json"])
    assert metrics["robust_acc"] <= metrics["clean_acc"]
    assert cli.main(["eval", "--config", str(epath), "--checkpoint", ckpt]) == 0
    assert _files(eout) == first

    assert cli.main(["eval", "--config", str(epath), "--checkpoint", ckpt, "--attack.eps", "0"]) == 0
    m0 = json.loads((eout / "metrics.json").read_text())
    assert m0["robust_acc"] == m0["clean_acc"]

    apath, aout = _write(tmp_path, SMALL, "adv")
    assert cli.main(["attack", "--config", str(apath), "--checkpoint", ckpt]) == 0
    lines = (aout / "adversarial.csv").read_text().splitlines()
    assert len(lines) > 1


def test_eval_dimension_mismatch_names_both_shapes(tmp_path, capsys):
    path, out = _write(tmp_path, SMALL)
    assert cli.main(["train", "--config", str(path)]) == 0
    code = cli.main(["eval", "--config", str(path), "--checkpoint", str(out / "checkpoint.json"), "--data.n", "7"])
    assert code == 2
    err = capsys.readouterr().err
    assert "(*, 6)" in err and "7)" in err


def test_missing_checkpoint_and_bad_key_exit_2(tmp_path, capsys):
    path, _ = _write(tmp_path, SMALL)
    assert cli.main(["eval", "--config", str(path), "--checkpoint", str(tmp_path / "none.json")]) == 2
    assert cli.main(["train", "--config", str(path), "--train.taus", "2"]) == 2
    assert "train.taus" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"taus": [2]}))
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_numerical_abort_exit_3(tmp_path, monkeypatch):
    real = trainer_mod.backward

    def poisoned(*args, **kwargs):
        bundle = real(*args, **kwargs)
        bundle.loss = float("inf")
        return bundle

    monkeypatch.setattr(trainer_mod, "backward", poisoned)
    path, out = _write(tmp_path, SMALL)
    assert cli.main(["train", "--config", str(path)]) == 3
    assert not (out / "checkpoint.json").exists()


def test_data_gen(tmp_path):
    path, out = _write(tmp_path, SMALL)
    assert cli.main(["data", "gen", "--config", str(path)]) == 0
    files = _files(out)
    assert {"train.csv", "test.csv", "train.meta.json", "test.meta.json"} <= set(files)
    # per_class counts both splits together
    assert len(files["train.csv"].decode().splitlines()) == 1 + 4 * 10
    assert len(files["test.csv"].decode().splitlines()) == 1 + 4 * 10


# -- sweep ------------------------------------------------------------------------

def test_sweep_tau_by_shots(tmp_path):
    cfg = dict(SMALL, sweep={"axes": {"tau": [2, 10], "shots": [1, 4]}})
    path, out = _write(tmp_path, cfg)
    assert cli.main(["sweep", "--config", str(path)]) == 0
    rows = json.loads((out / "report.json").read_text())
    assert len(rows) == 4
    assert {(r["tau"], r["shots"]) for r in rows} == {(2, 1), (2, 4), (10, 1), (10, 4)}
    svg = (out / "plots" / "robust_vs_tau.svg").read_text()
    assert "shots=1" in svg and "shots=4" in svg


def test_sweep_rank_curves_per_shot_and_baseline(tmp_path):
    cfg = dict(SMALL, sweep={"axes": {"rank": [1, 2], "shots": [1, 2], "tau": ["baseline"]}})
    path, out = _write(tmp_path, cfg)
    assert cli.main(["sweep", "--config", str(path)]) == 0
    rows = json.loads((out / "report.json").read_text())
    assert len(rows) == 4 and all(r["tau"] == "baseline" for r in rows)
    assert all(r["robust"] <= r["clean"] for r in rows)
    svg = (out / "plots" / "clean_vs_rank.svg").read_text()
    assert svg.count("<polyline") == 2


def test_sweep_parallel_matches_serial(tmp_path):
    cfg = dict(SMALL, sweep={"axes": {"rank": [1, 2]}})
    path, out = _write(tmp_path, cfg)
    assert cli.main(["sweep", "--config", str(path)]) == 0
    serial = _files(out)
    assert cli.main(["sweep", "--config", str(path), "--jobs", "2"]) == 0
    assert _files(out) == serial


@pytest.mark.parametrize("axes", [{}, {"rank": []}])
def test_sweep_needs_non_empty_axes(tmp_path, axes):
    path, _ = _write(tmp_path, dict(SMALL, sweep={"axes": axes}))
    assert cli.main(["sweep", "--config", str(path)]) == 2


# -- theory ---------------------------------------------------------------------

def test_theory_outputs_and_determinism(tmp_path, capsys):
    path, out = _write(tmp_path, SMALL_THEORY)
    assert cli.main(["theory", "--config", str(path)]) == 0
    first = _files(out)
    assert {"theory.json", "trace.csv", "plots/stationarity.svg", "config.resolved.json"} <= set(first)
    assert "PASS inner_contraction" in capsys.readouterr().out
    assert cli.main(["theory", "--config", str(path)]) == 0
    assert _files(out) == first


def test_theory_oversized_inner_rate_exit_4(tmp_path, capsys):
    path, out = _write(tmp_path, SMALL_THEORY)
    assert cli.main(["theory", "--config", str(path), "--theory.bench.contraction_eta_scale", "10"]) == 4
    assert "FAIL inner_contraction" in capsys.readouterr().out
    summary = json.loads((out / "theory.json").read_text())
    assert not summary["passed"]
