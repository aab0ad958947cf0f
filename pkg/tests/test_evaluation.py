import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from advlora.attack import AttackConfig, main_protocol
from advlora.data import Dataset, make_blobs
from advlora.errors import ContractError
from advlora.evaluation import REPORT_COLUMNS, emit_report, evaluate, harmonic_mean, read_report, report_row, write_curves_svg
from advlora.linalg import PerturbationSet
from advlora.model import build_model

# (clean, robust, hm) rows of the LoRA-variant ablation table, percentages.
TABLE_ROWS = [
    (81.25, 34.76, 48.69),
    (78.71, 30.74, 44.21),
    (80.65, 30.62, 44.39),
    (80.95, 34.73, 48.61),
    (80.95, 34.65, 48.53),
    (81.21, 29.32, 43.08),
    (80.09, 33.02, 46.76),
    (81.37, 30.72, 44.60),
    (79.80, 32.70, 46.39),
    (80.45, 30.98, 44.73),
]


@pytest.mark.parametrize("clean,robust,hm", TABLE_ROWS)
def test_harmonic_mean_table_rows(clean, robust, hm):
    assert abs(harmonic_mean(clean, robust) - hm) <= 0.01


@given(st.floats(0.0, 100.0))
def test_harmonic_mean_of_equal_values(x):
    assert harmonic_mean(x, x) == pytest.approx(x, abs=1e-12)


@given(st.floats(0.0, 100.0))
def test_harmonic_mean_with_zero(x):
    assert harmonic_mean(x, 0.0) == 0.0


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_harmonic_mean_below_arithmetic_mean(c, r):
    assert harmonic_mean(c, r) <= (c + r) / 2 + 1e-15


def test_harmonic_mean_rejects_mixed_scales():
    with pytest.raises(ContractError):
        harmonic_mean(81.25, 0.3476)
    with pytest.raises(ContractError):
        harmonic_mean(120.0, 50.0)


def _untrained(seed, n=16, K=10, embed=8):
    return build_model(n, (12,), embed, K, 2, seed=seed, dropout=0.0)


def test_no_attack_means_robust_equals_clean():
    tr, te = make_blobs(4, 6, 20, 0.3, seed=0)
    m = build_model(6, (8,), 5, 4, 2, seed=0)
    met = evaluate(m, te)
    assert met.robust_acc == met.clean_acc and met.attack_descriptor == "none"
    assert met.n_eval == len(te)


def test_zero_budget_attack_leaves_accuracy():
    tr, te = make_blobs(4, 6, 20, 0.3, seed=0)
    m = build_model(6, (8,), 5, 4, 2, seed=0)
    met = evaluate(m, te, AttackConfig("pgd", PerturbationSet("linf", 0.0, 6), 0.01, 5))
    assert met.robust_acc == met.clean_acc


def test_evaluate_is_deterministic_and_forces_per_sample():
    tr, te = make_blobs(4, 6, 20, 0.3, seed=0)
    m = build_model(6, (8,), 5, 4, 2, seed=0)
    atk = AttackConfig("pgd", PerturbationSet("linf", 0.2, 6), 0.05, 5, random_start=True, per_sample=False)
    a = evaluate(m, te, atk, seed=3)
    b = evaluate(m, te, atk, seed=3)
    assert a == b
    assert a.attack_descriptor["per_sample"] is True
    assert a.robust_acc <= a.clean_acc


def test_untrained_accuracy_matches_monte_carlo_chance_level():
    """Untrained model on symmetric blobs vs an independent Monte-Carlo estimate of
    its expected accuracy, computed with a hand-written forward pass on fresh draws."""
    K, n, spread = 10, 16, 0.5
    accs, expected, var = [], [], []
    for seed in range(5):
        _, te = make_blobs(K, n, 200, spread, seed=seed)
        model = _untrained(seed, n, K)
        accs.append(evaluate(model, te).clean_acc)
        centers = np.array(te.meta["centers"])
        rng = np.random.default_rng(10_000 + seed)
        labels = rng.integers(0, K, size=40_000)
        x = centers[labels] + spread * rng.normal(size=(len(labels), n))
        h = x
        for li, layer in enumerate(model.layers):
            h = h @ layer.parts["w"].w0.T
            if li < len(model.layers) - 1:
                h = np.tanh(h)
        h = h / np.linalg.norm(h, axis=1, keepdims=True)
        p = float(np.mean(np.argmax(h @ model.class_embeddings.T, axis=1) == labels))
        expected.append(p)
        var.append(p * (1 - p) / len(te))
    se = math.sqrt(sum(var)) / len(var)
    assert abs(np.mean(accs) - np.mean(expected)) <= 3 * se


def test_report_row_rendering():
    row = report_row("exp", 4, None, 2, "all", 0.8125, 0.3476, 3)
    assert list(row) == list(REPORT_COLUMNS)
    assert row["tau"] == "baseline" and row["clean"] == 81.25 and row["robust"] == 34.76 and row["hm"] == 48.69


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_round_trip(tmp_path, fmt):
    rows = [report_row("a", 4, 2, 2, "all", 0.9, 0.6, 3), report_row("b", 1, None, 8, "mid", 0.5, 0.25, 1)]
    path = tmp_path / f"r.{fmt}"
    emit_report(rows, path, fmt)
    assert read_report(path) == rows
    if fmt == "csv":
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS) and len(lines) == 3
    else:
        data = json.loads(path.read_text())
        assert [list(r) for r in data] == [list(REPORT_COLUMNS)] * 2


def test_report_needs_rows(tmp_path):
    with pytest.raises(ContractError):
        emit_report([], tmp_path / "x.json")


def test_report_rejects_inconsistent_hm(tmp_path):
    row = report_row("a", 4, 2, 2, "all", 0.9, 0.1, 1)
    row["hm"] = 80.0
    with pytest.raises(ContractError):
        emit_report([row], tmp_path / "x.json")


def test_svg_is_deterministic(tmp_path):
    series = {"shots=1": [(1, 50.0), (2, 60.0)], "shots=4": [(1, 70.0), (2, 72.5)]}
    write_curves_svg(series, tmp_path / "a.svg", xlabel="rank", ylabel="acc")
    write_curves_svg(series, tmp_path / "b.svg", xlabel="rank", ylabel="acc")
    text = (tmp_path / "a.svg").read_text()
    assert text == (tmp_path / "b.svg").read_text()
    assert text.count("<polyline") == 2 and "rank" in text and "acc" in text
