import csv
import io

import numpy as np
import pytest

from advlora import trainer as trainer_mod
from advlora.attack import AscentPolicy
from advlora.data import make_blobs, sample_few_shot
from advlora.errors import ConfigurationError, NumericalAbort
from advlora.model import AdapterPlacement, Batch, build_model, chain_rule_residual
from advlora.trainer import FewShotExperiment, TrainConfig, run_few_shot, train


@pytest.fixture(scope="module")
def task():
    pool, test = make_blobs(5, 8, 30, 0.3, seed=1)
    return pool, test, sample_few_shot(pool, 4, 0)


def _model(seed=0, **kw):
    kw.setdefault("dropout", 0.0)
    return build_model(8, (12,), 6, 5, 2, seed=seed, gamma=0.1, **kw)


def _params(model):
    return {k: (p.a.copy(), p.b.copy()) for k, p in model.adapters()}


def _same_params(m1, m2):
    p1, p2 = _params(m1), _params(m2)
    return all(np.array_equal(p1[k][0], p2[k][0]) and np.array_equal(p1[k][1], p2[k][1]) for k in p1)


def test_zero_budget_matches_baseline_bitwise(task):
    _, _, support = task
    cfg = TrainConfig(lr=0.05, total_iterations=40, batch_size=8, tau=3, eps=0.0)
    adv, h_adv = train(_model(), support, cfg)
    base, h_base = train(_model(), support, TrainConfig(lr=0.05, total_iterations=40, batch_size=8, adversarial=False))
    assert _same_params(adv, base)
    assert np.array_equal(h_adv.column("loss"), h_base.column("loss"))


def test_training_is_deterministic(task):
    _, _, support = task
    cfg = TrainConfig(lr=0.05, total_iterations=30, batch_size=8, tau=2, eps=0.1, seed=4)
    m = _model(dropout=0.25)
    a, ha = train(m, support, cfg)
    b, hb = train(m, support, cfg)
    assert _same_params(a, b)
    assert ha.to_csv() == hb.to_csv()


def test_sanity_loss_falls_and_beats_chance():
    pool, test = make_blobs(10, 32, 100, 0.2, seed=0)
    support = sample_few_shot(pool, 4, 0)
    model = build_model(32, (64,), 32, 10, 2, seed=0, w0_gain=0.5)
    trained, hist = train(model, support, TrainConfig(lr=0.01, total_iterations=200, tau=2, batch_size=32))
    loss = hist.column("loss")
    assert loss[-10:].mean() < 0.1 * loss[:10].mean()
    assert trainer_mod.accuracy(trained, test) > 0.3


def test_frozen_weights_and_disabled_adapters_untouched(task):
    _, _, support = task
    model = _model(placement=AdapterPlacement((1,), "all"))
    w0 = {k: v.copy() for k, v in model.frozen_weights().items()}
    before = _params(model)
    trained, _ = train(model, support, TrainConfig(lr=0.1, total_iterations=20, batch_size=8))
    for key, part in trained.adapters():
        assert np.array_equal(part.w0, w0[key])
        if not part.enabled:
            assert np.array_equal(part.a, before[key][0]) and np.array_equal(part.b, before[key][1])
    assert any(not np.array_equal(p.b, before[k][1]) for k, p in trained.enabled_adapters())
    # the input model is left alone
    assert _same_params(model, _model(placement=AdapterPlacement((1,), "all")))


def test_clipping_bounds_hold_every_step(task):
    _, _, support = task
    cfg = TrainConfig(lr=1.0, total_iterations=30, batch_size=8, clip_ca=0.05, clip_cb=0.02)
    _, hist = train(_model(), support, cfg)
    for col in hist.norm_columns:
        bound = 0.05 if col.startswith("a_") else 0.02
        assert hist.column(col).max() <= bound * (1 + 1e-12)


def test_history_shape_and_csv_columns(task):
    _, _, support = task
    model = _model()
    _, hist = train(model, support, TrainConfig(lr=0.01, total_iterations=17, batch_size=8))
    assert len(hist) == 17
    rows = list(csv.reader(io.StringIO(hist.to_csv())))
    header = rows[0]
    assert header[:5] == ["t", "loss", "delta_l2", "eta_delta", "eta_w"]
    assert "wall_clock" not in header
    assert len(header) == 5 + 2 * len(model.enabled_adapters())
    assert len(rows) == 18 and [int(r[0]) for r in rows[1:]] == list(range(17))


def test_delta_respects_budget(task):
    _, _, support = task
    _, hist = train(_model(), support, TrainConfig(lr=0.01, total_iterations=20, batch_size=8, eps=0.1, norm="l2", tau=5))
    assert hist.column("delta_l2").max() <= 0.1 + 1e-12


def test_non_finite_loss_aborts_with_partial_history(task, monkeypatch):
    _, _, support = task
    real = trainer_mod.backward
    calls = {"n": 0}

    def poisoned(*args, **kwargs):
        bundle = real(*args, **kwargs)
        calls["n"] += 1
        if calls["n"] > 5:
            bundle.loss = float("nan")
        return bundle

    monkeypatch.setattr(trainer_mod, "backward", poisoned)
    with pytest.raises(NumericalAbort) as info:
        train(_model(), support, TrainConfig(lr=0.01, total_iterations=50, batch_size=8, adversarial=False))
    assert len(info.value.partial) == 5


def test_iteration_count_rules(task):
    _, _, support = task
    assert TrainConfig().iterations_for(support) == 500 * 4
    assert TrainConfig(literal_iterations=True).iterations_for(support) == 500 * 4 // 5
    assert TrainConfig(total_iterations=7).iterations_for(support) == 7


@pytest.mark.parametrize("kw", [dict(tau=0), dict(delta_mode="sometimes"), dict(batch_size=0), dict(clip_ca=0.0)])
def test_bad_config_rejected(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_chain_rule_identity_along_training(task):
    _, _, support = task
    batch = Batch(support.features[:8], support.labels[:8])
    residuals = []

    def check(t, model, delta):
        residuals.append(chain_rule_residual(model, batch, delta))

    cfg = TrainConfig(lr=0.05, total_iterations=50, batch_size=8, tau=2, eps=0.1,
                      inner_policy=AscentPolicy(adaptive=False, fixed=0.05))
    train(_model(), support, cfg, callback=check)
    assert len(residuals) == 50 and max(residuals) <= 1e-10


def _factory(rank, placement, seed):
    return build_model(8, (12,), 6, 5, rank, seed=seed, gamma=0.1, dropout=0.0,
                       placement=AdapterPlacement(placement, "all"))


def test_few_shot_grid_rows_and_seed_means(task):
    pool, test, _ = task
    base = TrainConfig(lr=0.05, total_iterations=10, batch_size=8, eps=0.05)
    exp = FewShotExperiment("g", pool, test, _factory, shots=[1, 2], taus=[None, 2], seeds=[0, 1, 2], train=base)
    results = run_few_shot(exp)
    assert len(results) == 4
    for r in results:
        assert len(r.per_seed) == 3
        assert r.clean == pytest.approx(np.mean([m.clean_acc for m in r.per_seed]))
        assert r.to_row()["tau"] == ("baseline" if r.tau is None else r.tau)
    single = FewShotExperiment("one", pool, test, _factory, train=base)
    assert len(run_few_shot(single)) == 1
