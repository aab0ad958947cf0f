import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advlora.errors import ContractError, RankError
from advlora.linalg import (
    LrSchedule,
    PerturbationSet,
    clip_frobenius,
    frobenius_norm,
    init_lora_pair,
    keyed_rng,
    lr_at,
    project,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
kinds = st.sampled_from(["linf", "l2"])
radii = st.floats(0.0, 5.0)


def test_project_linf_clamps_coordinates():
    s = PerturbationSet("linf", 1 / 255, 3)
    out = project(s, np.array([2 / 255, -0.5 / 255, 0.0]))
    assert np.array_equal(out, np.array([1 / 255, -0.5 / 255, 0.0]))


def test_project_l2_rescales_radially():
    out = project(PerturbationSet("l2", 1.0, 2), np.array([3.0, 4.0]))
    assert np.allclose(out, [0.6, 0.8], atol=1e-15)


@pytest.mark.parametrize("kind", ["linf", "l2"])
def test_project_keeps_feasible_points(kind):
    s = PerturbationSet(kind, 1.0, 4)
    v = np.array([0.1, -0.2, 0.3, 0.0])
    assert np.array_equal(project(s, v), v)


def test_project_dimension_mismatch():
    with pytest.raises(ContractError):
        project(PerturbationSet("l2", 1.0, 3), np.ones(4))


def test_perturbation_set_diameter():
    assert PerturbationSet("l2", 0.5, 9).diameter == 1.0
    assert PerturbationSet("linf", 0.5, 9).diameter == pytest.approx(3.0)


@given(kinds, radii, vec3)
def test_projection_feasible_and_idempotent(kind, r, v):
    s = PerturbationSet(kind, r, 3)
    p = project(s, v)
    assert s.norm(p) <= r + 1e-12
    assert np.allclose(project(s, p), p, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["linf", "l2"])
def test_projection_is_nearest_feasible_point(kind, rng):
    s = PerturbationSet(kind, 0.7, 5)
    for _ in range(100):
        v = rng.normal(size=5) * 3
        p = project(s, v)
        u = rng.uniform(-1, 1, size=5)
        u = u * 0.7 if kind == "linf" else u / np.linalg.norm(u) * 0.7 * rng.random()
        assert np.linalg.norm(p - v) <= np.linalg.norm(u - v) + 1e-12


def test_projection_of_rows(rng):
    s = PerturbationSet("l2", 1.0, 4)
    v = rng.normal(size=(6, 4)) * 5
    p = project(s, v)
    assert np.all(np.linalg.norm(p, axis=1) <= 1 + 1e-12)
    assert np.allclose(p[2], project(s, v[2]))


def test_frobenius_norm_examples():
    assert frobenius_norm(np.eye(2)) == pytest.approx(1.41421356, abs=1e-8)
    assert frobenius_norm(np.zeros((3, 2))) == 0.0
    assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0


def test_init_lora_pair_b_zero_and_deterministic():
    a, b = init_lora_pair(6, 5, 2, 0.02, seed=3)
    assert a.shape == (2, 5) and b.shape == (6, 2)
    assert frobenius_norm(b) == 0.0
    a2, _ = init_lora_pair(6, 5, 2, 0.02, seed=3)
    assert np.array_equal(a, a2)
    a3, _ = init_lora_pair(6, 5, 2, 0.02, seed=4)
    assert not np.array_equal(a, a3)


@pytest.mark.parametrize("r", [0, 6])
def test_init_lora_pair_rank_error(r):
    with pytest.raises(RankError):
        init_lora_pair(5, 8, r)


def test_init_lora_pair_mean_statistics():
    sigma, r, k = 0.02, 2, 64
    means = [init_lora_pair(64, k, r, sigma, seed=s)[0].mean() for s in range(1000)]
    assert abs(np.mean(means)) <= 4 * sigma / math.sqrt(r * k * 1000)


def test_keyed_rng_is_pure_function_of_key():
    x = keyed_rng(1, 2, 3).normal(size=4)
    keyed_rng(9, 9).normal(size=100)
    assert np.array_equal(x, keyed_rng(1, 2, 3).normal(size=4))
    assert not np.array_equal(x, keyed_rng(1, 2, 4).normal(size=4))


def test_lr_cosine_examples():
    s = LrSchedule("cosine", 2e-4, 100, 0.0)
    assert lr_at(s, 0) == 2e-4
    assert lr_at(s, 100) == 0.0
    assert lr_at(s, 50) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(s, 150) == 0.0


def test_lr_constant():
    assert lr_at(LrSchedule("constant", 0.3, 10), 7) == 0.3


@given(st.integers(1, 500), st.floats(1e-6, 1.0), st.floats(0.0, 1.0), st.data())
def test_lr_within_bounds(total, base, frac, data):
    floor = base * frac
    s = LrSchedule("cosine", base, total, floor)
    step = data.draw(st.integers(0, total))
    assert floor - 1e-18 <= lr_at(s, step) <= base + 1e-18


@given(arrays(np.float64, (3, 2), elements=finite), st.floats(1e-3, 10.0))
def test_clip_frobenius(m, radius):
    out = clip_frobenius(m, radius)
    assert frobenius_norm(out) <= radius
    if frobenius_norm(m) <= radius:
        assert np.array_equal(out, m)
