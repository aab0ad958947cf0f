"""Dense linear-algebra helpers, perturbation sets, seeded initializers and
learning-rate schedules.

Matrices are plain ``float64`` numpy arrays. Every random draw goes through
:func:`keyed_rng`, a Philox generator keyed by ``(seed, *counters)``, so a
value depends only on its key and never on call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, RankError

__all__ = [
    "ContractError",
    "RankError",
    "PerturbationSet",
    "LrSchedule",
    "keyed_rng",
    "project",
    "frobenius_norm",
    "init_lora_pair",
    "lr_at",
]


# Stream tags keep independent random streams apart under one seed.
TAG_LORA_A = 1
TAG_W0 = 2
TAG_DROPOUT = 3
TAG_CLASS_EMB = 4
TAG_RANDOM_START = 5
TAG_SHUFFLE = 6
TAG_DATA = 7
TAG_NOISE = 8


def keyed_rng(seed: int, *counters: int) -> np.random.Generator:
    """Counter-based generator: a pure function of ``(seed, *counters)``."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(c) & 0xFFFFFFFFFFFFFFFF for c in counters]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass(frozen=True)
class PerturbationSet:
    """Admissible perturbation set: an l-inf box or an l2 ball centred at 0."""

    norm_kind: str
    radius: float
    dimension: int

    def __post_init__(self):
        if self.norm_kind not in ("linf", "l2"):
            raise ContractError(f"norm_kind must be 'linf' or 'l2', got {self.norm_kind!r}")
        if not self.radius >= 0:
            raise ContractError(f"radius must be >= 0, got {self.radius}")
        if self.dimension < 1:
            raise ContractError("dimension must be positive")

    @property
    def diameter(self) -> float:
        # For linf this is the Euclidean diameter of the box.
        if self.norm_kind == "l2":
            return 2.0 * self.radius
        return 2.0 * self.radius * math.sqrt(self.dimension)

    def norm(self, v) -> np.ndarray | float:
        """Set norm of ``v`` (row-wise when ``v`` is 2-D)."""
        v = np.asarray(v, dtype=np.float64)
        if self.norm_kind == "linf":
            return np.max(np.abs(v), axis=-1) if v.size else 0.0
        return np.linalg.norm(v, axis=-1)

    def contains(self, v, tol: float = 1e-12) -> bool:
        return bool(np.all(self.norm(v) <= self.radius + tol))


def project(pset: PerturbationSet, v) -> np.ndarray:
    """Euclidean projection onto ``pset``.

    ``v`` may be one vector or a stack of vectors (one per row); each row is
    projected independently. linf is a coordinate clamp, l2 a radial rescale.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != pset.dimension:
        raise ContractError(f"vector dimension {v.shape[-1]} != set dimension {pset.dimension}")
    r = float(pset.radius)
    if pset.norm_kind == "linf":
        return np.clip(v, -r, r)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if r == 0.0:
        return np.zeros_like(v)
    out = np.where(norms > r, v * r / np.where(norms > 0, norms, 1.0), v)
    # Rescaling can overshoot by one ulp; pull those rows back inside.
    over = np.linalg.norm(out, axis=-1, keepdims=True) > r
    if np.any(over):
        out = np.where(over, out * np.nextafter(1.0, 0.0), out)
    return out


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def init_lora_pair(d: int, k: int, r: int, sigma: float = 0.02, seed: int = 0, *, stream: int = 0):
    """Return ``(A, B)`` with ``A ~ N(0, sigma^2)`` of shape ``r x k`` and ``B = 0`` of shape ``d x r``.

    ``stream`` separates the draws of different layers sharing one seed.
    """
    if r < 1 or r > min(d, k):
        raise RankError(f"rank {r} must lie in [1, min(d, k) = {min(d, k)}]")
    if not sigma > 0:
        raise ContractError("sigma must be positive")
    a = keyed_rng(seed, TAG_LORA_A, stream).normal(0.0, sigma, size=(r, k))
    b = np.zeros((d, r))
    return a, b


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "cosine"
    base_rate: float = 2e-4
    total_steps: int = 1
    floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if not self.base_rate > 0:
            raise ContractError("base_rate must be positive")
        if not 0 <= self.floor <= self.base_rate:
            raise ContractError("floor must lie in [0, base_rate]")
        if self.total_steps < 1:
            raise ContractError("total_steps must be >= 1")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at ``step``. Steps past ``total_steps`` return the floor."""
    if schedule.kind == "constant":
        return schedule.base_rate
    if step >= schedule.total_steps:
        return schedule.floor
    step = max(step, 0)
    cos = 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))
    return schedule.floor + (schedule.base_rate - schedule.floor) * cos


def clip_frobenius(m, radius: float) -> np.ndarray:
    """Rescale ``m`` onto the Frobenius ball of ``radius`` if it lies outside."""
    norm = frobenius_norm(m)
    if norm <= radius:
        return m
    out = m * (radius / norm)
    while frobenius_norm(out) > radius:
        out = out * np.nextafter(1.0, 0.0)
    return out
