"""FGSM and PGD attacks, and the adaptive inner ascent step used in training."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ContractError
from .linalg import TAG_RANDOM_START, PerturbationSet, keyed_rng, project
from .model import AdapterModel, Batch, backward

SHARED_START_KEY = 1 << 40


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    set: PerturbationSet
    step_size: float
    steps: int = 1
    random_start: bool = False
    per_sample: bool = True
    # "auto" is sign steps for linf and unit-norm steps for l2; "gradient" is plain ascent.
    direction: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.kind == "fgsm" and self.steps != 1:
            raise ConfigurationError("fgsm takes exactly one step")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if not self.step_size > 0:
            raise ConfigurationError("step_size must be positive")
        if self.direction not in ("auto", "sign", "normalized", "gradient"):
            raise ConfigurationError(f"unknown ascent direction {self.direction!r}")

    @property
    def eps(self) -> float:
        return self.set.radius

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "norm": self.set.norm_kind,
            "eps": self.set.radius,
            "alpha": self.step_size,
            "steps": self.steps,
            "random_start": self.random_start,
            "per_sample": self.per_sample,
        }


def main_protocol(dim: int, eps: float = 1 / 255) -> AttackConfig:
    """Evaluation default: 100-step l-inf PGD with ``alpha = eps``, no random start."""
    return AttackConfig("pgd", PerturbationSet("linf", eps, dim), eps, 100)


def appendix_protocol(dim: int, eps: float = 2 / 255, steps: int = 20) -> AttackConfig:
    # Step size is not stated for this protocol; 2.5 * eps / steps is the usual choice.
    return AttackConfig("pgd", PerturbationSet("linf", eps, dim), 2.5 * eps / steps, steps)


def fgsm_protocol(dim: int, eps: float = 10 / 255) -> AttackConfig:
    return AttackConfig("fgsm", PerturbationSet("linf", eps, dim), eps, 1)


def ascent_direction(grad: np.ndarray, mode: str) -> np.ndarray:
    if mode == "sign":
        return np.sign(grad)
    if mode == "gradient":
        return grad
    if mode == "normalized":
        norms = np.linalg.norm(grad, axis=-1, keepdims=True)
        return np.where(norms > 0, grad / np.where(norms > 0, norms, 1.0), 0.0)
    raise ContractError(f"unknown direction {mode!r}")


def _resolve_direction(cfg: AttackConfig) -> str:
    if cfg.direction != "auto":
        return cfg.direction
    return "sign" if cfg.set.norm_kind == "linf" else "normalized"


def projected_ascent(grad_fn, delta0, pset: PerturbationSet, step_size: float, steps: int, direction: str = "sign", callback=None):
    """``delta <- P(delta + step_size * dir(grad_fn(delta)))`` repeated ``steps`` times."""
    delta = project(pset, delta0)
    for j in range(steps):
        delta = project(pset, delta + step_size * ascent_direction(grad_fn(delta), direction))
        if callback is not None:
            callback(j + 1, delta)
    return delta


def uniform_in_set(pset: PerturbationSet, rng: np.random.Generator) -> np.ndarray:
    n = pset.dimension
    if pset.norm_kind == "linf":
        return rng.uniform(-pset.radius, pset.radius, size=n)
    v = rng.normal(size=n)
    v /= max(np.linalg.norm(v), 1e-300)
    return project(pset, v * pset.radius * rng.random() ** (1.0 / n))


def random_start(cfg: AttackConfig, sample_ids, per_sample: bool) -> np.ndarray:
    if per_sample:
        return np.stack([uniform_in_set(cfg.set, keyed_rng(cfg.seed, TAG_RANDOM_START, int(i))) for i in sample_ids])
    return uniform_in_set(cfg.set, keyed_rng(cfg.seed, TAG_RANDOM_START, SHARED_START_KEY))


def fgsm(model: AdapterModel, batch: Batch, cfg: AttackConfig) -> np.ndarray:
    """``x + eps * sign(grad_x loss)`` per sample; zero-gradient coordinates stay put."""
    if cfg.kind != "fgsm":
        raise ConfigurationError("fgsm called with a non-fgsm config")
    if cfg.set.norm_kind != "linf":
        raise ConfigurationError("fgsm requires an l-inf perturbation set")
    g = backward(model, batch).grad_inputs
    return batch.inputs + cfg.eps * np.sign(g)


def pgd_delta(model: AdapterModel, batch: Batch, cfg: AttackConfig, per_sample: bool | None = None) -> np.ndarray:
    """Final PGD perturbation: ``M x n`` when per-sample, a single ``n``-vector otherwise."""
    per_sample = cfg.per_sample if per_sample is None else per_sample
    n = model.input_dim
    if cfg.set.dimension != n:
        raise ContractError(f"attack set dimension {cfg.set.dimension} != model input_dim {n}")
    if cfg.random_start:
        delta0 = random_start(cfg, batch.sample_ids, per_sample)
    else:
        delta0 = np.zeros((len(batch), n)) if per_sample else np.zeros(n)

    def grad_fn(delta):
        bundle = backward(model, batch, delta)
        # Rows of grad_inputs carry the 1/M of the batch mean; undo it so each
        # sample sees its own loss gradient whatever the batch size.
        return bundle.grad_inputs * len(batch) if per_sample else bundle.grad_delta

    return projected_ascent(grad_fn, delta0, cfg.set, cfg.step_size, cfg.steps, _resolve_direction(cfg))


def pgd(model: AdapterModel, batch: Batch, cfg: AttackConfig, per_sample: bool | None = None) -> np.ndarray:
    """Perturbed inputs ``x + delta_k`` after ``cfg.steps`` projected ascent steps."""
    return batch.inputs + pgd_delta(model, batch, cfg, per_sample)


def attack_inputs(model: AdapterModel, batch: Batch, cfg: AttackConfig | None, per_sample: bool | None = None) -> np.ndarray:
    if cfg is None:
        return batch.inputs
    if cfg.kind == "fgsm":
        return fgsm(model, batch, cfg)
    return pgd(model, batch, cfg, per_sample)


@dataclass(frozen=True)
class AscentPolicy:
    """Training-time step size for the shared perturbation.

    Before ``switch_iteration`` the rate is ``base / max(|delta|_2, floor)``,
    afterwards it is ``fixed``. ``adaptive=False`` uses ``fixed`` throughout.
    """

    base: float = 0.05
    fixed: float = 0.05
    switch_iteration: int = 300
    floor: float = 1e-8
    adaptive: bool = True

    def rate(self, delta, step_index: int) -> float:
        if self.adaptive and step_index < self.switch_iteration:
            return self.base / max(float(np.linalg.norm(delta)), self.floor)
        return self.fixed


def inner_ascent_step(model: AdapterModel, batch: Batch, delta, step_index: int, policy: AscentPolicy, pset: PerturbationSet, *, train_mode: bool = False, seed: int = 0, mask_step=0):
    """One projected ascent step on the shared ``delta`` using the batch-mean gradient.

    Returns ``(new_delta, eta_delta, bundle)``; ``bundle`` holds the gradients
    at the incoming ``delta``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    bundle = backward(model, batch, delta, train_mode, seed, mask_step)
    eta = policy.rate(delta, step_index)
    return project(pset, delta + eta * bundle.grad_delta), eta, bundle


def with_eps(cfg: AttackConfig, eps: float) -> AttackConfig:
    return replace(cfg, set=replace(cfg.set, radius=eps))
