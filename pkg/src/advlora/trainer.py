"""Adversarial low-rank fine-tuning as projected stochastic gradient descent-ascent.

Per minibatch: ``tau`` projected ascent steps on one perturbation ``delta``
shared by the batch, then a plain SGD step on every enabled ``(A, B)`` pair,
both gradients taken from a single backward pass at the new ``delta``.
``adversarial=False`` skips the ascent and gives the non-robust baseline.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AscentPolicy, AttackConfig, inner_ascent_step
from .data import Dataset, sample_few_shot
from .errors import ConfigurationError, NumericalAbort
from .evaluation import Metrics, evaluate, harmonic_mean, report_row
from .linalg import TAG_SHUFFLE, LrSchedule, PerturbationSet, clip_frobenius, frobenius_norm, keyed_rng, lr_at
from .model import AdapterModel, Batch, backward

ITERATIONS_PER_SHOT = 500


@dataclass
class TrainConfig:
    lr: float = 2e-4
    lr_schedule: str = "cosine"
    lr_floor: float = 0.0
    tau: int = 2
    # None means ITERATIONS_PER_SHOT * shots, or the literal per-shot / K rule.
    total_iterations: int | None = None
    literal_iterations: bool = False
    batch_size: int = 32
    seed: int = 0
    delta_mode: str = "persistent"
    inner_policy: AscentPolicy = field(default_factory=AscentPolicy)
    eps: float = 1 / 255
    norm: str = "linf"
    clip_ca: float | None = None
    clip_cb: float | None = None
    adversarial: bool = True

    def __post_init__(self):
        if self.adversarial and self.tau < 1:
            raise ConfigurationError("tau must be >= 1 for adversarial training")
        if self.delta_mode not in ("persistent", "reset_per_batch"):
            raise ConfigurationError(f"unknown delta_mode {self.delta_mode!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("clip_ca", "clip_cb"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigurationError(f"{name} must be positive when set")

    def iterations_for(self, dataset: Dataset) -> int:
        if self.total_iterations is not None:
            return int(self.total_iterations)
        shots = dataset.meta.get("shots") or min(c for c in dataset.class_counts() if c > 0)
        if self.literal_iterations:
            return max(1, math.floor(ITERATIONS_PER_SHOT * shots / dataset.num_classes))
        return ITERATIONS_PER_SHOT * shots

    def schedule(self, total: int) -> LrSchedule:
        return LrSchedule(self.lr_schedule, self.lr, max(total, 1), self.lr_floor)


class TrainHistory:
    """Per-iteration training diagnostics."""

    BASE_COLUMNS = ("t", "loss", "delta_l2", "eta_delta", "eta_w")

    def __init__(self, adapter_keys):
        self.adapter_keys = list(adapter_keys)
        self.records = []

    @property
    def norm_columns(self):
        cols = []
        for li, name in self.adapter_keys:
            cols += [f"a_norm_{li}_{name}", f"b_norm_{li}_{name}"]
        return cols

    @property
    def columns(self):
        return list(self.BASE_COLUMNS) + self.norm_columns

    def append(self, record: dict):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path=None) -> str:
        # Wall-clock is kept in memory only so the file is reproducible.
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.records:
            w.writerow([r["t"]] + [repr(float(r[c])) for c in self.columns[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _minibatches(n: int, batch_size: int, seed: int, epoch: int):
    order = keyed_rng(seed, TAG_SHUFFLE, 1 << 32, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(model: AdapterModel, dataset: Dataset, cfg: TrainConfig, *, callback=None):
    """Run the descent-ascent loop; returns ``(trained_model, history)``.

    The input model is not modified. Raises :class:`NumericalAbort` (with the
    partial history attached) on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ConfigurationError("empty training set")
    model = model.copy()
    enabled = model.enabled_adapters()
    if not enabled:
        raise ConfigurationError("model has no enabled adapters")
    total = cfg.iterations_for(dataset)
    sched = cfg.schedule(total)
    pset = PerturbationSet(cfg.norm, cfg.eps, model.input_dim)
    history = TrainHistory([key for key, _ in enabled])
    delta = np.zeros(model.input_dim)
    t = 0
    epoch = 0
    t_start = time.perf_counter()
    while t < total:
        for rows in _minibatches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            if t >= total:
                break
            batch = Batch(dataset.features[rows], dataset.labels[rows], dataset.ids[rows])
            eta_delta = 0.0
            if cfg.adversarial:
                if cfg.delta_mode == "reset_per_batch":
                    delta = np.zeros(model.input_dim)
                for j in range(cfg.tau):
                    delta, eta_delta, _ = inner_ascent_step(
                        model, batch, delta, t, cfg.inner_policy, pset,
                        train_mode=True, seed=cfg.seed, mask_step=(t, j + 1),
                    )
                bundle = backward(model, batch, delta, True, cfg.seed, (t, 0))
            else:
                bundle = backward(model, batch, None, True, cfg.seed, (t, 0))
            if not math.isfinite(bundle.loss):
                raise NumericalAbort(f"non-finite loss at iteration {t}", partial=history)
            eta_w = lr_at(sched, t)
            for key, part in enabled:
                # Both gradients come from the same pass, so the update is simultaneous.
                part.a = part.a - eta_w * bundle.grad_a[key]
                part.b = part.b - eta_w * bundle.grad_b[key]
                if cfg.clip_ca is not None:
                    part.a = clip_frobenius(part.a, cfg.clip_ca)
                if cfg.clip_cb is not None:
                    part.b = clip_frobenius(part.b, cfg.clip_cb)
            record = {
                "t": t,
                "loss": bundle.loss,
                "delta_l2": float(np.linalg.norm(delta)) if cfg.adversarial else 0.0,
                "eta_delta": eta_delta,
                "eta_w": eta_w,
                "wall_clock": time.perf_counter() - t_start,
            }
            for (li, name), part in enabled:
                record[f"a_norm_{li}_{name}"] = frobenius_norm(part.a)
                record[f"b_norm_{li}_{name}"] = frobenius_norm(part.b)
            history.append(record)
            if not all(np.all(np.isfinite(p.a)) and np.all(np.isfinite(p.b)) for _, p in enabled):
                raise NumericalAbort(f"non-finite adapter weights at iteration {t}", partial=history)
            if callback is not None:
                callback(t, model, delta)
            t += 1
        epoch += 1
    return model, history


def accuracy(model: AdapterModel, dataset: Dataset) -> float:
    return evaluate(model, dataset).clean_acc


# -- few-shot orchestration ----------------------------------------------------

@dataclass
class FewShotExperiment:
    """A grid of few-shot runs.

    ``model_factory(rank, placement, seed)`` builds a fresh model. ``taus``
    entries of ``None`` denote the non-adversarial baseline.
    """

    name: str
    train_pool: Dataset
    test_set: Dataset
    model_factory: object
    shots: list = field(default_factory=lambda: [4])
    taus: list = field(default_factory=lambda: [2])
    ranks: list = field(default_factory=lambda: [2])
    placements: list = field(default_factory=lambda: ["all"])
    seeds: list = field(default_factory=lambda: [0])
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig | None = None


@dataclass
class FewShotResult:
    experiment: str
    shots: int
    tau: int | None
    rank: int
    placement: str
    clean: float
    robust: float
    per_seed: list

    @property
    def hm(self) -> float:
        return harmonic_mean(self.clean, self.robust)

    def to_row(self) -> dict:
        return report_row(self.experiment, self.shots, self.tau, self.rank, self.placement, self.clean, self.robust, len(self.per_seed))


def run_cell(exp: FewShotExperiment, shots: int, tau, rank: int, placement, seed: int) -> Metrics:
    support = sample_few_shot(exp.train_pool, shots, seed)
    model = exp.model_factory(rank, placement, seed)
    cfg = replace(exp.train, seed=seed, adversarial=tau is not None, tau=tau if tau is not None else exp.train.tau)
    trained, _ = train(model, support, cfg)
    return evaluate(trained, exp.test_set, exp.attack, seed=seed)


def run_few_shot(exp: FewShotExperiment) -> list:
    """Train and evaluate every (shots, tau, rank, placement) cell, averaging over seeds."""
    results = []
    for shots in exp.shots:
        for tau in exp.taus:
            for rank in exp.ranks:
                for placement in exp.placements:
                    runs = [run_cell(exp, shots, tau, rank, placement, s) for s in exp.seeds]
                    clean = float(np.mean([m.clean_acc for m in runs]))
                    robust = float(np.mean([m.robust_acc for m in runs]))
                    results.append(FewShotResult(exp.name, shots, tau, rank, str(placement), clean, robust, runs))
    return results
