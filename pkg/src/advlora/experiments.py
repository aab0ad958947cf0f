"""Build library objects from a resolved run configuration.

The CLI, the demo scripts and the acceptance suite all go through these
helpers, so a configuration file fully determines a run.
"""

from __future__ import annotations

import copy

import numpy as np

from . import config as config_mod
from .attack import AscentPolicy, AttackConfig, appendix_protocol, fgsm_protocol, main_protocol
from .data import Dataset, class_means, load_csv, make_blobs, sample_few_shot
from .errors import ConfigurationError
from .evaluation import Metrics, evaluate
from .linalg import PerturbationSet
from .model import AdapterModel, AdapterPlacement, build_model, prototype_class_embeddings
from .theory import BenchConfig, make_game
from .trainer import TrainConfig, train

# Desk-scale setting in which the tau ordering of robust accuracy is visible.
# The inner ascent uses a fixed rate restarted per batch and a training budget
# larger than the evaluation budget; see the README for why.
DESK_TREND = {
    "model": {"hidden": [64], "embed_dim": 32, "w0_gain": 0.5, "rank": 2, "head": "prototype", "head_noise": 0.3},
    "data": {"source": "blobs", "K": 10, "n": 32, "per_class": 100, "spread": 0.2, "shots": 4},
    "train": {
        "lr": 0.01,
        "total_iterations": 2000,
        "eps": 0.2,
        "delta_mode": "reset_per_batch",
        "inner": {"adaptive": False, "fixed": 0.03},
    },
    "attack": {"kind": "pgd", "norm": "linf", "eps": 0.03, "alpha": 2.5 * 0.03 / 20, "steps": 20},
}


def with_seed(cfg: dict, seed: int) -> dict:
    """Point every run-level seed at ``seed``. The dataset seed stays put so
    runs with different seeds share one task."""
    cfg = copy.deepcopy(cfg)
    cfg["model"]["seed"] = seed
    cfg["train"]["seed"] = seed
    cfg["data"]["shot_seed"] = seed
    cfg["attack"]["seed"] = seed
    return cfg


def _dataset_name(dc):
    return "blobs" if dc["source"] == "blobs" else "csv"


def load_datasets(cfg: dict):
    """``(train_pool, test_set)`` for the data section."""
    dc = cfg["data"]
    if dc["source"] == "blobs":
        return make_blobs(dc["K"], dc["n"], dc["per_class"], dc["spread"], dc["seed"])
    if dc["source"] == "csv":
        if not dc["train_path"] or not dc["test_path"]:
            raise ConfigurationError("data.source 'csv' needs data.train_path and data.test_path")
        tr = load_csv(dc["train_path"], split="train")
        te = load_csv(dc["test_path"], split="test")
        k = max(tr.num_classes, te.num_classes)
        tr = Dataset(tr.features, tr.labels, k, "train", tr.name, tr.ids, tr.meta)
        te = Dataset(te.features, te.labels, k, "test", te.name, te.ids, te.meta)
        return tr, te
    raise ConfigurationError(f"unknown data.source {dc['source']!r}")


def support_set(cfg: dict, pool: Dataset) -> Dataset:
    shots = cfg["data"]["shots"]
    if shots is None or shots <= 0:
        return pool
    return sample_few_shot(pool, shots, cfg["data"]["shot_seed"])


def placement_of(cfg: dict) -> AdapterPlacement:
    pl = cfg["model"]["placement"]
    if isinstance(pl, str):
        pl = {"which_layers": pl, "which_matrices": "all"}
    wl = pl.get("which_layers", "all")
    return AdapterPlacement(wl if isinstance(wl, str) else tuple(wl), pl.get("which_matrices", "all"))


def make_model(cfg: dict, pool: Dataset) -> AdapterModel:
    mc = cfg["model"]
    kw = dict(
        seed=mc["seed"], scale=mc["scale"], dropout=mc["dropout"], gamma=mc["gamma"], sigma=mc["sigma"],
        w0_gain=mc["w0_gain"], qv=mc["qv"], placement=placement_of(cfg),
    )
    args = (pool.dim, tuple(mc["hidden"]), mc["embed_dim"], pool.num_classes, mc["rank"])
    model = build_model(*args, **kw)
    if mc["head"] == "prototype":
        emb = prototype_class_embeddings(model, class_means(pool), mc["head_noise"], mc["seed"])
        model = build_model(*args, class_embeddings=emb, **kw)
    elif mc["head"] != "random":
        raise ConfigurationError(f"unknown model.head {mc['head']!r}")
    return model


def train_config(cfg: dict) -> TrainConfig:
    tc = dict(cfg["train"])
    inner = AscentPolicy(**tc.pop("inner"))
    return TrainConfig(inner_policy=inner, **tc)


def attack_config(cfg: dict, dim: int) -> AttackConfig | None:
    protocol = cfg["eval"]["protocol"]
    if protocol == "none":
        return None
    if protocol == "main":
        return main_protocol(dim)
    if protocol == "appendix":
        return appendix_protocol(dim)
    if protocol == "fgsm":
        return fgsm_protocol(dim)
    if protocol != "config":
        raise ConfigurationError(f"unknown eval.protocol {protocol!r}")
    ac = cfg["attack"]
    pset = PerturbationSet(ac["norm"], ac["eps"], dim)
    # A zero budget makes every step a no-op; keep the config valid.
    alpha = ac["alpha"] if ac["alpha"] > 0 else 1.0
    return AttackConfig(ac["kind"], pset, alpha, ac["steps"], ac["random_start"], ac["per_sample"], seed=ac["seed"])


def run_once(cfg: dict, *, callback=None):
    """Train and evaluate one configuration. Returns ``(model, history, metrics)``."""
    pool, test = load_datasets(cfg)
    model = make_model(cfg, pool)
    trained, history = train(model, support_set(cfg, pool), train_config(cfg), callback=callback)
    metrics = evaluate(trained, test, attack_config(cfg, test.dim), seed=cfg["attack"]["seed"])
    return trained, history, metrics


def desk_trend_config(**section_overrides) -> dict:
    cfg = config_mod.resolve(DESK_TREND)
    for dotted, value in section_overrides.items():
        cfg = config_mod.apply_override(cfg, dotted.replace("__", "."), value)
    return cfg


def tau_trend(cfg: dict | None = None, taus=(None, 2, 10), seeds=(0, 1, 2)) -> dict:
    """Clean and robust accuracy per ``tau`` (``None`` = baseline), averaged over seeds.

    Returns ``{tau: {"clean": .., "robust": .., "per_seed": [Metrics, ...]}}``.
    """
    base = cfg if cfg is not None else desk_trend_config()
    out = {}
    for tau in taus:
        runs: list[Metrics] = []
        for seed in seeds:
            c = with_seed(base, seed)
            c["train"]["adversarial"] = tau is not None
            if tau is not None:
                c["train"]["tau"] = tau
            runs.append(run_once(c)[2])
        out[tau] = {
            "clean": float(np.mean([m.clean_acc for m in runs])),
            "robust": float(np.mean([m.robust_acc for m in runs])),
            "per_seed": runs,
        }
    return out


def game_from(cfg: dict):
    g = cfg["theory"]["game"]
    return make_game(**g)


def bench_config(cfg: dict) -> BenchConfig:
    b = dict(cfg["theory"]["bench"])
    b["plateau_batches"] = tuple(b["plateau_batches"])
    return BenchConfig(**b)
