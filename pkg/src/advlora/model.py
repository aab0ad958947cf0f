"""Frozen-backbone classifier with low-rank adapters and a cosine-similarity head.

The image side is a stack of dense layers ``h -> act(h W^T)`` whose frozen
weights ``w0`` carry trainable adapters ``scale * B A``. The text side is a
fixed matrix of unit-norm class embeddings. Logits are cosine similarities
divided by a temperature, and all gradients are computed analytically.
"""

from __future__ import annotations

import base64
import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, InputError
from .linalg import (
    TAG_CLASS_EMB,
    TAG_DROPOUT,
    TAG_W0,
    frobenius_norm,
    init_lora_pair,
    keyed_rng,
)

PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-300


@dataclass
class LoRALinear:
    """One frozen matrix ``w0`` (``d x k``) with its adapter pair."""

    w0: np.ndarray
    a: np.ndarray
    b: np.ndarray
    scale: float = 1.0
    dropout_p: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        d, k = self.w0.shape
        r = self.a.shape[0]
        if self.a.shape != (r, k) or self.b.shape != (d, r):
            raise ContractError(
                f"adapter shapes a{self.a.shape} b{self.b.shape} do not fit w0{self.w0.shape}"
            )
        if r > min(d, k):
            raise ContractError(f"rank {r} exceeds min(d, k) = {min(d, k)}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must lie in [0, 1)")

    @property
    def rank(self) -> int:
        return self.a.shape[0]


def effective_weight(layer: LoRALinear) -> np.ndarray:
    """``w0 + scale * (b @ a)`` when enabled, a copy of ``w0`` otherwise."""
    if layer.b.shape[1] != layer.a.shape[0]:
        raise ContractError("inner adapter dimensions disagree")
    if not layer.enabled:
        return layer.w0.copy()
    return layer.w0 + layer.scale * (layer.b @ layer.a)


@dataclass
class Layer:
    """A dense layer. ``parts`` is ``{"w": ...}`` normally, ``{"q": ..., "v": ...}``
    for the two-matrix variant whose outputs are summed."""

    parts: dict
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "identity"):
            raise ContractError(f"unknown activation {self.activation!r}")
        shapes = {p.w0.shape for p in self.parts.values()}
        if len(shapes) != 1:
            raise ContractError("parallel matrices in one layer must share a shape")

    @property
    def shape(self):
        return next(iter(self.parts.values())).w0.shape


_BANDS = ("all", "up", "bottom", "half-up", "half-bottom", "mid")
_MATRIX_SELECTORS = ("all", "q-only", "v-only", "qv")


@dataclass(frozen=True)
class AdapterPlacement:
    """Which layers (and which of q/v in two-matrix layers) carry live adapters.

    Bands for ``L`` layers: up/bottom are the top/lowest ``ceil(L/4)``,
    half-up/half-bottom the top/lowest ``ceil(L/2)``, mid the centred
    ``ceil(L/2)`` starting at ``floor((L - ceil(L/2)) / 2)``.
    """

    which_layers: object = "all"
    which_matrices: str = "all"

    def layer_indices(self, n_layers: int) -> list:
        sel = self.which_layers
        if isinstance(sel, str):
            if sel not in _BANDS:
                raise ConfigurationError(f"unknown layer band {sel!r}")
            quarter = math.ceil(n_layers / 4)
            half = math.ceil(n_layers / 2)
            if sel == "all":
                return list(range(n_layers))
            if sel == "up":
                return list(range(n_layers - quarter, n_layers))
            if sel == "bottom":
                return list(range(quarter))
            if sel == "half-up":
                return list(range(n_layers - half, n_layers))
            if sel == "half-bottom":
                return list(range(half))
            start = (n_layers - half) // 2
            return list(range(start, start + half))
        idx = sorted({int(i) for i in sel})
        bad = [i for i in idx if not 0 <= i < n_layers]
        if bad:
            raise ConfigurationError(f"layer indices {bad} out of range for {n_layers} layers")
        return idx

    def selects_part(self, name: str, n_parts: int) -> bool:
        if self.which_matrices not in _MATRIX_SELECTORS:
            raise ConfigurationError(f"unknown matrix selector {self.which_matrices!r}")
        if n_parts == 1 or self.which_matrices in ("all", "qv"):
            return True
        return name == self.which_matrices[0]

    def to_json(self):
        wl = self.which_layers if isinstance(self.which_layers, str) else list(self.which_layers)
        return {"which_layers": wl, "which_matrices": self.which_matrices}


@dataclass
class AdapterModel:
    layers: list
    class_embeddings: np.ndarray
    temperature: float = 0.01
    input_dim: int = 0
    clamp_inputs: tuple | None = None
    placement: AdapterPlacement = field(default_factory=AdapterPlacement)
    # Construction record, enough to regenerate frozen weights from the seed.
    build: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_embeddings = np.asarray(self.class_embeddings, dtype=np.float64)
        norms = np.linalg.norm(self.class_embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ContractError("class embedding rows must have unit l2 norm")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")
        if not self.input_dim:
            self.input_dim = self.layers[0].shape[1]
        if self.layers[-1].shape[0] != self.class_embeddings.shape[1]:
            raise ContractError("last layer width must match the class-embedding width")

    @property
    def num_classes(self) -> int:
        return self.class_embeddings.shape[0]

    def adapters(self):
        """Yield ``((layer_index, part_name), LoRALinear)`` for every matrix."""
        for li, layer in enumerate(self.layers):
            for name, part in layer.parts.items():
                yield (li, name), part

    def enabled_adapters(self):
        return [(key, p) for key, p in self.adapters() if p.enabled]

    def frozen_weights(self):
        return {key: p.w0 for key, p in self.adapters()}

    def copy(self) -> "AdapterModel":
        return copy.deepcopy(self)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] < 1:
            raise ConfigurationError("empty batch")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise InputError("labels and inputs disagree in length")
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.inputs.shape[0])
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class GradBundle:
    grad_a: dict
    grad_b: dict
    grad_delta: np.ndarray
    loss: float
    # Per-row input gradients of the batch-mean loss (used by per-sample attacks).
    grad_inputs: np.ndarray | None = None


@dataclass
class ForwardCache:
    x: np.ndarray
    clamp_mask: np.ndarray | None
    h_in: list
    h_out: list
    masks: list
    u: np.ndarray
    u_norm: np.ndarray
    z: np.ndarray
    probs: np.ndarray


def _step_key(step):
    if isinstance(step, (tuple, list)):
        return tuple(int(s) for s in step)
    return (int(step),)


def dropout_mask(seed: int, step, layer_index: int, part_index: int, shape, p: float) -> np.ndarray:
    """Inverted-dropout keep mask (entries 0 or ``1/(1-p)``), a pure function of its key."""
    if p <= 0.0:
        return np.ones(shape)
    rng = keyed_rng(seed, TAG_DROPOUT, *_step_key(step), layer_index, part_index)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def _perturbed_inputs(model: AdapterModel, inputs, delta):
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise InputError(f"input width {x.shape[1]} != model input_dim {model.input_dim}")
    if not np.all(np.isfinite(x)):
        raise InputError("inputs contain non-finite values")
    if delta is not None:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape[-1] != model.input_dim:
            raise InputError(f"delta width {delta.shape[-1]} != model input_dim {model.input_dim}")
        if not np.all(np.isfinite(delta)):
            raise InputError("delta contains non-finite values")
        x = x + delta
    clamp_mask = None
    if model.clamp_inputs is not None:
        lo, hi = model.clamp_inputs
        clamp_mask = (x >= lo) & (x <= hi)
        x = np.clip(x, lo, hi)
    return x, clamp_mask


def forward(model: AdapterModel, inputs, delta=None, train_mode: bool = False, seed: int = 0, step=0):
    """Class probabilities for ``inputs + delta`` and the cache needed by backward.

    ``delta`` is a single vector broadcast over the batch, or one row per
    sample. Adapter dropout is active only when ``train_mode`` is set and is
    keyed by ``(seed, step)``.
    """
    x, clamp_mask = _perturbed_inputs(model, inputs, delta)
    h = x
    h_in, h_out, masks = [], [], []
    for li, layer in enumerate(model.layers):
        h_in.append(h)
        z = None
        layer_masks = {}
        for pi, (name, part) in enumerate(layer.parts.items()):
            term = h @ part.w0.T
            if part.enabled:
                hd = h
                if train_mode and part.dropout_p > 0.0:
                    mask = dropout_mask(seed, step, li, pi, h.shape, part.dropout_p)
                    layer_masks[name] = mask
                    hd = h * mask
                term = term + part.scale * ((hd @ part.a.T) @ part.b.T)
            z = term if z is None else z + term
        h = np.tanh(z) if layer.activation == "tanh" else z
        masks.append(layer_masks)
        h_out.append(h)
    u = h
    u_norm = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), NORM_FLOOR)
    zn = u / u_norm
    logits = (zn @ model.class_embeddings.T) / model.temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    cache = ForwardCache(x, clamp_mask, h_in, h_out, masks, u, u_norm, zn, probs)
    return probs, cache


def predict(model: AdapterModel, inputs, delta=None) -> np.ndarray:
    probs, _ = forward(model, inputs, delta)
    return np.argmax(probs, axis=1)


def loss_ce(probs, labels) -> float:
    """Batch-mean cross-entropy with probabilities floored at 1e-12."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def _check_labels(model, labels):
    if np.any(labels < 0) or np.any(labels >= model.num_classes):
        raise InputError(f"labels must lie in [0, {model.num_classes})")


def _head_backward(model, cache, labels):
    """Gradient of the mean loss with respect to the last layer's output."""
    m = len(labels)
    rows = np.arange(m)
    dlogits = cache.probs.copy()
    dlogits[rows, labels] -= 1.0
    floored = cache.probs[rows, labels] < PROB_FLOOR
    dlogits[floored] = 0.0
    dlogits /= m
    dz = dlogits @ model.class_embeddings / model.temperature
    zn = cache.z
    return (dz - zn * np.sum(zn * dz, axis=1, keepdims=True)) / cache.u_norm


def backward(model: AdapterModel, batch: Batch, delta=None, train_mode: bool = False, seed: int = 0, step=0) -> GradBundle:
    """Analytic gradients of the batch-mean loss for every enabled adapter and for ``delta``."""
    _check_labels(model, batch.labels)
    probs, cache = forward(model, batch.inputs, delta, train_mode, seed, step)
    loss = loss_ce(probs, batch.labels)
    g = _head_backward(model, cache, batch.labels)
    grad_a, grad_b = {}, {}
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        if layer.activation == "tanh":
            g = g * (1.0 - cache.h_out[li] ** 2)
        h = cache.h_in[li]
        g_in = None
        for name, part in layer.parts.items():
            term = g @ part.w0
            if part.enabled:
                mask = cache.masks[li].get(name)
                hd = h if mask is None else h * mask
                gb = g @ part.b
                grad_b[(li, name)] = part.scale * (g.T @ (hd @ part.a.T))
                grad_a[(li, name)] = part.scale * (gb.T @ hd)
                back = part.scale * (gb @ part.a)
                term = term + (back if mask is None else back * mask)
            g_in = term if g_in is None else g_in + term
        g = g_in
    if cache.clamp_mask is not None:
        g = g * cache.clamp_mask
    return GradBundle(grad_a, grad_b, g.sum(axis=0), loss, grad_inputs=g)


def dense_weight_grads(model: AdapterModel, batch: Batch, delta=None) -> dict:
    """Gradient of the loss with respect to each matrix's full effective weight.

    Runs its own forward pass through the dense effective weights (no
    adapter split, no dropout).
    """
    _check_labels(model, batch.labels)
    x, clamp_mask = _perturbed_inputs(model, batch.inputs, delta)
    weights = [{name: effective_weight(p) for name, p in layer.parts.items()} for layer in model.layers]
    hs, outs = [], []
    h = x
    for layer, ws in zip(model.layers, weights):
        hs.append(h)
        z = sum(h @ w.T for w in ws.values())
        h = np.tanh(z) if layer.activation == "tanh" else z
        outs.append(h)
    u_norm = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), NORM_FLOOR)
    zn = h / u_norm
    logits = zn @ model.class_embeddings.T / model.temperature
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cache = ForwardCache(x, clamp_mask, hs, outs, [], h, u_norm, zn, probs)
    g = _head_backward(model, cache, batch.labels)
    grads = {}
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        if layer.activation == "tanh":
            g = g * (1.0 - outs[li] ** 2)
        for name, w in weights[li].items():
            grads[(li, name)] = g.T @ hs[li]
        g = sum(g @ w for w in weights[li].values())
    return grads


def chain_rule_residual(model: AdapterModel, batch: Batch, delta=None) -> float:
    """Max over enabled matrices of ``|gA - s B^T G|_F + |gB - s G A^T|_F``, with
    ``G`` the dense weight gradient. Zero up to rounding."""
    bundle = backward(model, batch, delta, train_mode=False)
    dense = dense_weight_grads(model, batch, delta)
    worst = 0.0
    for key, part in model.enabled_adapters():
        gw = dense[key]
        ra = frobenius_norm(bundle.grad_a[key] - part.scale * (part.b.T @ gw))
        rb = frobenius_norm(bundle.grad_b[key] - part.scale * (gw @ part.a.T))
        worst = max(worst, ra + rb)
    return worst


def apply_placement(model: AdapterModel, placement: AdapterPlacement) -> AdapterModel:
    """Copy of ``model`` with adapters enabled exactly where ``placement`` selects."""
    chosen = set(placement.layer_indices(len(model.layers)))
    out = model.copy()
    n_enabled = 0
    for li, layer in enumerate(out.layers):
        for name, part in layer.parts.items():
            part.enabled = li in chosen and placement.selects_part(name, len(layer.parts))
            n_enabled += part.enabled
    if n_enabled == 0:
        raise ConfigurationError(f"placement {placement.to_json()} selects no adapters")
    out.placement = placement
    return out


def _frozen_weight(seed, li, pi, d, k, gain):
    return keyed_rng(seed, TAG_W0, li, pi).normal(0.0, gain / math.sqrt(k), size=(d, k))


def random_class_embeddings(num_classes: int, dim: int, seed: int) -> np.ndarray:
    e = keyed_rng(seed, TAG_CLASS_EMB).normal(size=(num_classes, dim))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def prototype_class_embeddings(model: AdapterModel, prototypes, noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """Unit class rows taken from the frozen backbone's embedding of ``prototypes``.

    Stands in for a zero-shot text head: each class row points where the
    backbone maps that class's prototype input, optionally jittered by
    ``noise * N(0, 1/n)`` so the head starts imperfect.
    """
    protos = np.asarray(prototypes, dtype=np.float64)
    if noise > 0:
        protos = protos + noise * keyed_rng(seed, TAG_CLASS_EMB, 1).normal(size=protos.shape) / math.sqrt(protos.shape[1])
    frozen = copy.deepcopy(model)
    for _, part in frozen.adapters():
        part.enabled = False
    _, cache = forward(frozen, protos)
    return cache.z


def build_model(
    input_dim: int,
    hidden: tuple = (32,),
    embed_dim: int = 16,
    num_classes: int = 10,
    rank: int = 2,
    *,
    seed: int = 0,
    scale: float = 1.0,
    dropout: float = 0.25,
    gamma: float = 0.01,
    sigma: float = 0.02,
    w0_gain: float = 1.0,
    qv: bool = False,
    class_embeddings=None,
    placement: AdapterPlacement | None = None,
    clamp_inputs=None,
) -> AdapterModel:
    """Seeded model with frozen Gaussian ``w0`` (std ``w0_gain/sqrt(k)``),
    ``A ~ N(0, sigma^2)``, ``B = 0`` and tanh between layers."""
    dims = [input_dim, *hidden, embed_dim]
    names = ("q", "v") if qv else ("w",)
    layers = []
    for li, (k, d) in enumerate(zip(dims[:-1], dims[1:])):
        parts = {}
        for pi, name in enumerate(names):
            a, b = init_lora_pair(d, k, rank, sigma, seed, stream=li * 8 + pi)
            w0 = _frozen_weight(seed, li, pi, d, k, w0_gain)
            parts[name] = LoRALinear(w0, a, b, scale=scale, dropout_p=dropout)
        act = "identity" if li == len(dims) - 2 else "tanh"
        layers.append(Layer(parts, act))
    if class_embeddings is None:
        class_embeddings = random_class_embeddings(num_classes, embed_dim, seed)
    build = {
        "dims": dims,
        "rank": rank,
        "seed": seed,
        "scale": scale,
        "dropout": dropout,
        "sigma": sigma,
        "w0_gain": w0_gain,
        "qv": qv,
    }
    model = AdapterModel(
        layers,
        class_embeddings,
        gamma,
        input_dim,
        tuple(clamp_inputs) if clamp_inputs is not None else None,
        AdapterPlacement(),
        build,
    )
    if placement is not None:
        model = apply_placement(model, placement)
    return model


# -- checkpoints -------------------------------------------------------------

def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "f64le": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj) -> np.ndarray:
    raw = base64.b64decode(obj["f64le"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def model_to_dict(model: AdapterModel, include_w0: bool = True) -> dict:
    layers = []
    for layer in model.layers:
        parts = {}
        for name, p in layer.parts.items():
            entry = {
                "a": encode_array(p.a),
                "b": encode_array(p.b),
                "scale": p.scale,
                "dropout_p": p.dropout_p,
                "enabled": p.enabled,
            }
            if include_w0:
                entry["w0"] = encode_array(p.w0)
            parts[name] = entry
        layers.append({"activation": layer.activation, "parts": parts})
    return {
        "format": "advlora-checkpoint/1",
        "input_dim": model.input_dim,
        "build": model.build,
        "temperature": model.temperature,
        "clamp_inputs": list(model.clamp_inputs) if model.clamp_inputs is not None else None,
        "placement": model.placement.to_json(),
        "class_embeddings": encode_array(model.class_embeddings),
        "layers": layers,
    }


def model_from_dict(obj: dict) -> AdapterModel:
    build = obj.get("build", {})
    layers = []
    for li, entry in enumerate(obj["layers"]):
        parts = {}
        for pi, (name, p) in enumerate(entry["parts"].items()):
            a = decode_array(p["a"])
            b = decode_array(p["b"])
            if "w0" in p:
                w0 = decode_array(p["w0"])
            else:
                if "seed" not in build:
                    raise ConfigurationError("checkpoint omits w0 and has no build seed")
                d, k = b.shape[0], a.shape[1]
                w0 = _frozen_weight(build["seed"], li, pi, d, k, build.get("w0_gain", 1.0))
            parts[name] = LoRALinear(w0, a, b, p["scale"], p["dropout_p"], p["enabled"])
        layers.append(Layer(parts, entry["activation"]))
    pl = obj.get("placement", {})
    wl = pl.get("which_layers", "all")
    placement = AdapterPlacement(wl if isinstance(wl, str) else tuple(wl), pl.get("which_matrices", "all"))
    clamp = obj.get("clamp_inputs")
    return AdapterModel(
        layers,
        decode_array(obj["class_embeddings"]),
        obj["temperature"],
        obj["input_dim"],
        tuple(clamp) if clamp is not None else None,
        placement,
        build,
    )


def save_checkpoint(model: AdapterModel, path, include_w0: bool = True) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, include_w0), indent=1) + "\n")


def load_checkpoint(path) -> AdapterModel:
    return model_from_dict(json.loads(Path(path).read_text()))
