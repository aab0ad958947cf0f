"""A synthetic nonconvex-strongly-concave game with exact inner maximizer.

    f(W, d) = g(W) + <d, C vec(W)> - (mu/2) |d|^2,   d in a ball,
    g(W)    = <G0, W> + (lam/2) |W|_F^2 + amp * sum_ij cos(W_ij).

``g`` is nonconvex once ``amp > lam`` and has curvature bounded by
``lam + amp``. Because the inner problem is an isotropic concave quadratic,
``delta_star(W)`` is the projection of ``C vec(W) / mu`` and the primal
function ``Phi(W) = f(W, delta_star(W))`` and its gradient are exact. The
descent-ascent loop can therefore be checked against its smoothness,
Lipschitz and contraction guarantees to rounding error.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericalAbort
from .linalg import TAG_NOISE, PerturbationSet, clip_frobenius, frobenius_norm, init_lora_pair, keyed_rng, project

DIVERGENCE_NORM = 1e8
# Squared distances below this are rounding noise; contraction ratios skip them.
GAMMA_FLOOR = 1e-24


@dataclass
class QuadraticGame:
    w0: np.ndarray
    coupling: np.ndarray
    g0: np.ndarray
    mu: float
    lam: float
    nonconvex_amp: float
    set: PerturbationSet

    def __post_init__(self):
        d, k = self.w0.shape
        if self.coupling.shape != (self.set.dimension, d * k):
            raise ValueError("coupling must be n x (d*k)")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        self.coupling_norm = float(np.linalg.norm(self.coupling, 2)) if self.coupling.size else 0.0

    @property
    def shape(self):
        return self.w0.shape

    @property
    def n(self) -> int:
        return self.set.dimension

    @property
    def g_smoothness(self) -> float:
        return abs(self.lam) + abs(self.nonconvex_amp)

    @property
    def ell(self) -> float:
        """Gradient-Lipschitz constant of ``f`` in ``(W, delta)``."""
        return self.mu + self.coupling_norm + self.g_smoothness

    @property
    def kappa(self) -> float:
        return self.ell / self.mu

    # -- the objective ---------------------------------------------------------

    def g(self, W) -> float:
        return float(np.sum(self.g0 * W) + 0.5 * self.lam * np.sum(W * W) + self.nonconvex_amp * np.sum(np.cos(W)))

    def grad_g(self, W) -> np.ndarray:
        return self.g0 + self.lam * W - self.nonconvex_amp * np.sin(W)

    def coupled(self, W) -> np.ndarray:
        return self.coupling @ W.reshape(-1)

    def f(self, W, delta) -> float:
        delta = np.asarray(delta, dtype=np.float64)
        return self.g(W) + float(delta @ self.coupled(W)) - 0.5 * self.mu * float(delta @ delta)

    def grad_w(self, W, delta) -> np.ndarray:
        return self.grad_g(W) + (self.coupling.T @ np.asarray(delta)).reshape(self.shape)

    def grad_delta(self, W, delta) -> np.ndarray:
        return self.coupled(W) - self.mu * np.asarray(delta)


def make_game(
    d: int = 4,
    k: int = 4,
    n: int = 3,
    *,
    mu: float = 1.0,
    lam: float = 0.5,
    nonconvex_amp: float = 1.0,
    coupling_scale: float = 1.0,
    radius: float = 1.0,
    norm: str = "l2",
    seed: int = 0,
) -> QuadraticGame:
    rng = keyed_rng(seed, 0x7E0)
    w0 = rng.normal(size=(d, k))
    coupling = coupling_scale * rng.normal(size=(n, d * k)) / math.sqrt(d * k)
    g0 = rng.normal(size=(d, k))
    return QuadraticGame(w0, coupling, g0, mu, lam, nonconvex_amp, PerturbationSet(norm, radius, n))


def delta_star(game: QuadraticGame, W) -> np.ndarray:
    """Exact maximizer of ``f(W, .)`` over the perturbation set."""
    return project(game.set, game.coupled(W) / game.mu)


def delta_star_jacobian(game: QuadraticGame, W) -> np.ndarray:
    """``d delta_star / d vec(W)`` (``n x dk``), valid where the projection is differentiable."""
    v = game.coupled(W) / game.mu
    base = game.coupling / game.mu
    if game.set.norm_kind == "linf":
        inside = (np.abs(v) < game.set.radius).astype(float)
        return inside[:, None] * base
    nv = np.linalg.norm(v)
    if nv <= game.set.radius:
        return base
    u = v / nv
    return (game.set.radius / nv) * (base - np.outer(u, u @ base))


def phi_and_grad(game: QuadraticGame, W):
    """``Phi(W) = max_delta f(W, delta)`` and its gradient ``grad_W f(W, delta_star(W))``."""
    ds = delta_star(game, W)
    return game.f(W, ds), game.grad_w(W, ds)


def lowrank_chain_residual(game: QuadraticGame, A, B) -> float:
    """Residual of ``grad_A Phi = B^T grad Phi`` and ``grad_B Phi = grad Phi A^T``.

    The left-hand sides are built with the full chain rule, including the
    term through ``delta_star``'s Jacobian; that term must vanish.
    """
    W = game.w0 + B @ A
    ds = delta_star(game, W)
    gw = game.grad_w(W, ds)
    through_delta = (delta_star_jacobian(game, W).T @ game.grad_delta(W, ds)).reshape(game.shape)
    full = gw + through_delta
    ra = frobenius_norm(B.T @ full - B.T @ gw)
    rb = frobenius_norm(full @ A.T - gw @ A.T)
    return ra + rb


# -- descent-ascent on the game ------------------------------------------------

@dataclass
class SgdaConfig:
    tau: int = 1
    eta_w: float = 0.05
    # None means 1 / ell.
    eta_delta: float | None = None
    iterations: int = 1000
    noise_std: float = 0.0
    batch_size: int = 1
    rank: int = 2
    sigma: float = 0.5
    seed: int = 0
    clip_ca: float | None = None
    clip_cb: float | None = None


@dataclass
class StationarityTrace:
    t: np.ndarray
    grad_phi_sq: np.ndarray
    grad_ab_sq: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    a_norm: np.ndarray
    b_norm: np.ndarray
    # Per iteration: max over inner steps of |d_j - d*|^2 / |d_{j-1} - d*|^2,
    # ignoring steps that start within rounding distance of d* (0 if all do).
    contraction_ratio: np.ndarray
    aborted: bool = False

    COLUMNS = ("t", "grad_phi_sq", "gamma", "phi", "a_norm", "b_norm", "grad_ab_sq", "contraction_ratio")

    def min_so_far(self, which: str = "grad_ab_sq") -> np.ndarray:
        return np.minimum.accumulate(getattr(self, which))

    def first_stationary(self, eps: float, which: str = "grad_phi_sq"):
        """First ``t`` with gradient norm at most ``eps``, or None."""
        hits = np.flatnonzero(np.sqrt(getattr(self, which)) <= eps)
        return int(self.t[hits[0]]) if hits.size else None

    def to_csv(self, path=None) -> str:
        lines = [",".join(self.COLUMNS)]
        for i in range(len(self.t)):
            vals = [str(int(self.t[i]))] + [repr(float(getattr(self, c)[i])) for c in self.COLUMNS[1:]]
            lines.append(",".join(vals))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _grad_ab_sq(gphi, A, B) -> float:
    return float(np.sum((B.T @ gphi) ** 2) + np.sum((gphi @ A.T) ** 2))


def run_sgda(game: QuadraticGame, cfg: SgdaConfig) -> StationarityTrace:
    """Descent-ascent on ``W = w0 + B A`` with optional Gaussian gradient noise.

    Noise of std ``noise_std`` is averaged over ``batch_size`` draws. The
    trace records exact stationarity quantities at every iterate, starting
    from ``t = 0``. Divergence raises :class:`NumericalAbort` carrying the
    partial trace.
    """
    d, k = game.shape
    a, b = init_lora_pair(d, k, cfg.rank, cfg.sigma, cfg.seed)
    eta_delta = 1.0 / game.ell if cfg.eta_delta is None else cfg.eta_delta
    rng = keyed_rng(cfg.seed, TAG_NOISE)
    M = cfg.batch_size
    delta = np.zeros(game.n)
    cols = {c: [] for c in StationarityTrace.COLUMNS}

    def record(t, W, ratio):
        phi, gphi = phi_and_grad(game, W)
        cols["t"].append(t)
        cols["grad_phi_sq"].append(float(np.sum(gphi * gphi)))
        cols["grad_ab_sq"].append(_grad_ab_sq(gphi, a, b))
        cols["gamma"].append(float(np.sum((delta_star(game, W) - delta) ** 2)))
        cols["phi"].append(phi)
        cols["a_norm"].append(frobenius_norm(a))
        cols["b_norm"].append(frobenius_norm(b))
        cols["contraction_ratio"].append(ratio)

    def noise(shape):
        if cfg.noise_std == 0.0:
            return 0.0
        return cfg.noise_std * rng.normal(size=(M, *shape)).mean(axis=0)

    def build(aborted=False):
        arrays = {c: np.array(v) for c, v in cols.items()}
        return StationarityTrace(arrays["t"].astype(int), arrays["grad_phi_sq"], arrays["grad_ab_sq"], arrays["gamma"], arrays["phi"], arrays["a_norm"], arrays["b_norm"], arrays["contraction_ratio"], aborted)

    W = game.w0 + b @ a
    record(0, W, 0.0)
    for t in range(1, cfg.iterations + 1):
        target = delta_star(game, W)
        ratio = 0.0
        for _ in range(cfg.tau):
            before = float(np.sum((delta - target) ** 2))
            delta = project(game.set, delta + eta_delta * (game.grad_delta(W, delta) + noise((game.n,))))
            after = float(np.sum((delta - target) ** 2))
            if before > GAMMA_FLOOR:
                ratio = max(ratio, after / before)
        gw = game.grad_w(W, delta) + noise(game.shape)
        a, b = a - cfg.eta_w * (b.T @ gw), b - cfg.eta_w * (gw @ a.T)
        if cfg.clip_ca is not None:
            a = clip_frobenius(a, cfg.clip_ca)
        if cfg.clip_cb is not None:
            b = clip_frobenius(b, cfg.clip_cb)
        W = game.w0 + b @ a
        if not np.all(np.isfinite(W)) or frobenius_norm(W) > DIVERGENCE_NORM:
            raise NumericalAbort(f"descent-ascent diverged at iteration {t}", partial=build(aborted=True))
        record(t, W, ratio)
    return build()


# -- empirical checks ------------------------------------------------------------

def _random_w(game, rng, scale):
    return game.w0 + scale * rng.normal(size=game.shape)


def _pair(game, rng, scale):
    W = _random_w(game, rng, scale)
    # Mix far and near pairs so both global and local slopes are probed.
    step = 10.0 ** rng.uniform(-4, 0.5)
    return W, W + step * rng.normal(size=game.shape)


def smoothness_probe(game: QuadraticGame, samples: int = 1000, *, c_b: float | None = None, seed: int = 0, scale: float = 2.0) -> dict:
    """Largest observed ``|grad Phi(W) - grad Phi(W')| / |W - W'|``.

    With ``c_b`` set, also probes ``A -> grad_A Phi(w0 + B A)`` at a fixed
    ``B`` with ``|B|_F = c_b`` and reports it against ``2 kappa ell c_b^2``.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples")
    rng = keyed_rng(seed, 0x5A00)
    worst = 0.0
    for _ in range(samples):
        W1, W2 = _pair(game, rng, scale)
        g1 = phi_and_grad(game, W1)[1]
        g2 = phi_and_grad(game, W2)[1]
        worst = max(worst, frobenius_norm(g1 - g2) / frobenius_norm(W1 - W2))
    bound = 2.0 * game.kappa * game.ell
    out = {"est_ell_phi": worst, "bound": bound, "passed": worst <= bound * (1 + 1e-6)}
    if c_b is not None:
        d, k = game.shape
        r = min(2, d, k)
        B = rng.normal(size=(d, r))
        B *= c_b / frobenius_norm(B)
        worst_a = 0.0
        for _ in range(samples):
            A1 = scale * rng.normal(size=(r, k))
            A2 = A1 + 10.0 ** rng.uniform(-4, 0.5) * rng.normal(size=(r, k))
            g1 = B.T @ phi_and_grad(game, game.w0 + B @ A1)[1]
            g2 = B.T @ phi_and_grad(game, game.w0 + B @ A2)[1]
            worst_a = max(worst_a, frobenius_norm(g1 - g2) / frobenius_norm(A1 - A2))
        bound_a = bound * c_b ** 2
        out.update({"est_ell_phi_a": worst_a, "bound_a": bound_a, "passed_a": worst_a <= bound_a * (1 + 1e-6)})
    return out


def danskin_check(game: QuadraticGame, samples: int = 50, *, seed: int = 0, h: float = 1e-6, scale: float = 2.0) -> float:
    """Worst relative error between ``grad Phi`` and central differences of ``Phi``."""
    rng = keyed_rng(seed, 0xDA0)
    worst = 0.0
    for _ in range(samples):
        W = _random_w(game, rng, scale)
        _, grad = phi_and_grad(game, W)
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            Wp = W.copy()
            Wm = W.copy()
            Wp[idx] += h
            Wm[idx] -= h
            fd[idx] = (phi_and_grad(game, Wp)[0] - phi_and_grad(game, Wm)[0]) / (2 * h)
        worst = max(worst, frobenius_norm(fd - grad) / max(frobenius_norm(grad), 1e-12))
    return worst


def delta_star_lipschitz(game: QuadraticGame, pairs: int = 1000, *, seed: int = 0, scale: float = 2.0) -> float:
    """Largest observed ``|delta*(W) - delta*(W')| / |W - W'|``."""
    rng = keyed_rng(seed, 0x11B)
    worst = 0.0
    for _ in range(pairs):
        W1, W2 = _pair(game, rng, scale)
        worst = max(worst, np.linalg.norm(delta_star(game, W1) - delta_star(game, W2)) / frobenius_norm(W1 - W2))
    return float(worst)


def sample_feasible(pset: PerturbationSet, rng, count: int) -> np.ndarray:
    if pset.norm_kind == "linf":
        return rng.uniform(-pset.radius, pset.radius, size=(count, pset.dimension))
    v = rng.normal(size=(count, pset.dimension))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return project(pset, v * pset.radius * rng.random((count, 1)) ** (1.0 / pset.dimension))


def delta_star_optimality(game: QuadraticGame, n_w: int = 20, n_delta: int = 1000, *, seed: int = 0, scale: float = 2.0) -> float:
    """Largest ``f(W, delta) - f(W, delta*)`` over sampled feasible ``delta`` (<= 0 when optimal)."""
    rng = keyed_rng(seed, 0x0B7)
    worst = -math.inf
    for _ in range(n_w):
        W = _random_w(game, rng, scale)
        best = game.f(W, delta_star(game, W))
        for delta in sample_feasible(game.set, rng, n_delta):
            worst = max(worst, game.f(W, delta) - best)
    return worst


def loglog_slope(t, values, t_min: float = 1e2, t_max: float = 1e4, points: int = 60) -> float:
    """Least-squares slope of ``log(values)`` against ``log(t)`` at log-spaced ``t`` in the window."""
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    grid = np.unique(np.round(np.geomspace(t_min, t_max, points)))
    idx = np.searchsorted(t, grid)
    idx = idx[idx < len(t)]
    x = np.log(t[idx])
    y = np.log(np.maximum(values[idx], 1e-300))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class BenchConfig:
    lipschitz_pairs: int = 1000
    danskin_samples: int = 50
    smoothness_pairs: int = 1000
    c_b: float = 1.5
    contraction_iterations: int = 1000
    # eta_delta = contraction_eta_scale / ell in the contraction run.
    contraction_eta_scale: float = 1.0
    rate_iterations: int = 10000
    rate_eta_w: float = 0.002
    rate_slope_max: float = -0.8
    rate_metric: str = "grad_ab_sq"
    # The plateau runs use a larger step so they reach the noise floor quickly.
    plateau_eta_w: float = 0.02
    plateau_noise: float = 0.5
    plateau_iterations: int = 3000
    plateau_seeds: int = 5
    plateau_batches: tuple = (16, 64)
    stationarity_eps: float = 1e-3
    seed: int = 0

    def to_json(self):
        out = asdict(self)
        out["plateau_batches"] = list(self.plateau_batches)
        return out


def _check(name, value, threshold, passed, **extra):
    return {"name": name, "value": value, "threshold": threshold, "passed": bool(passed), **extra}


def run_bench(game: QuadraticGame, cfg: BenchConfig = BenchConfig(), traces: dict | None = None) -> dict:
    """Run every numerical check on ``game``; returns a JSON-ready summary.

    ``traces`` (if given) receives the noiseless rate-run trace under
    ``"rate"`` for CSV export.
    """
    kappa, ell = game.kappa, game.ell
    checks = []
    err = danskin_check(game, cfg.danskin_samples, seed=cfg.seed)
    checks.append(_check("danskin_gradient", err, 1e-5, err <= 1e-5))
    gap = delta_star_optimality(game, seed=cfg.seed)
    checks.append(_check("delta_star_optimality", gap, 1e-9, gap <= 1e-9))
    lip = delta_star_lipschitz(game, cfg.lipschitz_pairs, seed=cfg.seed)
    checks.append(_check("delta_star_lipschitz", lip, kappa * (1 + 1e-6), lip <= kappa * (1 + 1e-6)))
    sm = smoothness_probe(game, cfg.smoothness_pairs, c_b=cfg.c_b, seed=cfg.seed)
    checks.append(_check("phi_smoothness", sm["est_ell_phi"], sm["bound"], sm["passed"]))
    checks.append(_check("phi_smoothness_in_a", sm["est_ell_phi_a"], sm["bound_a"], sm["passed_a"]))

    d, k = game.shape
    rng = keyed_rng(cfg.seed, 0xC4A)
    chain = max(lowrank_chain_residual(game, rng.normal(size=(2, k)), rng.normal(size=(d, 2))) for _ in range(100))
    checks.append(_check("lowrank_chain_rule", chain, 1e-10, chain <= 1e-10))

    eta_delta = cfg.contraction_eta_scale / ell
    try:
        contr = run_sgda(game, SgdaConfig(tau=1, eta_delta=eta_delta, iterations=cfg.contraction_iterations, eta_w=cfg.rate_eta_w, seed=cfg.seed))
        worst = float(np.max(contr.contraction_ratio[1:]))
    except NumericalAbort as exc:
        worst = float(np.max(exc.partial.contraction_ratio[1:])) if len(exc.partial.t) > 1 else math.inf
    bound = 1.0 - 1.0 / kappa + 1e-9
    checks.append(_check("inner_contraction", worst, bound, worst <= bound, eta_delta=eta_delta))

    rate = run_sgda(game, SgdaConfig(tau=1, eta_w=cfg.rate_eta_w, iterations=cfg.rate_iterations, seed=cfg.seed))
    if traces is not None:
        traces["rate"] = rate
    slope = loglog_slope(rate.t, rate.min_so_far(cfg.rate_metric))
    checks.append(_check("stationarity_rate", slope, cfg.rate_slope_max, slope <= cfg.rate_slope_max, metric=cfg.rate_metric))

    plateaus = {}
    for M in cfg.plateau_batches:
        vals = []
        for s in range(cfg.plateau_seeds):
            tr = run_sgda(game, SgdaConfig(tau=1, eta_w=cfg.plateau_eta_w, iterations=cfg.plateau_iterations, noise_std=cfg.plateau_noise, batch_size=M, seed=cfg.seed + s))
            tail = getattr(tr, cfg.rate_metric)[len(tr.t) // 2 :]
            vals.append(float(np.mean(tail)))
        plateaus[M] = float(np.mean(vals))
    small, large = min(cfg.plateau_batches), max(cfg.plateau_batches)
    checks.append(_check("minibatch_plateau", plateaus[large], plateaus[small], plateaus[large] < plateaus[small], plateaus={str(m): v for m, v in plateaus.items()}))

    return {
        "game": {"shape": list(game.shape), "n": game.n, "mu": game.mu, "ell": ell, "kappa": kappa, "set": game.set.norm_kind, "radius": game.set.radius},
        "checks": checks,
        "first_eps_stationary": rate.first_stationary(cfg.stationarity_eps),
        "stationarity_eps": cfg.stationarity_eps,
        "passed": all(c["passed"] for c in checks),
    }
