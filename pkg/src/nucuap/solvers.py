"""Universal attack solvers: AO-Exp, LoRa-PGD and FW-Nucl.

Every solver talks to the model only through a gradient oracle: a callable
``oracle(delta) -> LossBundle`` (with ``grad``) plus ``oracle.loss(delta)``
for gradient-free evaluations. :class:`nucuap.losses.FrameGradientOracle`
wraps a detector and a clean sequence; :class:`LinearOracle` is the
closed-form test problem.

All three solvers ascend the attack loss and return one perturbation of
shape ``(H, W, C)`` that is added to every frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nucuap import spectral
from nucuap.errors import ConfigError, NumericalError
from nucuap.losses import FrameGradientOracle, LossBundle, RegularizerConfig, regularizer_value
from nucuap.scene import FrameSequence

METHODS = ("ao-exp", "ao-exp-lora", "lora-pgd", "fw-nucl")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    l_fg: float
    l_bg: float
    l_conf: float
    l_total: float
    nuclear_norm: float
    frobenius_norm: float
    objective: float

    FIELDS = (
        "iteration", "l_fg", "l_bg", "l_conf", "l_total",
        "nuclear_norm", "frobenius_norm", "objective",
    )


@dataclass
class AttackResult:
    method: str
    delta: np.ndarray
    trace: list[TraceRow] = field(default_factory=list)


@dataclass(frozen=True)
class AoExpConfig:
    lambda1: float = 0.1
    lambda2: float = 0.01
    iterations: int = 100
    top_k: int | None = None  # None: keep every singular value
    eta0: float = 1.0
    # "weighted" scales both lambdas by the iteration weight t + 1, matching
    # the (2t+1, -t) weighting of the optimistic gradient; "printed" leaves
    # them unscaled, which diverges on a linear loss.
    reg_weighting: str = "weighted"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.lambda1 < 0 or self.lambda2 <= 0:
            raise ConfigError("AO-Exp needs lambda1 >= 0 and lambda2 > 0")
        if self.eta0 <= 0:
            raise ConfigError("eta0 must be positive")
        if self.reg_weighting not in ("weighted", "printed"):
            raise ConfigError("reg_weighting must be 'weighted' or 'printed'")

    @property
    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(self.lambda1, self.lambda2)


@dataclass(frozen=True)
class LoRaPgdConfig:
    rank_frac: float = 0.1
    nuclear_budget: float = 60.0
    step: float = 0.05
    iterations: int = 100
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rank_frac <= 1.0:
            raise ConfigError("rank_frac must lie in (0, 1]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.nuclear_budget <= 0 or self.step <= 0:
            raise ConfigError("nuclear_budget and step must be positive")

    def rank(self, height: int, width: int) -> int:
        r = int(math.floor(self.rank_frac * min(height, width) + 1e-9))
        if r < 1:
            raise ConfigError(
                f"rank fraction {self.rank_frac} leaves no rank on {height}x{width} frames"
            )
        return r


@dataclass(frozen=True)
class FwNuclConfig:
    """Frank-Wolfe settings.

    ``groups="patch"`` constrains the sum of nuclear norms over all
    non-overlapping ``patch_size`` windows of every channel (a nuclear group
    norm) to ``epsilon``; ``groups="channel"`` gives each channel its own
    nuclear ball of radius ``epsilon``.
    """

    epsilon: float = 40.0
    iterations: int = 30
    line_search: int = 5
    groups: str = "patch"
    patch_size: int = 16

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.iterations < 1 or self.line_search < 1:
            raise ConfigError("iterations and line_search must be >= 1")
        if self.groups not in ("patch", "channel"):
            raise ConfigError("groups must be 'patch' or 'channel'")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")


class LinearOracle:
    """``L(delta) = <G, delta>``; the gradient is the constant ``G``."""

    def __init__(self, g):
        g = np.asarray(g, dtype=np.float64)
        self.g = g if g.ndim == 3 else g[:, :, None]
        self.shape = self.g.shape

    def loss(self, delta) -> LossBundle:
        d = np.asarray(delta, dtype=np.float64).reshape(self.shape)
        val = float(np.sum(self.g * d))
        return LossBundle(0.0, 0.0, 0.0, val, None)

    def __call__(self, delta) -> LossBundle:
        b = self.loss(delta)
        return LossBundle(b.l_fg, b.l_bg, b.l_conf, b.l_total, self.g.copy())


def composite_minimizer(g, lambda1: float, lambda2: float) -> np.ndarray:
    """Closed-form minimizer of ``-<G, d> + l1 ||d||_* + l2/2 ||d||_F^2`` (one channel)."""
    return spectral.svt_prox(np.asarray(g, dtype=np.float64), lambda1) / lambda2


def _norms(delta):
    nuc = sum(spectral.nuclear_norm(delta[:, :, c]) for c in range(delta.shape[2]))
    return nuc, float(np.linalg.norm(delta))


def _trace_row(t, bundle, delta, objective) -> TraceRow:
    nuc, fro = _norms(delta)
    return TraceRow(t, bundle.l_fg, bundle.l_bg, bundle.l_conf, bundle.l_total, nuc, fro,
                    objective)


def _finite(name, arr, t, c):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {name} at iteration {t}, channel {c}")


def singular_value_update(theta, eta: float, lambda1: float, lambda2: float) -> np.ndarray:
    """Exponentiated singular-value step via the Lambert W function.

    Solves ``eta * log(z + 1) + lambda1 + lambda2 * z = theta`` for z >= 0
    (z = 0 whenever theta <= lambda1), i.e.
    ``z = eta/lambda2 * W0(lambda2/eta * exp((lambda2 + max(theta - lambda1, 0))/eta)) - 1``.
    The Lambert argument is formed in log space so large thetas cannot overflow.
    """
    theta = np.asarray(theta, dtype=np.float64)
    ratio = eta / lambda2
    y = -math.log(ratio) + (lambda2 + np.maximum(theta - lambda1, 0.0)) / eta
    w = spectral.lambert_w0_exp(y)
    z = ratio * np.asarray(w) - 1.0
    tol = 1e-12 * np.maximum(1.0, ratio * np.asarray(w))
    if np.any(z < -tol):
        raise NumericalError(f"negative singular value {z.min()} from the Lambert step")
    return np.maximum(z, 0.0)


def ao_exp(oracle, shape, cfg: AoExpConfig, callback=None) -> AttackResult:
    """Adaptive optimistic exponentiated updates on per-channel singular values.

    Each channel keeps SVD bases ``U, V``, singular values ``z`` and an
    adaptive step accumulator ``eta``. Iteration t:

    1. ``eta += t^2 * ||g_t - g_{t-1}||_2^2`` (spectral norm) and the matrix
       ``eta * U diag(log(z+1)) V^T + (2t+1) g_t - t g_{t-1}`` is
       re-decomposed into new bases and values ``theta``;
    2. ``z`` is updated from ``theta`` by :func:`singular_value_update`;
    3. the perturbation is the t-weighted average of the (top-k truncated)
       singular vectors, expressed in the newest bases.

    ``callback(t, delta, info)`` is called after each iteration with
    ``info = {"eta": [...], "z": [...]}``.
    """
    h, w, c_count = shape
    r = min(h, w)
    k = r if cfg.top_k is None else min(cfg.top_k, r)
    us = [np.eye(h) for _ in range(c_count)]
    vts = [np.eye(w) for _ in range(c_count)]
    zs = [np.zeros(r) for _ in range(c_count)]
    wsum = [np.zeros(r) for _ in range(c_count)]
    etas = [float(cfg.eta0)] * c_count
    g_prev = np.zeros(shape)
    delta = np.zeros(shape)
    reg = cfg.regularizer
    trace = []

    for t in range(1, cfg.iterations + 1):
        bundle = oracle(delta)
        g = np.asarray(bundle.grad, dtype=np.float64)
        _finite("gradient", g, t, -1)
        trace.append(_trace_row(t, bundle, delta, -bundle.l_total + regularizer_value(delta, reg)))
        scale = (t + 1) if cfg.reg_weighting == "weighted" else 1
        lam1, lam2 = scale * cfg.lambda1, scale * cfg.lambda2
        new_delta = np.empty(shape)
        for c in range(c_count):
            dg = g[:, :, c] - g_prev[:, :, c]
            if np.any(dg):
                etas[c] += t * t * spectral.spectral_norm(dg) ** 2
            u, vt = us[c], vts[c]
            mirror = (u[:, :r] * np.log1p(zs[c])) @ vt[:r, :]
            m = etas[c] * mirror + (2 * t + 1) * g[:, :, c] - t * g_prev[:, :, c]
            f = spectral.svd(m)
            _finite("SVD factors", f.u, t, c)
            us[c], vts[c] = f.u, f.vt
            zs[c] = singular_value_update(f.sigma, etas[c], lam1, lam2)
            _finite("singular values", zs[c], t, c)
            top = zs[c].copy()
            top[k:] = 0.0
            wsum[c] += t * top
            coef = 2.0 / (t * (t + 1))
            new_delta[:, :, c] = (us[c][:, :r] * (coef * wsum[c])) @ vts[c][:r, :]
        g_prev = g
        delta = new_delta
        if callback is not None:
            callback(t, delta, {"eta": list(etas), "z": [z.copy() for z in zs]})
    method = "ao-exp" if cfg.top_k is None else "ao-exp-lora"
    return AttackResult(method, delta, trace)


def lora_pgd(oracle, shape, cfg: LoRaPgdConfig, callback=None) -> AttackResult:
    """Normalized gradient ascent on low-rank factors ``delta_c = U_c V_c``.

    After every step the product is scaled back into the nuclear budget by
    multiplying both factors with ``sqrt(budget / ||U V||_*)``.
    """
    h, w, c_count = shape
    r = cfg.rank(h, w)
    rng = np.random.default_rng(cfg.seed)
    us = rng.normal(0.0, cfg.init_scale, size=(c_count, h, r))
    vs = rng.normal(0.0, cfg.init_scale, size=(c_count, r, w))

    def assemble():
        return np.stack([us[c] @ vs[c] for c in range(c_count)], axis=2)

    for c in range(c_count):
        _project(us, vs, c, cfg.nuclear_budget)
    delta = assemble()
    trace = []
    for t in range(1, cfg.iterations + 1):
        bundle = oracle(delta)
        g = np.asarray(bundle.grad, dtype=np.float64)
        _finite("gradient", g, t, -1)
        trace.append(_trace_row(t, bundle, delta, -bundle.l_total))
        for c in range(c_count):
            gu, gv = factor_gradients(g[:, :, c], us[c], vs[c])
            nu, nv = np.linalg.norm(gu), np.linalg.norm(gv)
            if nu > 0:
                us[c] = us[c] + cfg.step * gu / nu
            if nv > 0:
                vs[c] = vs[c] + cfg.step * gv / nv
            _project(us, vs, c, cfg.nuclear_budget)
        delta = assemble()
        _finite("perturbation", delta, t, -1)
        if callback is not None:
            callback(t, delta, {"rank": r})
    return AttackResult("lora-pgd", delta, trace)


def factor_gradients(g, u, v):
    """Gradients of ``L(U V)`` w.r.t. ``U`` and ``V`` given ``g = dL/d(UV)``."""
    return g @ v.T, u.T @ g


def _project(us, vs, c, budget):
    if math.isinf(budget):
        return
    n = spectral.nuclear_norm(us[c] @ vs[c])
    if n > budget:
        s = math.sqrt(budget / n)
        us[c] *= s
        vs[c] *= s


def group_slices(shape, patch_size: int):
    """``(channel, row slice, col slice)`` of every non-overlapping window."""
    h, w, c_count = shape
    return [
        (c, slice(i, min(i + patch_size, h)), slice(j, min(j + patch_size, w)))
        for c in range(c_count)
        for i in range(0, h, patch_size)
        for j in range(0, w, patch_size)
    ]


def group_nuclear_norm(delta, patch_size: int) -> float:
    """Sum of the nuclear norms of all ``patch_size`` windows of all channels."""
    d = np.asarray(delta, dtype=np.float64)
    return float(sum(
        spectral.nuclear_norm(d[rs, cs, c]) for c, rs, cs in group_slices(d.shape, patch_size)
    ))


def _fw_vertex(g, cfg: FwNuclConfig):
    vertex = np.zeros(g.shape)
    if cfg.groups == "channel":
        for c in range(g.shape[2]):
            f = spectral.svd(g[:, :, c])
            vertex[:, :, c] = cfg.epsilon * np.outer(f.u[:, 0], f.vt[0, :])
        return vertex
    best, best_sigma = None, -1.0
    for c, rs, cs in group_slices(g.shape, cfg.patch_size):
        f = spectral.svd(g[rs, cs, c])
        if f.sigma[0] > best_sigma:
            best, best_sigma = (c, rs, cs, f), f.sigma[0]
    c, rs, cs, f = best
    vertex[rs, cs, c] = cfg.epsilon * np.outer(f.u[:, 0], f.vt[0, :])
    return vertex


def fw_nucl(oracle, shape, cfg: FwNuclConfig, callback=None) -> AttackResult:
    """Frank-Wolfe ascent over a nuclear (group) norm ball of radius epsilon.

    The linear maximization oracle returns a rank-1 vertex built from the top
    singular pair of the gradient: in the single best window for patch
    groups, in every channel for channel groups. The step size is the best
    of ``1/n, 2/n, ..., 1`` (n = ``line_search``) by attack loss, so the
    iterate stays in the ball as a convex combination of vertices.
    ``callback`` receives ``info = {"gap": float, "vertex": ndarray, "gamma": float}``.
    """
    delta = np.zeros(shape)
    trace = []
    gammas = [j / cfg.line_search for j in range(1, cfg.line_search + 1)]
    for t in range(1, cfg.iterations + 1):
        bundle = oracle(delta)
        g = np.asarray(bundle.grad, dtype=np.float64)
        _finite("gradient", g, t, -1)
        trace.append(_trace_row(t, bundle, delta, -bundle.l_total))
        vertex = _fw_vertex(g, cfg)
        direction = vertex - delta
        gap = float(np.sum(direction * g))
        best_gamma, best_val = None, -math.inf
        for gamma in gammas:
            val = oracle.loss(delta + gamma * direction).l_total
            if val > best_val:
                best_gamma, best_val = gamma, val
        delta = delta + best_gamma * direction
        _finite("perturbation", delta, t, -1)
        if callback is not None:
            callback(t, delta, {"gap": gap, "vertex": vertex, "gamma": best_gamma})
    return AttackResult("fw-nucl", delta, trace)


def _oracle(seq, detector, weights, tau, workers):
    if len(seq) < 1:
        raise ConfigError("empty frame sequence")
    return FrameGradientOracle(seq, detector, weights, tau, workers=workers)


def ao_exp_attack(seq, detector, cfg: AoExpConfig, *, weights=None, tau=0.5, workers=1,
                  callback=None) -> AttackResult:
    oracle = _oracle(seq, detector, weights, tau, workers)
    return ao_exp(oracle, oracle.shape, cfg, callback)


def lora_pgd_attack(seq, detector, cfg: LoRaPgdConfig, *, weights=None, tau=0.5, workers=1,
                    callback=None) -> AttackResult:
    oracle = _oracle(seq, detector, weights, tau, workers)
    return lora_pgd(oracle, oracle.shape, cfg, callback)


def fw_nucl_attack(seq, detector, cfg: FwNuclConfig, *, weights=None, tau=0.5, workers=1,
                   callback=None) -> AttackResult:
    oracle = _oracle(seq, detector, weights, tau, workers)
    return fw_nucl(oracle, oracle.shape, cfg, callback)


def apply_perturbation(seq: FrameSequence, delta) -> FrameSequence:
    """``clip(x_b + delta, 0, 1)`` for every frame; the same delta everywhere."""
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    if d.shape != tuple(seq.frame_shape):
        raise ValueError(f"delta shape {d.shape} does not match frames {seq.frame_shape}")
    out = np.clip(seq.frames.astype(np.float64) + d[None], 0.0, 1.0)
    return FrameSequence(out.astype(np.float32))
