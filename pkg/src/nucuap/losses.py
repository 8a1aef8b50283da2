"""Attack losses: clean-mask partition, fg/bg cross-entropy, confidence loss,
the nuclear + squared-Frobenius regularizer, and the frame-averaged gradient.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from nucuap import spectral

EPS_P = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # foreground CE
    beta: float = 1.0  # background CE
    gamma: float = 1.0  # confidence


@dataclass(frozen=True)
class RegularizerConfig:
    lambda1: float = 0.1  # nuclear
    lambda2: float = 0.01  # squared Frobenius (halved)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be non-negative")


@dataclass(frozen=True)
class GroundTruthPartition:
    """Binary clean mask ``y``: foreground F = {y}, background B = {~y}."""

    y: np.ndarray
    detections: tuple = ()

    @property
    def n_fg(self) -> int:
        return int(np.count_nonzero(self.y))

    @property
    def n_bg(self) -> int:
        return int(self.y.size - self.n_fg)

    @property
    def foreground(self) -> np.ndarray:
        return np.argwhere(self.y)

    @property
    def background(self) -> np.ndarray:
        return np.argwhere(~self.y)


@dataclass(frozen=True)
class LossBundle:
    l_fg: float
    l_bg: float
    l_conf: float
    l_total: float
    grad: np.ndarray | None = None
    empty_clean: bool = False


def build_partition(clean_detections, tau: float, shape) -> GroundTruthPartition:
    """Union of the masks of clean detections scoring above ``tau``."""
    m = np.zeros(tuple(shape)[:2])
    kept = []
    for d in clean_detections:
        if d.score > tau:
            m = m + d.mask
            kept.append(d)
    y = m > 0
    y.setflags(write=False)
    return GroundTruthPartition(y=y, detections=tuple(kept))


def _ce(p, y):
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def cross_entropy_split(p, part: GroundTruthPartition, eps_p: float = EPS_P):
    """Mean cross-entropy over the foreground and over the background.

    An empty set contributes a loss of 0.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), eps_p, 1.0 - eps_p)
    y = part.y
    ce = _ce(p, y.astype(np.float64))
    l_fg = float(ce[y].mean()) if part.n_fg else 0.0
    l_bg = float(ce[~y].mean()) if part.n_bg else 0.0
    return l_fg, l_bg


def confidence_loss(detections, tau: float) -> float:
    return float(sum(d.score for d in detections if d.score > tau))


def regularizer_value(delta, cfg: RegularizerConfig) -> float:
    """``sum_c lambda1 ||delta_c||_* + lambda2 / 2 ||delta_c||_F^2``."""
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    total = 0.0
    for c in range(d.shape[2]):
        s = spectral.singular_values(d[:, :, c])
        total += cfg.lambda1 * float(s.sum()) + 0.5 * cfg.lambda2 * float(np.sum(s * s))
    return total


def _mean_bundle(bundles, grad) -> LossBundle:
    n = len(bundles)
    return LossBundle(
        l_fg=sum(b.l_fg for b in bundles) / n,
        l_bg=sum(b.l_bg for b in bundles) / n,
        l_conf=sum(b.l_conf for b in bundles) / n,
        l_total=sum(b.l_total for b in bundles) / n,
        grad=grad,
        empty_clean=any(b.empty_clean for b in bundles),
    )


def averaged_gradient(seq, delta, detector, partitions, weights=None, tau=0.5,
                      eps_p=EPS_P, workers: int = 1):
    """Mean loss bundle and mean gradient w.r.t. ``delta`` over all frames.

    Each frame is attacked as ``clip(x_b + delta, 0, 1)``; the clip passes the
    gradient through wherever it leaves the value unchanged.
    """
    weights = weights or LossWeights()
    delta = np.asarray(delta, dtype=np.float64)
    frames = seq.frames if hasattr(seq, "frames") else np.asarray(seq)
    if frames.shape[1:] != delta.shape:
        raise ValueError(f"delta shape {delta.shape} does not match frames {frames.shape[1:]}")

    def one(b):
        raw = frames[b].astype(np.float64) + delta
        x = np.clip(raw, 0.0, 1.0)
        bundle = detector.loss_gradient(
            partitions[b].detections, x, weights, tau, eps_p, partition=partitions[b]
        )
        grad = np.where((raw >= 0.0) & (raw <= 1.0), bundle.grad, 0.0)
        return bundle, grad

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, range(len(frames))))
    else:
        results = [one(b) for b in range(len(frames))]
    grad = np.zeros_like(delta)
    for _, g in results:  # fixed summation order
        grad += g
    grad /= len(results)
    bundles = [r[0] for r in results]
    mean = _mean_bundle(bundles, grad)
    return mean, grad


def averaged_loss(seq, delta, detector, partitions, weights=None, tau=0.5, eps_p=EPS_P):
    weights = weights or LossWeights()
    delta = np.asarray(delta, dtype=np.float64)
    frames = seq.frames if hasattr(seq, "frames") else np.asarray(seq)
    bundles = [
        detector.loss_value(
            partitions[b].detections,
            np.clip(frames[b].astype(np.float64) + delta, 0.0, 1.0),
            weights, tau, eps_p, partition=partitions[b],
        )
        for b in range(len(frames))
    ]
    return _mean_bundle(bundles, None)


class FrameGradientOracle:
    """Averaged loss / gradient of a detector over a fixed clean sequence.

    Clean detections and partitions are computed once at construction.
    Calling the oracle returns a :class:`LossBundle` whose ``grad`` is the
    frame-averaged gradient.
    """

    def __init__(self, seq, detector, weights=None, tau=0.5, eps_p=EPS_P, workers=1):
        self.seq = seq
        self.detector = detector
        self.weights = weights or LossWeights()
        self.tau = tau
        self.eps_p = eps_p
        self.workers = workers
        self.shape = tuple(seq.frames.shape[1:])
        self.clean_detections = [detector.forward(x)[1] for x in seq.frames]
        self.partitions = [
            build_partition(d, tau, self.shape[:2]) for d in self.clean_detections
        ]

    def __call__(self, delta) -> LossBundle:
        bundle, _ = averaged_gradient(
            self.seq, delta, self.detector, self.partitions,
            self.weights, self.tau, self.eps_p, self.workers,
        )
        return bundle

    def loss(self, delta) -> LossBundle:
        return averaged_loss(
            self.seq, delta, self.detector, self.partitions,
            self.weights, self.tau, self.eps_p,
        )
