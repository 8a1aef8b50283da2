"""A small, analytically differentiable blob detector used as the attack target.

The score map is ``sigmoid(sum_c k_c * x_c + b)`` (correlation with symmetric
border padding). Detections are the 4-connected components of
``score > tau_det`` with at least ``min_area`` pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage, signal
from scipy.special import expit

from nucuap import losses
from nucuap.errors import ConfigError

# 4-connectivity
_STRUCTURE = ndimage.generate_binary_structure(2, 1)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized ``size x size`` Gaussian template (sums to one)."""
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return h / h.sum()


@dataclass(frozen=True)
class DetectorConfig:
    """Immutable detector settings.

    The per-channel template is ``gain / channels * gaussian(kernel_size,
    kernel_sigma)`` unless ``kernel`` (shape K x K x C) is given explicitly,
    so with the defaults the logit is ``8 * mean_c(blurred x_c) - 4`` and the
    detection threshold sits at a blurred intensity of 0.5.
    """

    kernel_size: int = 11
    kernel_sigma: float = 2.0
    gain: float = 8.0
    bias: float = -4.0
    channels: int = 3
    tau_det: float = 0.5
    min_area: int = 9
    aggregation: str = "mean"
    kernel: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=np.float64)
            if k.ndim == 2:
                k = k[:, :, None]
            if k.ndim != 3 or k.shape[0] != k.shape[1]:
                raise ConfigError("explicit kernel must be K x K or K x K x C")
            k.setflags(write=False)
            object.__setattr__(self, "kernel", k)
            object.__setattr__(self, "kernel_size", k.shape[0])
            object.__setattr__(self, "channels", k.shape[2])
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 < self.tau_det < 1.0:
            raise ConfigError(f"tau_det must lie in (0, 1), got {self.tau_det}")
        if self.min_area < 1:
            raise ConfigError("min_area must be >= 1")
        if self.aggregation not in ("mean", "max"):
            raise ConfigError(f"aggregation must be 'mean' or 'max', got {self.aggregation!r}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")

    def kernel_array(self) -> np.ndarray:
        if self.kernel is not None:
            return self.kernel
        g = gaussian_kernel(self.kernel_size, self.kernel_sigma)
        return np.repeat((self.gain / self.channels * g)[:, :, None], self.channels, axis=2)

    def to_dict(self) -> dict:
        return {
            "kernel_size": self.kernel_size,
            "kernel_sigma": self.kernel_sigma,
            "gain": self.gain,
            "bias": self.bias,
            "channels": self.channels,
            "tau_det": self.tau_det,
            "min_area": self.min_area,
            "aggregation": self.aggregation,
        }


@dataclass(frozen=True)
class ScoreMap:
    scores: np.ndarray  # sigmoid(logits), H x W
    logits: np.ndarray


@dataclass(frozen=True)
class Detection:
    """One detected blob. ``box`` is the half-open ``(x0, y0, x1, y1)``."""

    box: tuple[int, int, int, int]
    score: float
    mask: np.ndarray = field(repr=False)
    label: int = 0

    @property
    def support(self) -> np.ndarray:
        return self.mask > 0

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@lru_cache(maxsize=32)
def _pad_index(height: int, width: int, pad: int) -> np.ndarray:
    # source pixel (flat index) of every padded position; symmetric = d c b a | a b c d
    idx = np.arange(height * width).reshape(height, width)
    out = np.pad(idx, pad, mode="symmetric")
    out.setflags(write=False)
    return out


class BlobDetector:
    """Correlation -> sigmoid -> threshold -> connected components."""

    def __init__(self, config: DetectorConfig | None = None):
        self.config = config or DetectorConfig()
        self._kernel = self.config.kernel_array()
        self._pad = self.config.kernel_size // 2

    def _check(self, image) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[2] != self._kernel.shape[2]:
            raise ConfigError(
                f"image with shape {np.shape(image)} does not match a detector "
                f"configured for {self._kernel.shape[2]} channel(s)"
            )
        return x

    def logits(self, image) -> np.ndarray:
        x = self._check(image)
        h, w, c = x.shape
        pidx = _pad_index(h, w, self._pad)
        xpad = x.reshape(h * w, c)[pidx]
        out = signal.correlate(xpad, self._kernel, mode="valid")
        return out[:, :, 0] + self.config.bias

    def score_map(self, image) -> ScoreMap:
        logit = self.logits(image)
        return ScoreMap(scores=expit(logit), logits=logit)

    def detect(self, smap: ScoreMap) -> list[Detection]:
        cfg = self.config
        s = smap.scores
        labels, n = ndimage.label(s > cfg.tau_det, structure=_STRUCTURE)
        dets = []
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None:
                continue
            comp = labels == k
            area = int(np.count_nonzero(comp))
            if area < cfg.min_area:
                continue
            vals = s[comp]
            score = float(vals.mean() if cfg.aggregation == "mean" else vals.max())
            box = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
            dets.append(Detection(box=box, score=score, mask=np.where(comp, s, 0.0)))
        dets.sort(key=lambda d: (-d.score, d.box[1], d.box[0]))
        return dets

    def forward(self, image) -> tuple[ScoreMap, list[Detection]]:
        smap = self.score_map(image)
        return smap, self.detect(smap)

    def backprop_logits(self, dlogits: np.ndarray, channels: int | None = None) -> np.ndarray:
        """Adjoint of :meth:`logits`: maps dL/dlogits (H x W) to dL/dimage."""
        h, w = dlogits.shape
        c = self._kernel.shape[2]
        dpad = signal.convolve(dlogits[:, :, None], self._kernel, mode="full")
        pidx = _pad_index(h, w, self._pad).reshape(-1)
        grad = np.empty((h * w, c))
        flat = dpad.reshape(-1, c)
        for ch in range(c):
            grad[:, ch] = np.bincount(pidx, weights=flat[:, ch], minlength=h * w)
        return grad.reshape(h, w, c)

    def loss_gradient(
        self,
        clean_det,
        image,
        weights: losses.LossWeights | None = None,
        tau: float = 0.5,
        eps_p: float = losses.EPS_P,
        partition: losses.GroundTruthPartition | None = None,
    ) -> losses.LossBundle:
        """Loss terms and exact dL_total/d(image) for one (perturbed) frame.

        The fg/bg partition comes from the clean detections and the
        confidence term is differentiated over the frozen component
        supports of the current detections; nothing flows through the
        thresholding itself.
        """
        weights = weights or losses.LossWeights()
        x = self._check(image)
        smap, dets = self.forward(x)
        if partition is None:
            partition = losses.build_partition(clean_det, tau, x.shape[:2])
        s = smap.scores
        p = np.clip(s, eps_p, 1.0 - eps_p)
        inside = (s >= eps_p) & (s <= 1.0 - eps_p)

        l_fg, l_bg = losses.cross_entropy_split(s, partition, eps_p)
        l_conf = losses.confidence_loss(dets, tau)

        ds = np.zeros_like(s)
        y = partition.y
        if partition.n_fg:
            ds[y] -= weights.alpha / (partition.n_fg * p[y])
        if partition.n_bg:
            ds[~y] += weights.beta / (partition.n_bg * (1.0 - p[~y]))
        ds = np.where(inside, ds, 0.0)
        for d in dets:
            if d.score > tau:
                sup = d.support
                if self.config.aggregation == "mean":
                    ds[sup] += weights.gamma / np.count_nonzero(sup)
                else:
                    j = np.argmax(np.where(sup, s, -np.inf))
                    ds.flat[j] += weights.gamma
        dlogits = ds * s * (1.0 - s)
        grad = self.backprop_logits(dlogits)
        total = weights.alpha * l_fg + weights.gamma * l_conf + weights.beta * l_bg
        return losses.LossBundle(
            l_fg=l_fg,
            l_bg=l_bg,
            l_conf=l_conf,
            l_total=total,
            grad=grad,
            empty_clean=partition.n_fg == 0,
        )

    def loss_value(self, clean_det, image, weights=None, tau=0.5, eps_p=losses.EPS_P,
                   partition=None) -> losses.LossBundle:
        """Same loss terms as :meth:`loss_gradient`, without the backward pass."""
        weights = weights or losses.LossWeights()
        x = self._check(image)
        smap, dets = self.forward(x)
        if partition is None:
            partition = losses.build_partition(clean_det, tau, x.shape[:2])
        l_fg, l_bg = losses.cross_entropy_split(smap.scores, partition, eps_p)
        l_conf = losses.confidence_loss(dets, tau)
        total = weights.alpha * l_fg + weights.gamma * l_conf + weights.beta * l_bg
        return losses.LossBundle(l_fg, l_bg, l_conf, total, None, partition.n_fg == 0)
