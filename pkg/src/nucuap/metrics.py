"""Attack evaluation metrics.

Boxes are half-open integer pixel rectangles ``(x0, y0, x1, y1)`` with area
``(x1 - x0) * (y1 - y0)``. Detections on clean frames are the ground truth.

Note that the per-frame IoU is the plain double sum of pairwise IoUs over
all clean x adversarial box pairs (no matching), so it can exceed 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from nucuap import spectral
from nucuap.errors import MetricError


def _check_box(b):
    x0, y0, x1, y1 = b
    if not (x0 < x1 and y0 < y1):
        raise MetricError(f"degenerate box {tuple(b)}")


def box_area(b) -> float:
    _check_box(b)
    return float((b[2] - b[0]) * (b[3] - b[1]))


def iou(a, b) -> float:
    """Intersection over union (Jaccard index) of two boxes."""
    _check_box(a)
    _check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = float(max(iw, 0) * max(ih, 0))
    union = box_area(a) + box_area(b) - inter
    return inter / union


def iou_frame(clean, adv) -> float:
    return float(sum(iou(a, b) for a in clean for b in adv))


def iou_acc(per_frame) -> float:
    vals = list(per_frame)
    if not vals:
        raise MetricError("IoU_acc needs at least one frame")
    return float(sum(vals) / len(vals))


def adv_box_ratio(clean_counts, adv_counts) -> float:
    """Total adversarial boxes over total clean boxes (0 means all removed)."""
    n = sum(clean_counts)
    if n <= 0:
        raise MetricError("advBR is undefined when the clean frames have no boxes")
    return float(sum(adv_counts) / n)


def mean_abs_perturbation(delta) -> float:
    """Channel-summed absolute perturbation averaged over the image plane."""
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    h, w = d.shape[:2]
    return float(np.abs(d).sum() / (h * w))


def average_ranks(scores, lower_is_better=True) -> np.ndarray:
    """Mean rank of each method across instances and metrics.

    ``scores`` has shape ``(methods, instances)`` for one metric or
    ``(metrics, methods, instances)``. Ties share the mean of the tied ranks;
    rank 1 is best.
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise MetricError("scores must be 2-D (methods x instances) or 3-D")
    n_metrics, n_methods, n_inst = arr.shape
    if n_methods < 2 or n_inst < 1:
        raise MetricError("average ranks need >= 2 methods and >= 1 instance")
    if np.any(np.isnan(arr)):
        raise MetricError("NaN score in rank table")
    flags = np.broadcast_to(np.asarray(lower_is_better, dtype=bool), (n_metrics,))
    ranks = np.empty_like(arr)
    for m in range(n_metrics):
        vals = arr[m] if flags[m] else -arr[m]
        ranks[m] = rankdata(vals, method="average", axis=0)
    return ranks.mean(axis=(0, 2))


@dataclass(frozen=True)
class FrameRecord:
    frame: int
    iou_t: float
    n_clean: int
    n_adv: int


@dataclass
class AttackReport:
    iou_acc: float
    adv_br: float
    map: float
    nuclear_norms: list[float]
    frobenius_norm: float
    frames: list[FrameRecord] = field(default_factory=list)
    method: str = ""
    instance: str = ""
    config_hash: str = ""

    @property
    def nuclear_norm(self) -> float:
        return float(sum(self.nuclear_norms))

    def summary(self) -> str:
        lines = [
            f"method          {self.method or '-'}",
            f"instance        {self.instance or '-'}",
            f"frames          {len(self.frames)}",
            f"IoU_acc         {self.iou_acc:.6g}",
            f"advBR           {self.adv_br:.6g}",
            f"MAP             {self.map:.6g}",
            f"nuclear norm    {self.nuclear_norm:.6g}  "
            f"(per channel: {', '.join(f'{v:.6g}' for v in self.nuclear_norms)})",
            f"Frobenius norm  {self.frobenius_norm:.6g}",
            f"clean boxes     {sum(f.n_clean for f in self.frames)}",
            f"adv boxes       {sum(f.n_adv for f in self.frames)}",
        ]
        return "\n".join(lines) + "\n"


def evaluate_attack(clean_seq, adv_seq, delta, detector, method="", instance="",
                    config_hash="") -> AttackReport:
    """Run the detector on clean and attacked frames and collect every metric."""
    if clean_seq.frames.shape != adv_seq.frames.shape:
        raise MetricError(
            f"clean {clean_seq.frames.shape} and adversarial {adv_seq.frames.shape} "
            "sequences are not aligned"
        )
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    if d.shape != tuple(clean_seq.frame_shape):
        raise MetricError(f"delta shape {d.shape} does not match frames {clean_seq.frame_shape}")
    records = []
    for b, (x, xa) in enumerate(zip(clean_seq.frames, adv_seq.frames)):
        clean_boxes = [det.box for det in detector.forward(x)[1]]
        adv_boxes = [det.box for det in detector.forward(xa)[1]]
        records.append(
            FrameRecord(b, iou_frame(clean_boxes, adv_boxes), len(clean_boxes), len(adv_boxes))
        )
    nuclear = [spectral.nuclear_norm(d[:, :, c]) for c in range(d.shape[2])]
    return AttackReport(
        iou_acc=iou_acc(r.iou_t for r in records),
        adv_br=adv_box_ratio([r.n_clean for r in records], [r.n_adv for r in records]),
        map=mean_abs_perturbation(d),
        nuclear_norms=nuclear,
        frobenius_norm=float(np.linalg.norm(d)),
        frames=records,
        method=method,
        instance=instance,
        config_hash=config_hash,
    )


def clean_self_iou(clean_seq, detector) -> float:
    """IoU_acc of the clean detections against themselves (the unattacked baseline)."""
    vals = []
    for x in clean_seq.frames:
        boxes = [d.box for d in detector.forward(x)[1]]
        vals.append(iou_frame(boxes, boxes))
    return iou_acc(vals)
