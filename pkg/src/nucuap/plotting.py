"""Matplotlib figures written as SVG files.

The Agg backend is forced and the SVG hash salt and date are pinned so the
same data always produces the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

_RC = {
    "svg.hashsalt": "nucuap",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_trace(trace, path, title: str = "") -> Path:
    """Attack loss and perturbation norms per iteration."""
    with plt.rc_context(_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3), layout="constrained")
        it = [r.iteration for r in trace]
        ax1.plot(it, [r.l_total for r in trace], label="total")
        ax1.plot(it, [r.l_fg for r in trace], label="fg", lw=0.8)
        ax1.plot(it, [r.l_bg for r in trace], label="bg", lw=0.8)
        ax1.plot(it, [r.l_conf for r in trace], label="conf", lw=0.8)
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        ax2.plot(it, [r.nuclear_norm for r in trace], label="nuclear")
        ax2.plot(it, [r.frobenius_norm for r in trace], label="Frobenius")
        ax2.set_xlabel("iteration")
        ax2.set_ylabel("norm of perturbation")
        ax2.legend(frameon=False)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_report(report, path) -> Path:
    """Per-frame IoU and clean versus adversarial box counts."""
    with plt.rc_context(_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3), layout="constrained")
        b = np.array([f.frame for f in report.frames])
        ax1.bar(b, [f.iou_t for f in report.frames], color="C0")
        ax1.set_xlabel("frame")
        ax1.set_ylabel("IoU_t")
        ax2.bar(b - 0.2, [f.n_clean for f in report.frames], width=0.4, label="clean")
        ax2.bar(b + 0.2, [f.n_adv for f in report.frames], width=0.4, label="adversarial")
        ax2.set_xlabel("frame")
        ax2.set_ylabel("boxes")
        ax2.legend(frameon=False)
        fig.suptitle(
            f"{report.method or 'attack'}: IoU_acc {report.iou_acc:.3g}, "
            f"advBR {report.adv_br:.3g}, MAP {report.map:.3g}"
        )
        return _save(fig, path)


def plot_comparison(labels, metric_names, values, average, path) -> Path:
    """One bar panel per metric plus the average rank (lower is better everywhere)."""
    n = len(metric_names) + 1
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 3), layout="constrained")
        x = np.arange(len(labels))
        panels = [*zip(metric_names, values), ("average rank", average)]
        for ax, (name, vals) in zip(axes, panels):
            ax.bar(x, vals, color=[f"C{i % 10}" for i in x])
            ax.set_xticks(x, labels, rotation=30, ha="right")
            ax.set_title(name)
        return _save(fig, path)


def plot_detections(frames, detections, path, max_frames: int = 8) -> Path:
    """Frames with their detection boxes and scores drawn on top."""
    k = min(len(frames), max_frames)
    with plt.rc_context(_RC | {"axes.grid": False}):
        fig, axes = plt.subplots(1, k, figsize=(2.0 * k, 2.2), layout="constrained",
                                 squeeze=False)
        for b, ax in enumerate(axes[0]):
            img = np.asarray(frames[b])
            ax.imshow(img[:, :, 0] if img.shape[2] == 1 else img, cmap="gray",
                      vmin=0.0, vmax=1.0, interpolation="nearest")
            for d in detections[b]:
                x0, y0, x1, y1 = d.box
                ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0,
                                       fill=False, ec="red", lw=1))
                ax.text(x0, y0 - 1, f"{d.score:.2f}", color="red", fontsize=6)
            ax.set_title(f"frame {b}", fontsize=7)
            ax.set_axis_off()
        return _save(fig, path)
