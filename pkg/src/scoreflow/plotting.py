"""Figure rendering for CLI reports. Every function writes a PNG and returns its path."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _size(width=6.0, ratio=None):
    ratio = ratio or (math.sqrt(5) - 1.0) / 2.0
    return width, width * ratio


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def schedule_figure(path, t, columns: dict, title=""):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        for name, vals in columns.items():
            ax.plot(t, vals, label=name)
        ax.set_xlabel("t")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def loss_curve_figure(path, losses):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        ax.plot(np.arange(1, len(losses) + 1), losses)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean training loss")
        return _save(fig, path)


def _image_row(axes, images, titles, vmax=1.0, cmap="gray"):
    for ax, img, title in zip(axes, images, titles):
        ax.imshow(img, cmap=cmap, vmin=0.0, vmax=vmax)
        ax.set_title(title)
        ax.axis("off")


def trajectory_figure(path, frames, indices, side=0, condition=None):
    """Intermediate states of one reverse run, noise on the left, x_0 on the right.

    ``frames`` hold one sample each: an image (side > 0) or a point cloud.
    """
    n = len(frames) + (condition is not None)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, n, figsize=(1.4 * n, 1.6), squeeze=False)
        axes = list(axes[0])
        if condition is not None:
            _image_row(axes[:1], [np.reshape(condition, (side, side))], ["condition"])
            axes = axes[1:]
        for ax, fr, i in zip(axes, frames, indices):
            if side:
                ax.imshow(np.clip(np.reshape(fr, (side, side)), 0, 1), cmap="gray", vmin=0, vmax=1)
                ax.axis("off")
            else:
                pts = np.atleast_2d(fr)
                ax.scatter(pts[:, 0], pts[:, 1], s=2)
                ax.set_xticks([])
                ax.set_yticks([])
            ax.set_title(f"x_{i}")
        return _save(fig, path)


def mc_figure(path, replicates, mean, std, condition=None, target=None, std_max=0.5):
    """Replicates, ensemble mean and std map (std shown on [0, std_max])."""
    reps = list(replicates)
    extra = [("condition", condition), ("target", target)]
    extra = [(k, v) for k, v in extra if v is not None]
    ncol = max(len(reps), len(extra) + 2)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, ncol, figsize=(1.3 * ncol, 2.8), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        _image_row(axes[0], [np.clip(r, 0, 1) for r in reps], [f"#{k}" for k in range(len(reps))])
        row = [v for _, v in extra] + [np.clip(mean, 0, 1)]
        _image_row(axes[1], row, [k for k, _ in extra] + ["mean"])
        ax = axes[1][len(row)]
        im = ax.imshow(std, cmap="magma", vmin=0.0, vmax=std_max)
        ax.set_title("std")
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)


def bench_figure(path, methods, seconds, evals):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size(4.5))
        bars = ax.bar(methods, seconds, color="0.4")
        for b, n in zip(bars, evals):
            ax.annotate(f"{n} evals", (b.get_x() + b.get_width() / 2, b.get_height()),
                        ha="center", va="bottom", fontsize=7)
        ax.set_ylabel("seconds per run")
        return _save(fig, path)


def metrics_figure(path, names, ssim, psnr):
    with plt.rc_context(RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=_size(7, 0.4))
        x = np.arange(len(names))
        a1.bar(x, ssim, color="0.4")
        a1.set_ylabel("SSIM")
        a2.bar(x, psnr, color="0.4")
        a2.set_ylabel("PSNR (dB)")
        for ax in (a1, a2):
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=60, ha="right", fontsize=6)
        return _save(fig, path)
