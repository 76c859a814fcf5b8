"""Report figures for registration runs, rendered to PNG with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TRACE_TERMS = ("regist_ab", "regist_ba", "cycle", "identity", "total")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_trace(trace, path, level_of_iteration=None) -> Path:
    """Loss components against iteration, with pyramid level changes marked.

    Parameters
    ----------
    trace : list of LossBreakdown
    path : str or Path
        Output PNG.
    level_of_iteration : list of int, optional
        Pyramid level index of each trace entry.
    """
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    it = np.arange(len(trace))
    for name in ("regist_ab", "regist_ba", "total"):
        axes[0].plot(it, [getattr(b, name) for b in trace], label=name)
    axes[1].plot(it, [b.cycle for b in trace], color="tab:red", label="cycle")
    if level_of_iteration:
        changes = np.flatnonzero(np.diff(level_of_iteration)) + 1
        for ax in axes:
            for c in changes:
                ax.axvline(c, color="0.7", linestyle="--", linewidth=0.8)
    axes[0].set_title("registration and total loss")
    axes[1].set_title("cycle l1 residual")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_slices(moving, fixed, warped, path) -> Path:
    """Mid-z slices of moving, fixed, warped moving and the residual."""
    moving, fixed, warped = (np.asarray(v, dtype=np.float64) for v in (moving, fixed, warped))
    z = moving.shape[2] // 2
    panels = [("moving", moving), ("fixed", fixed), ("warped moving", warped)]
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.6))
    for ax, (title, vol) in zip(axes, panels):
        im = ax.imshow(vol[:, :, z].T, origin="lower", cmap="gray")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
    # contrast may differ between phases, so compare z-scored intensities
    zs = [(v - v.mean()) / (v.std() or 1.0) for v in (warped, fixed)]
    diff = (zs[0] - zs[1])[:, :, z].T
    lim = float(np.max(np.abs(diff))) or 1.0
    im = axes[3].imshow(diff, origin="lower", cmap="RdBu_r", vmin=-lim, vmax=lim)
    axes[3].set_title("z-scored residual")
    fig.colorbar(im, ax=axes[3], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_jacobian(det, path) -> Path:
    """Mid-plane Jacobian determinant maps with the det = 0 contour in black."""
    det = np.asarray(det, dtype=np.float64)
    mids = [n // 2 for n in det.shape]
    cuts = [("x", det[mids[0], :, :]), ("y", det[:, mids[1], :]), ("z", det[:, :, mids[2]])]
    lim = max(float(np.max(np.abs(det - 1.0))), 1e-6)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.8))
    for ax, (axis, plane) in zip(axes, cuts):
        im = ax.imshow(plane.T, origin="lower", cmap="coolwarm", vmin=1 - lim, vmax=1 + lim)
        if plane.min() <= 0 < plane.max():
            ax.contour(plane.T, levels=[0.0], colors="k", linewidths=0.8)
        ax.set_title(f"det J, {axis} = {mids['xyz'.index(axis)]}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=list(axes), fraction=0.02)
    return _save(fig, path)
