"""Figure renderers for benchmark reports.

All renderers write PNGs with pinned metadata and dpi so that re-rendering
the same inputs reproduces the same bytes. Masks are always drawn with the
fixed class palette; images are drawn in grayscale over their declared
intensity range.
"""

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib import pyplot as plt

from .core import mask_to_rgb
from .errors import ConfigError
from .maskshape import SHAPE_FEATURES, STRUCTURES

_SAVE_KW = {"dpi": 110, "metadata": {"Software": "cmrbench"}}


def _save(fig, path):
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def _bare(ax):
    ax.set_xticks([])
    ax.set_yticks([])
    for side in ax.spines.values():
        side.set_visible(False)


def _grid_of(obj):
    return obj.grid if hasattr(obj, "grid") else np.asarray(obj)


def sample_grid_figure(masks, images, generator: str, path):
    """Conditioning masks on the top row, the generated samples below them."""
    masks = list(masks)
    images = list(images)
    if not masks or len(masks) != len(images):
        raise ConfigError(
            f"need equally many masks and images, got {len(masks)} and {len(images)}"
        )
    n = len(masks)
    fig, axes = plt.subplots(2, n, figsize=(1.4 * n, 3.0), squeeze=False)
    for j in range(n):
        axes[0][j].imshow(mask_to_rgb(_grid_of(masks[j])), interpolation="nearest")
        axes[1][j].imshow(
            _grid_of(images[j]), cmap="gray", vmin=-1.0, vmax=1.0, interpolation="nearest"
        )
        _bare(axes[0][j])
        _bare(axes[1][j])
    axes[0][0].set_ylabel("mask", fontsize=9)
    axes[1][0].set_ylabel(generator, fontsize=9)
    fig.suptitle(f"{generator}: mask-conditioned samples", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def denoising_strip_figure(snapshots, interval: int, total_steps: int, path):
    """One frame per recorded reverse step, from pure noise to the sample."""
    snapshots = [np.asarray(s) for s in snapshots]
    if not snapshots:
        raise ConfigError("no snapshots to draw")
    labels = [total_steps] + list(range(((total_steps - 1) // interval) * interval, -1, -interval))
    n = len(snapshots)
    fig, axes = plt.subplots(1, n, figsize=(1.4 * n, 1.9), squeeze=False)
    for j, snap in enumerate(snapshots):
        frame = snap[0, 0] if snap.ndim == 4 else snap
        axes[0][j].imshow(frame, cmap="gray", vmin=-1.0, vmax=1.0, interpolation="nearest")
        _bare(axes[0][j])
        if j < len(labels):
            axes[0][j].set_title(f"t={labels[j]}", fontsize=8)
    fig.suptitle("reverse diffusion trajectory", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def _half_violin(ax, summary: dict, center: float, side: int, color: str):
    x = np.asarray(summary["kde_x"], dtype=float)
    y = np.asarray(summary["kde_y"], dtype=float)
    if len(x) < 2:  # degenerate spike
        ax.plot([center, center + side * 0.4], [x[0], x[0]], color=color, lw=2)
        return
    y = 0.4 * y / y.max()
    ax.fill_betweenx(x, center, center + side * y, facecolor=color, alpha=0.6, lw=0)
    median = summary["quantiles"][5]
    ax.plot([center, center + side * 0.4], [median, median], color=color, lw=1)


def shape_violin_figure(plaus, generator: str, path):
    """Mirrored density per structure and feature: real left, generated right."""
    fig, axes = plt.subplots(
        len(STRUCTURES),
        len(SHAPE_FEATURES),
        figsize=(2.3 * len(SHAPE_FEATURES), 2.0 * len(STRUCTURES)),
        squeeze=False,
    )
    for i, structure in enumerate(STRUCTURES):
        for j, feature in enumerate(SHAPE_FEATURES):
            ax = axes[i][j]
            pair = plaus.summaries.get(f"{structure}/{feature}")
            if pair is None:
                ax.set_axis_off()
                continue
            _half_violin(ax, pair["real"], 0.0, -1, "tab:blue")
            _half_violin(ax, pair["generated"], 0.0, +1, "tab:orange")
            ax.set_xticks([])
            if i == 0:
                ax.set_title(feature, fontsize=9)
            if j == 0:
                ax.set_ylabel(structure, fontsize=9)
            flagged = any(
                r.flagged for r in plaus.rows if r.structure == structure and r.feature == feature
            )
            if flagged:
                ax.set_facecolor("#fff0f0")
    fig.suptitle(f"{generator}: shape features, real (left) vs generated (right)", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def metric_bar_figure(report, axis: str, path):
    """One bar panel per metric on this axis; bars are (generator, setup) pairs."""
    rows = report.filter(axis=axis)
    if not rows:
        raise ConfigError(f"report has no rows on axis {axis!r}")
    metrics = sorted({r.metric for r in rows})
    fig, axes = plt.subplots(
        len(metrics), 1, figsize=(6.5, 1.7 * len(metrics)), squeeze=False
    )
    for i, metric in enumerate(metrics):
        ax = axes[i][0]
        hits = [r for r in rows if r.metric == metric]
        labels = [
            r.generator if r.setup in ("", r.generator) else f"{r.generator}/{r.setup}"
            for r in hits
        ]
        values = [r.value for r in hits]
        errs = [r.uncertainty or 0.0 for r in hits]
        pos = np.arange(len(hits))
        ax.bar(pos, values, yerr=errs, width=0.6, color="tab:blue")
        ax.set_xticks(pos)
        ax.set_xticklabels(labels, fontsize=7, rotation=20, ha="right")
        ax.set_ylabel(metric, fontsize=8)
        for p, v in zip(pos, values):
            ax.annotate(f"{v:.3g}", (p, v), ha="center", va="bottom", fontsize=7)
    fig.suptitle(f"{axis} metrics", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def render_figures(report, payload: dict, out_dir) -> list:
    """Render every figure the payload supports; return the written paths."""
    files = []
    for generator, bundle in sorted(payload.get("samples", {}).items()):
        files.append(
            sample_grid_figure(
                bundle["masks"],
                bundle["images"],
                generator,
                out_dir / f"samples_{generator}.png",
            )
        )
    strip = payload.get("denoising")
    if strip:
        files.append(
            denoising_strip_figure(
                strip["snapshots"],
                strip["interval"],
                strip["total_steps"],
                out_dir / f"denoising_{strip.get('generator', 'ddpm')}.png",
            )
        )
    for generator, plaus in sorted(payload.get("shape", {}).items()):
        files.append(
            shape_violin_figure(plaus, generator, out_dir / f"shape_violins_{generator}.png")
        )
    for axis in sorted({r.axis for r in report.rows}):
        files.append(metric_bar_figure(report, axis, out_dir / f"metrics_{axis}.png"))
    return files
