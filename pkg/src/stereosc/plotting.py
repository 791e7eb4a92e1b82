"""Static metric-vs-SNR figures."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LABELS = {"psnr": "PSNR (dB)", "ssim": "SSIM"}


def plot_metric_vs_snr(points: dict, metric: str, kind: str, path, *,
                       reference: dict | None = None) -> Path:
    """Line plot of one metric against SNR for one channel kind.

    Args:
        points: ``{region: [(snr_db, value), ...]}``.
        metric: Metric name, used for the axis label.
        kind: Channel kind, used for the title.
        path: Output image file.
        reference: Optional ``{region: value}`` drawn as dashed horizontal
            lines (the noiseless run).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    reference = reference or {}
    for i, region in enumerate(sorted(set(points) | set(reference))):
        series = sorted(points.get(region, []))
        color = f"C{i}"
        if series:
            ax.plot([s for s, _ in series], [v for _, v in series], "o-", color=color,
                    label=region)
        ref = reference.get(region)
        if ref is not None and math.isfinite(ref):
            ax.axhline(ref, color=color, ls="--", lw=1, label=f"{region} (noiseless)")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(LABELS.get(metric, metric))
    ax.set_title(f"{metric} over {kind}")
    ax.grid(alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
