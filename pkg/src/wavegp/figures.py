"""Figure rendering for the report path (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def band_chart(report, path) -> None:
    """Grouped bars: mean NMSE per frequency band (plus full band) for
    every method in the report."""
    methods = report.methods()
    band_keys: list[tuple] = []
    for r in report.rows:
        key = (r.band_lo, r.band_hi)
        if key not in band_keys:
            band_keys.append(key)

    def mean_for(method, key):
        vals = [r.nmse_db for r in report.rows
                if r.method == method and (r.band_lo, r.band_hi) == key]
        return float(np.mean(vals)) if vals else np.nan

    labels = ["full" if lo is None else f"{lo:.0f}-{hi:.0f} Hz"
              for lo, hi in band_keys]
    x = np.arange(len(band_keys))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(7.5, 4.0))
    for i, method in enumerate(methods):
        vals = [mean_for(method, key) for key in band_keys]
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=method)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("NMSE [dB]")
    ax.set_xlabel("frequency band")
    ax.axhline(0.0, color="k", linewidth=0.8)
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def loss_chart(losses: dict, path) -> None:
    """Training-loss traces, one panel, log-x; mean over realizations
    per method with individual runs faint."""
    fig, ax = plt.subplots(figsize=(7.5, 4.0))
    for label, histories in losses.items():
        color = None
        for h in histories:
            (line,) = ax.plot(np.arange(1, len(h) + 1), h, alpha=0.25,
                              color=color, linewidth=0.8)
            color = line.get_color()
        shortest = min(len(h) for h in histories)
        mean = np.mean([h[:shortest] for h in histories], axis=0)
        ax.plot(np.arange(1, shortest + 1), mean, color=color, label=label)
    ax.set_xscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("objective")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_figures(out_dir, report, losses: dict) -> None:
    out = Path(out_dir) / "figures"
    out.mkdir(parents=True, exist_ok=True)
    band_chart(report, out / "band_nmse.png")
    if losses:
        loss_chart(losses, out / "training_loss.png")
