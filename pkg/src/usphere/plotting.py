"""Spectrum figures written next to the report's CSV sidecars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import FLOOR_DB  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.9,
    "font.size": 9,
}

# shaded reference bands, Hz
AUDIBLE = (20.0, 20000.0)


def plot_spectrum(rows, path, title: str = "", bands=(), log_x: bool = False) -> Path:
    """Magnitude spectrum (freq, dBFS) as a PNG; ``bands`` are (lo, hi, label) overlays."""
    path = Path(path)
    freqs = [r[0] for r in rows]
    mags = [r[1] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([f / 1000 for f in freqs], mags, color="0.15")
        for lo, hi, label in bands:
            ax.axvspan(lo / 1000, hi / 1000, alpha=0.12, label=label)
        if bands:
            ax.legend(loc="upper right", frameon=False)
        if log_x:
            ax.set_xscale("log")
            ax.set_xlim(max(freqs[1], 0.01) / 1000, freqs[-1] / 1000)
        else:
            ax.set_xlim(0, freqs[-1] / 1000)
        ax.set_ylim(FLOOR_DB, 5)
        ax.set_xlabel("frequency [kHz]")
        ax.set_ylabel("magnitude [dBFS]")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_report_spectra(spectra: dict, report_path, channel_bands=()) -> list[Path]:
    """One PNG per spectrum, named like the CSV sidecars (``<stem>.<name>.png``)."""
    report_path = Path(report_path)
    written = []
    for name, rows in sorted(spectra.items()):
        bands = [(*AUDIBLE, "audible")]
        if name.startswith("composite") or name.startswith("ear"):
            bands += [(lo, hi, f"ch{i}") for i, (lo, hi) in enumerate(channel_bands)]
        out = report_path.with_name(f"{report_path.stem}.{name}.png")
        written.append(plot_spectrum(rows, out, title=name, bands=bands))
    return written
