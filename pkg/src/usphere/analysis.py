"""Measurements: spectra, band energy, alignment, ITD, crosstalk, reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import signal

from .core_dsp import AudioBuffer, ContractError

FLOOR_DB = -120.0
REPORT_SCHEMA = "usphere.report/1"


class UndefinedITDError(ValueError):
    """Cross-correlation has no peak, e.g. silent ears."""


def _db(power: float) -> float:
    return max(10 * math.log10(power), FLOOR_DB) if power > 0 else FLOOR_DB


def _mono(buf) -> np.ndarray:
    if isinstance(buf, AudioBuffer):
        return buf.samples.mean(axis=1) if buf.channels > 1 else buf.mono
    return np.asarray(buf, dtype=float)


def _welch(x: np.ndarray, rate: int, fft_size: int, scaling: str):
    nperseg = min(fft_size, len(x))
    return signal.welch(x, fs=rate, window="hann", nperseg=nperseg, noverlap=nperseg // 2,
                        detrend=False, scaling=scaling)


def spectrum(buf: AudioBuffer, fft_size: int = 8192, window: str = "hann") -> list[tuple[float, float]]:
    """One-sided Welch magnitude spectrum in dBFS; a full-scale sine reads 0 dBFS."""
    if window != "hann":
        raise ContractError(f"only the hann window is supported, got {window!r}")
    if fft_size < 1024 or fft_size & (fft_size - 1):
        raise ContractError(f"fft_size must be a power of two >= 1024, got {fft_size}")
    if buf.frames < fft_size:
        raise ContractError(f"buffer of {buf.frames} frames is shorter than fft_size {fft_size}")
    freqs, power = _welch(_mono(buf), buf.sample_rate_hz, fft_size, "spectrum")
    mag = 10 * np.log10(np.maximum(2 * power, 1e-300))
    mag = np.maximum(mag, FLOOR_DB)
    return list(zip(freqs.tolist(), mag.tolist()))


def band_energy(buf: AudioBuffer, f_lo: float, f_hi: float, fft_size: int = 8192) -> float:
    """Mean-square power inside ``[f_lo, f_hi)`` in dB re full scale (sine = -3 dBFS)."""
    nyquist = buf.sample_rate_hz / 2
    if not 0 <= f_lo < f_hi <= nyquist:
        raise ContractError(f"band ({f_lo}, {f_hi}) must satisfy 0 <= lo < hi <= {nyquist}")
    freqs, psd = _welch(_mono(buf), buf.sample_rate_hz, fft_size, "density")
    df = freqs[1] - freqs[0]
    inside = (freqs >= f_lo) & ((freqs < f_hi) | ((f_hi >= nyquist) & (freqs <= nyquist)))
    return _db(float(np.sum(psd[inside]) * df))


def rms_dbfs(buf) -> float:
    """Mean-square level in dBFS (full-scale sine = -3.01)."""
    x = _mono(buf)
    return _db(float(np.mean(x ** 2)))


def _normalized_xcorr(a: np.ndarray, b: np.ndarray, max_lag: int):
    """Cosine similarity of ``a[n]`` and ``b[n + lag]`` over their overlap, per lag."""
    full = signal.correlate(b, a, mode="full", method="fft")
    zero = len(a) - 1
    lags = np.arange(-max_lag, max_lag + 1)
    num = full[zero + lags]
    ca = np.concatenate([[0.0], np.cumsum(a * a)])
    cb = np.concatenate([[0.0], np.cumsum(b * b)])
    # overlap of a[n] with b[n + lag]
    a_lo = np.maximum(0, -lags)
    a_hi = np.maximum(np.minimum(len(a), len(b) - lags), a_lo)
    ea = ca[a_hi] - ca[a_lo]
    eb = cb[np.clip(a_hi + lags, 0, len(b))] - cb[np.clip(a_lo + lags, 0, len(b))]
    eb = np.where(a_hi > a_lo, eb, 0.0)
    denom = np.sqrt(ea * eb)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    return lags, corr, num, ea


def aligned_similarity(a: AudioBuffer, b: AudioBuffer, max_lag_s: float = 0.05):
    """Best normalized correlation of ``b`` against a delayed, scaled ``a``.

    Returns ``(correlation, lag_samples, gain)`` where ``b[n + lag] ~ gain * a[n]``.
    """
    if a.sample_rate_hz != b.sample_rate_hz:
        raise ContractError(f"rates differ: {a.sample_rate_hz} vs {b.sample_rate_hz}")
    rate = a.sample_rate_hz
    x, y = _mono(a), _mono(b)
    max_lag = int(round(max_lag_s * rate))
    overlap = min(len(x), len(y)) - max_lag
    if overlap < 0.5 * rate:
        raise ContractError(f"overlap of {overlap} samples is under 0.5 s at {rate} Hz")
    lags, corr, num, ea = _normalized_xcorr(x, y, max_lag)
    best = int(np.argmax(corr))
    gain = float(num[best] / ea[best]) if ea[best] > 0 else 0.0
    return float(np.clip(corr[best], -1.0, 1.0)), int(lags[best]), gain


def measure_itd(left: AudioBuffer, right: AudioBuffer, max_lag_s: float = 0.001) -> float:
    """Interaural time difference in seconds, positive when the right ear leads."""
    if left.sample_rate_hz != right.sample_rate_hz or left.frames != right.frames:
        raise ContractError("left and right must share rate and length")
    rate = left.sample_rate_hz
    x, y = _mono(left), _mono(right)
    if not np.any(x) or not np.any(y):
        raise UndefinedITDError("silent ear signal: correlation has no peak")
    max_lag = int(round(max_lag_s * rate))
    lags, corr, _, _ = _normalized_xcorr(x, y, max_lag)
    if np.ptp(corr) < 1e-9:
        raise UndefinedITDError("flat cross-correlation")
    i = int(np.argmax(corr))
    offset = 0.0
    if 0 < i < len(corr) - 1:
        c0, c1, c2 = corr[i - 1], corr[i], corr[i + 1]
        curvature = c0 - 2 * c1 + c2
        if curvature < 0:
            offset = 0.5 * (c0 - c2) / curvature
    # right lagging left means the left ear leads
    return float(-(lags[i] + offset) / rate)


def remove_program(decoded: AudioBuffer, program: AudioBuffer, max_lag_s: float = 0.05) -> AudioBuffer:
    """``decoded`` minus its best delayed, scaled copy of ``program``."""
    _, lag, gain = aligned_similarity(program, decoded, max_lag_s)
    x, y = _mono(program), _mono(decoded)
    shifted = np.zeros_like(y)
    if lag >= 0:
        m = min(len(y) - lag, len(x))
        shifted[lag:lag + m] = x[:m]
    else:
        m = min(len(y), len(x) + lag)
        shifted[:m] = x[-lag:-lag + m]
    return decoded.with_samples(y - gain * shifted)


def crosstalk(decoded_target: AudioBuffer, decoded_other_solo: AudioBuffer, band=None,
              target_program: AudioBuffer | None = None) -> float:
    """Level of the other channel's program inside the target decode, in dB.

    With ``band=(lo, hi)`` this is the band-energy difference over that band.
    Otherwise the target is projected onto the other program's own decode and
    the projection's power is compared with that decode's power. Passing the
    target's own ``target_program`` removes it first, so chance correlation
    between two broadband programs does not read as leakage.
    """
    if band is not None:
        leaked = band_energy(decoded_target, *band)
        direct = band_energy(decoded_other_solo, *band)
        return max(leaked - direct, FLOOR_DB) if direct > FLOOR_DB else FLOOR_DB
    if target_program is not None:
        decoded_target = remove_program(decoded_target, target_program)
    t, o = _mono(decoded_target), _mono(decoded_other_solo)
    n = min(len(t), len(o))
    t, o = t[:n], o[:n]
    energy = float(np.dot(o, o))
    if energy == 0.0:
        return FLOOR_DB
    coeff = float(np.dot(t, o)) / energy
    return _db(coeff * coeff)


def find_peak(spec, f_lo: float, f_hi: float) -> tuple[float, float]:
    """Frequency and level of the largest bin inside ``[f_lo, f_hi]``."""
    best = max((p for p in spec if f_lo <= p[0] <= f_hi), key=lambda p: p[1])
    return best


HANN_ENBW_BINS = 1.5


def line_level(spec, f_lo: float, f_hi: float, lobe_bins: int = 3) -> tuple[float, float]:
    """Frequency and dBFS level of the strongest line in ``[f_lo, f_hi]``.

    Sums the power across the Hann main lobe and divides by the window's
    noise bandwidth, so the reading does not depend on where the line falls
    between bins (a full-scale sine reads 0 dBFS).
    """
    freqs = np.array([p[0] for p in spec])
    power = 10 ** (np.array([p[1] for p in spec]) / 10)
    sel = np.nonzero((freqs >= f_lo) & (freqs <= f_hi))[0]
    if not sel.size:
        raise ContractError(f"no spectrum bins in [{f_lo}, {f_hi}] Hz")
    k = int(sel[np.argmax(power[sel])])
    lobe = power[max(k - lobe_bins, 0):k + lobe_bins + 1]
    return float(freqs[k]), _db(float(np.sum(lobe)) / HANN_ENBW_BINS)


def occupied_lower_edge(spec, carrier_hz: float, search_from_hz: float, fraction: float = 0.99,
                        carrier_guard_hz: float = 60.0) -> float:
    """Lower edge of the band holding ``fraction`` of the lower-sideband power.

    Power is accumulated upward from ``search_from_hz`` to just below the
    carrier line; the edge is where the running total first reaches
    ``1 - fraction`` of it.
    """
    freqs = np.array([p[0] for p in spec])
    power = 10 ** (np.array([p[1] for p in spec]) / 10)
    sel = (freqs >= search_from_hz) & (freqs < carrier_hz - carrier_guard_hz)
    if not np.any(sel):
        raise ContractError("no spectrum bins between the search start and the carrier")
    running = np.cumsum(power[sel])
    if running[-1] <= 0:
        return carrier_hz
    idx = int(np.searchsorted(running / running[-1], 1.0 - fraction))
    return float(freqs[sel][idx])


# -- reports -------------------------------------------------------------------

@dataclass
class AnalysisReport:
    correlation: float | None = None
    lag_samples: int | None = None
    snr_db: float | None = None
    leakage_audible_db: float | None = None
    crosstalk_db: float | None = None
    itd_error_samples: float | None = None
    normalization_factor: float | None = None
    config_echo: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    gates: list = field(default_factory=list)
    spectra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.correlation is not None and not -1.0 <= self.correlation <= 1.0:
            raise ContractError(f"correlation {self.correlation} outside [-1, 1]")
        for name in ("snr_db", "leakage_audible_db", "crosstalk_db"):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise ContractError(f"{name} must be finite, got {value}")

    @property
    def passed(self) -> bool:
        return all(g["passed"] for g in self.gates)


def _clean(value):
    """Round floats so reports diff cleanly and JSON never sees NaN."""
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return float(f"{value:.10g}")
    if isinstance(value, (np.floating, np.integer)):
        return _clean(value.item())
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def write_report(report: AnalysisReport, path, timestamp: bool = True) -> Path:
    """Write ``report`` as indented JSON; spectra go to CSV sidecars next to it.

    Each entry in ``report.spectra`` (name -> list of (freq, dB)) becomes
    ``<stem>.<name>.csv`` and the JSON lists the sidecar file names.
    """
    path = Path(path)
    body = asdict(report)
    spectra = body.pop("spectra")
    body["passed"] = report.passed
    body["sidecars"] = {}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        for name, rows in sorted(spectra.items()):
            sidecar = path.with_name(f"{path.stem}.{name}.csv")
            with sidecar.open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["freq_hz", "magnitude_dbfs"])
                for freq, level in rows:
                    writer.writerow([f"{freq:.4f}", f"{level:.4f}"])
            body["sidecars"][name] = sidecar.name
        doc = {"schema": REPORT_SCHEMA,
               "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds") if timestamp else None}
        doc.update(_clean(body))
        path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
    return path


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
