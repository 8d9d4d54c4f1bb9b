"""Filter design, filtering, rectification, resampling, gain and limiting.

Everything downstream (modulator, channel simulator, receiver) is built from
these primitives.  Filters are cascades of second-order sections run in
direct form II transposed with explicit state, so a signal processed in
blocks gives the same samples as one processed in a single call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.ndimage import minimum_filter1d
from scipy.optimize import least_squares


MIN_RATE_HZ = 8000
MAX_RATE_HZ = 384000


class InvalidDesignError(ValueError):
    """Filter or channel parameters that cannot be realized."""


class ContractError(ValueError):
    """Inputs that violate an operation's preconditions (rates, shapes)."""


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Sampled waveform, shape ``(frames, channels)``, full scale +-1.0."""

    samples: np.ndarray
    sample_rate_hz: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.samples, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[1] < 1:
            raise ContractError(f"samples must be 1-D or (frames, channels), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ContractError("samples contain NaN or Inf")
        rate = int(self.sample_rate_hz)
        if rate != self.sample_rate_hz or not MIN_RATE_HZ <= rate <= MAX_RATE_HZ:
            raise ContractError(f"sample rate {self.sample_rate_hz} outside {MIN_RATE_HZ}..{MAX_RATE_HZ}")
        object.__setattr__(self, "samples", data)
        object.__setattr__(self, "sample_rate_hz", rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[1]

    @property
    def frames(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.frames / self.sample_rate_hz

    @property
    def mono(self) -> np.ndarray:
        """First channel as a 1-D array."""
        return self.samples[:, 0]

    def channel(self, index: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[:, index], self.sample_rate_hz)

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate_hz, dict(self.meta))

    @classmethod
    def zeros(cls, frames: int, sample_rate_hz: int, channels: int = 1) -> "AudioBuffer":
        return cls(np.zeros((frames, channels)), sample_rate_hz)

    @classmethod
    def stack(cls, buffers) -> "AudioBuffer":
        """Join equal-length mono buffers into one multi-channel buffer."""
        rates = {b.sample_rate_hz for b in buffers}
        if len(rates) != 1:
            raise ContractError(f"cannot stack buffers with rates {sorted(rates)}")
        lengths = {b.frames for b in buffers}
        if len(lengths) != 1:
            raise ContractError(f"cannot stack buffers with lengths {sorted(lengths)}")
        return cls(np.hstack([b.samples for b in buffers]), rates.pop())


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections ``[b0, b1, b2, 1, a1, a2]``, one row per section."""

    sections: np.ndarray
    design_sample_rate_hz: int
    description: str = ""

    def __post_init__(self):
        sos = np.array(self.sections, dtype=np.float64, ndmin=2)
        if sos.shape[1] == 5:
            sos = np.insert(sos, 3, 1.0, axis=1)
        if sos.ndim != 2 or sos.shape[1] != 6:
            raise InvalidDesignError(f"sections must have 5 or 6 coefficients, got shape {sos.shape}")
        if not np.allclose(sos[:, 3], 1.0):
            a0 = sos[:, 3:4]
            sos = sos / a0
        object.__setattr__(self, "sections", sos)

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    def pole_radii(self) -> np.ndarray:
        """Largest pole magnitude of each section."""
        radii = []
        for _, _, _, a0, a1, a2 in self.sections:
            radii.append(np.max(np.abs(np.roots([a0, a1, a2]))) if a2 != 0 or a1 != 0 else 0.0)
        return np.array(radii)

    def is_stable(self) -> bool:
        return bool(np.all(self.pole_radii() < 1.0))

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response at the given frequencies."""
        _, h = signal.sosfreqz(self.sections, worN=np.atleast_1d(np.asarray(freqs_hz, dtype=float)),
                               fs=self.design_sample_rate_hz)
        return h

    def gain_db(self, freqs_hz) -> np.ndarray:
        return 20 * np.log10(np.maximum(np.abs(self.response(freqs_hz)), 1e-300))

    def initial_state(self, channels: int = 1) -> np.ndarray:
        return np.zeros((self.n_sections, 2, channels))

    def then(self, other: "BiquadCascade") -> "BiquadCascade":
        if other.design_sample_rate_hz != self.design_sample_rate_hz:
            raise ContractError("cannot chain cascades designed at different rates")
        return BiquadCascade(np.vstack([self.sections, other.sections]), self.design_sample_rate_hz,
                             f"{self.description}+{other.description}")


IDENTITY_SECTION = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]


def identity_cascade(sample_rate_hz: int) -> BiquadCascade:
    return BiquadCascade([IDENTITY_SECTION], sample_rate_hz, "identity")


def _check_rate(sample_rate_hz):
    if not MIN_RATE_HZ <= sample_rate_hz <= MAX_RATE_HZ:
        raise InvalidDesignError(f"sample rate {sample_rate_hz} outside {MIN_RATE_HZ}..{MAX_RATE_HZ}")


def _checked(cascade: BiquadCascade) -> BiquadCascade:
    if not cascade.is_stable():
        raise InvalidDesignError(f"design {cascade.description!r} produced an unstable section")
    return cascade


def design_lowpass(cutoff_hz: float, order: int, sample_rate_hz: int) -> BiquadCascade:
    """Butterworth low-pass, -3 dB at ``cutoff_hz``."""
    _check_rate(sample_rate_hz)
    nyquist = sample_rate_hz / 2
    if not 0 < cutoff_hz < nyquist:
        raise InvalidDesignError(f"cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz")
    if order % 2 or not 2 <= order <= 16:
        raise InvalidDesignError(f"order must be even in 2..16, got {order}")
    sos = signal.butter(order, cutoff_hz, btype="lowpass", fs=sample_rate_hz, output="sos")
    return _checked(BiquadCascade(sos, sample_rate_hz, f"butter{order}-lp-{cutoff_hz:g}"))


def design_chebyshev2_lowpass(stop_hz: float, stop_atten_db: float, order: int,
                              sample_rate_hz: int) -> BiquadCascade:
    """Chebyshev II low-pass whose stopband starts at ``stop_hz``."""
    _check_rate(sample_rate_hz)
    if not 0 < stop_hz < sample_rate_hz / 2:
        raise InvalidDesignError(f"stop edge {stop_hz} Hz must lie below Nyquist")
    sos = signal.cheby2(order, stop_atten_db, stop_hz, btype="lowpass", fs=sample_rate_hz, output="sos")
    return _checked(BiquadCascade(sos, sample_rate_hz, f"cheby2-lp-{stop_hz:g}"))


def bandpass_stop_edges(center_hz: float, half_bw_hz: float, sample_rate_hz: int) -> tuple[float, float]:
    """Stopband edges geometrically centred on ``center_hz`` after prewarping.

    The bilinear band-pass transform is symmetric in ``tan(pi f / fs)``, so the
    edges are placed as a prewarped geometric pair with both lying inside
    ``center +- 1.5 * half_bw``.
    """
    def warp(f):
        return math.tan(math.pi * f / sample_rate_hz)

    def unwarp(w):
        return math.atan(w) * sample_rate_hz / math.pi

    w0 = warp(center_hz)
    lo, hi = center_hz - 1.5 * half_bw_hz, center_hz + 1.5 * half_bw_hz
    hi_for_lo = unwarp(w0 * w0 / warp(lo))
    if hi_for_lo <= hi:
        return lo, hi_for_lo
    return unwarp(w0 * w0 / warp(hi)), hi


def design_chebyshev2_bandpass(center_hz: float, half_bw_hz: float, stop_atten_db: float = 60.0,
                               order: int = 8, sample_rate_hz: int = 192000) -> BiquadCascade:
    """Chebyshev II band-pass used to pick one ultrasonic channel.

    ``order`` is the prototype order; the band-pass has ``order`` sections.
    Attenuation is at least ``stop_atten_db`` outside ``center +- 1.5*half_bw``.
    """
    _check_rate(sample_rate_hz)
    nyquist = sample_rate_hz / 2
    if half_bw_hz <= 0 or center_hz - half_bw_hz <= 0:
        raise InvalidDesignError(f"band {center_hz}+-{half_bw_hz} Hz reaches DC")
    if center_hz + half_bw_hz >= nyquist:
        raise InvalidDesignError(f"band {center_hz}+-{half_bw_hz} Hz exceeds Nyquist {nyquist} Hz")
    if stop_atten_db < 40:
        raise InvalidDesignError(f"stopband attenuation must be >= 40 dB, got {stop_atten_db}")
    if not 2 <= order <= 16:
        raise InvalidDesignError(f"order must be in 2..16, got {order}")
    lo, hi = bandpass_stop_edges(center_hz, half_bw_hz, sample_rate_hz)
    if lo <= 0 or hi >= nyquist:
        raise InvalidDesignError(f"stop edges {lo:.0f}..{hi:.0f} Hz do not fit in (0, {nyquist}) Hz")
    sos = signal.cheby2(order, stop_atten_db, [lo, hi], btype="bandpass", fs=sample_rate_hz, output="sos")
    return _checked(BiquadCascade(sos, sample_rate_hz, f"cheby2-bp-{center_hz / 1000:g}k"))


def design_peaking_eq(center_hz: float, gain_db: float, q: float, sample_rate_hz: int) -> BiquadCascade:
    """Bell (peaking) equalizer, RBJ cookbook form."""
    _check_rate(sample_rate_hz)
    if not 0 < center_hz < sample_rate_hz / 2:
        raise InvalidDesignError(f"center {center_hz} Hz must lie in (0, Nyquist)")
    if abs(gain_db) > 24:
        raise InvalidDesignError(f"|gain| must be <= 24 dB, got {gain_db}")
    if not 0.1 <= q <= 20:
        raise InvalidDesignError(f"q must be in [0.1, 20], got {q}")
    amp = 10 ** (gain_db / 40)
    w0 = 2 * math.pi * center_hz / sample_rate_hz
    alpha = math.sin(w0) / (2 * q)
    cos_w0 = math.cos(w0)
    b = [1 + alpha * amp, -2 * cos_w0, 1 - alpha * amp]
    a = [1 + alpha / amp, -2 * cos_w0, 1 - alpha / amp]
    section = [c / a[0] for c in b] + [1.0] + [c / a[0] for c in a[1:]]
    return _checked(BiquadCascade([section], sample_rate_hz, f"peq-{center_hz:g}-{gain_db:+g}dB"))


def allpass_section(radius: float, freq_hz: float, sample_rate_hz: int) -> list:
    """Second-order all-pass with poles at ``radius * exp(+-j 2 pi f / fs)``."""
    a1 = -2 * radius * math.cos(2 * math.pi * freq_hz / sample_rate_hz)
    a2 = radius * radius
    return [a2, a1, 1.0, 1.0, a1, a2]


def unwrapped_phase(cascade: BiquadCascade, freqs_hz) -> np.ndarray:
    """Phase response unwrapped along ``freqs_hz`` (which should start near 0 Hz)."""
    return np.unwrap(np.angle(cascade.response(freqs_hz)))


def design_allpass_equalizer(freqs_hz, phase_rad, weights, n_sections: int,
                             sample_rate_hz: int) -> tuple[BiquadCascade, float]:
    """Fit all-pass sections so ``phase_rad`` plus their phase is as linear as possible.

    Weighted least squares over pole radius and angle per section plus a free
    bulk delay. Returns the cascade and the fitted bulk delay in seconds.
    """
    f = np.asarray(freqs_hz, dtype=float)
    target = np.asarray(phase_rad, dtype=float)
    sw = np.sqrt(np.asarray(weights, dtype=float))
    if n_sections == 0:
        return identity_cascade(sample_rate_hz), 0.0

    def sections(p):
        # pole distance from the unit circle and pole frequency, both on a log scale
        return np.array([allpass_section(1 - math.exp(p[2 * i]), math.exp(p[2 * i + 1]), sample_rate_hz)
                         for i in range(n_sections)])

    def residual(p):
        sos = sections(p[:-1])
        _, h = signal.sosfreqz(sos, worN=f, fs=sample_rate_hz)
        return sw * (target + np.unwrap(np.angle(h)) + 2 * np.pi * f * p[-1])

    f_hi = float(f.max())
    p0, lo, hi = [], [], []
    for fk in np.geomspace(f_hi / 15, f_hi * 0.9, n_sections):
        p0 += [math.log(2 * math.pi * fk / sample_rate_hz * 0.7), math.log(fk)]
        lo += [math.log(1e-5), math.log(1.0)]
        hi += [math.log(0.5), math.log(sample_rate_hz / 2 * 0.99)]
    p0.append(0.0)
    lo.append(-1.0)
    hi.append(1.0)
    p0 = np.clip(p0, lo, hi)
    fit = least_squares(residual, p0, bounds=(lo, hi), method="trf")
    return _checked(BiquadCascade(sections(fit.x[:-1]), sample_rate_hz, f"allpass{n_sections}")), float(fit.x[-1])


def filter_block(cascade: BiquadCascade, buf: AudioBuffer, state: np.ndarray | None = None):
    """Filter one block, returning ``(output, new_state)``."""
    if buf.sample_rate_hz != cascade.design_sample_rate_hz:
        raise ContractError(f"buffer rate {buf.sample_rate_hz} Hz does not match cascade design rate "
                            f"{cascade.design_sample_rate_hz} Hz")
    if state is None:
        state = cascade.initial_state(buf.channels)
    out, new_state = signal.sosfilt(cascade.sections, buf.samples, axis=0, zi=state)
    return buf.with_samples(out), new_state


def filter(cascade: BiquadCascade, buf: AudioBuffer) -> AudioBuffer:  # noqa: A001
    """Run ``buf`` through ``cascade`` from zero initial state."""
    return filter_block(cascade, buf)[0]


def filter_zero_phase(cascade: BiquadCascade, buf: AudioBuffer) -> AudioBuffer:
    """Forward then time-reversed pass: squared magnitude, no phase shift."""
    forward = filter(cascade, buf)
    backward = filter(cascade, forward.with_samples(forward.samples[::-1]))
    return buf.with_samples(backward.samples[::-1])


def rectify_abs(buf: AudioBuffer) -> AudioBuffer:
    return buf.with_samples(np.abs(buf.samples))


def design_dc_block(cutoff_hz: float, sample_rate_hz: int) -> BiquadCascade:
    if not 1 <= cutoff_hz <= 100:
        raise InvalidDesignError(f"DC-block cutoff must be in [1, 100] Hz, got {cutoff_hz}")
    sos = signal.butter(2, cutoff_hz, btype="highpass", fs=sample_rate_hz, output="sos")
    return _checked(BiquadCascade(sos, sample_rate_hz, f"dcblock-{cutoff_hz:g}"))


def dc_block(buf: AudioBuffer, cutoff_hz: float = 20.0) -> AudioBuffer:
    """Second-order Butterworth high-pass; removes DC and sub-audio drift."""
    return filter(design_dc_block(cutoff_hz, buf.sample_rate_hz), buf)


def scale(buf: AudioBuffer, gain: float) -> AudioBuffer:
    if not math.isfinite(gain):
        raise ContractError(f"gain must be finite, got {gain}")
    return buf.with_samples(buf.samples * gain)


# -- limiter -----------------------------------------------------------------

@dataclass(frozen=True)
class LimiterParams:
    threshold_dbfs: float = -1.0
    attack_s: float = 0.001
    release_s: float = 0.050
    lookahead_s: float = 0.001

    def __post_init__(self):
        if self.threshold_dbfs > 0:
            raise ContractError(f"threshold must be <= 0 dBFS, got {self.threshold_dbfs}")
        if self.attack_s <= 0 or self.release_s <= 0:
            raise ContractError("attack and release must be positive")
        if self.attack_s >= self.release_s:
            raise ContractError(f"attack ({self.attack_s}s) must be shorter than release ({self.release_s}s)")
        if not 0 <= self.lookahead_s <= 0.01:
            raise ContractError(f"lookahead must be in [0, 0.01] s, got {self.lookahead_s}")

    @property
    def threshold(self) -> float:
        return 10 ** (self.threshold_dbfs / 20)

    def window(self, sample_rate_hz: int) -> int:
        """Gain-ramp length in samples; the output is delayed by ``window - 1``."""
        return int(round(min(self.attack_s, self.lookahead_s) * sample_rate_hz)) + 1


class Limiter:
    """Lookahead peak limiter with linked gain across channels.

    The required gain ``min(1, T/|x|)`` is min-held over the lookahead window,
    released with a one-pole recovery, then box-smoothed over the same window.
    Every sample that lands under the box was already at or below the gain
    needed for the delayed peak, so the output can never exceed the threshold.
    """

    def __init__(self, params: LimiterParams, sample_rate_hz: int, channels: int = 1):
        self.params = params
        self.sample_rate_hz = sample_rate_hz
        self.channels = channels
        self.window = params.window(sample_rate_hz)
        self.delay = self.window - 1
        self.release_coeff = math.exp(-1.0 / (params.release_s * sample_rate_hz))
        self.reset()

    def reset(self):
        w = self.window
        self._req_hist = np.ones(w - 1)
        self._held_hist = np.ones(w - 1)
        self._release_state = 1.0
        self._delay_line = np.zeros((self.delay, self.channels))

    def _release(self, held: np.ndarray) -> np.ndarray:
        out = held.copy()
        below = np.flatnonzero(held < 1.0)
        r = self._release_state
        if r >= 1.0 and below.size == 0:
            return out
        start = 0 if r < 1.0 else int(below[0])
        k = 1.0 - self.release_coeff
        values = held.tolist()
        for n in range(start, len(values)):
            h = values[n]
            if h < r:
                r = h
            else:
                r = r + k * (h - r)
            values[n] = r
        out[start:] = values[start:]
        self._release_state = r
        return out

    def process(self, buf: AudioBuffer) -> AudioBuffer:
        x = buf.samples
        if x.shape[1] != self.channels:
            raise ContractError(f"limiter configured for {self.channels} channels, got {x.shape[1]}")
        n = x.shape[0]
        if n == 0:
            return buf
        w = self.window
        peak = np.max(np.abs(x), axis=1)
        thr = self.params.threshold
        req = np.ones(n)
        over = peak > thr
        req[over] = thr / peak[over]

        ext_req = np.concatenate([self._req_hist, req])
        held = minimum_filter1d(ext_req, size=w, origin=(w - 1) // 2, mode="nearest")[w - 1:] if w > 1 else req
        released = self._release(held)
        ext_rel = np.concatenate([self._held_hist, released])
        if w > 1:
            gain = np.lib.stride_tricks.sliding_window_view(ext_rel, w).mean(axis=1)
        else:
            gain = released

        delayed = np.vstack([self._delay_line, x])
        out = delayed[:n] * gain[:, None]
        self._delay_line = delayed[n:]
        if w > 1:
            self._req_hist = ext_req[-(w - 1):]
            self._held_hist = ext_rel[-(w - 1):]
        return buf.with_samples(out)


def limit(buf: AudioBuffer, params: LimiterParams | None = None) -> AudioBuffer:
    """One-shot lookahead limiting; output delayed by the lookahead window."""
    params = params or LimiterParams()
    return Limiter(params, buf.sample_rate_hz, buf.channels).process(buf)


# -- 2x upsampling -------------------------------------------------------------

HALFBAND_TAPS = 191
HALFBAND_BETA = 9.0


def halfband_taps(numtaps: int = HALFBAND_TAPS, beta: float = HALFBAND_BETA) -> np.ndarray:
    """Kaiser-windowed sinc with cutoff at the old Nyquist (quarter of the new rate)."""
    if numtaps % 4 != 3:
        raise InvalidDesignError("half-band length must be 4k+3 so the centre tap is 0.5")
    taps = signal.firwin(numtaps, 0.5, window=("kaiser", beta))
    centre = numtaps // 2
    odd = (np.arange(numtaps) - centre) % 2 == 0
    taps[odd] = 0.0
    taps[centre] = 0.5
    return taps


def upsample_2x(buf: AudioBuffer) -> AudioBuffer:
    """Zero-insert by 2 and half-band low-pass; output is time-aligned with the input."""
    taps = 2.0 * halfband_taps()
    delay = (len(taps) - 1) // 2
    n_out = 2 * buf.frames
    y = signal.upfirdn(taps, buf.samples, up=2, axis=0)
    y = y[delay:delay + n_out]
    if y.shape[0] < n_out:
        y = np.vstack([y, np.zeros((n_out - y.shape[0], buf.channels))])
    return AudioBuffer(y, 2 * buf.sample_rate_hz, dict(buf.meta))


# -- fractional delay ----------------------------------------------------------

FRACTIONAL_DELAY_TAPS = 64


def fractional_delay_taps(frac: float, numtaps: int = FRACTIONAL_DELAY_TAPS, beta: float = 8.0) -> np.ndarray:
    """Kaiser-windowed sinc delaying by ``numtaps // 2 - 1 + frac`` samples."""
    centre = numtaps // 2 - 1 + frac
    offset = np.arange(numtaps) - centre
    half = numtaps / 2
    window = np.i0(beta * np.sqrt(np.clip(1 - (offset / half) ** 2, 0, None))) / np.i0(beta)
    h = np.sinc(offset) * window
    return h / h.sum()


def delay(buf: AudioBuffer, delay_samples: float) -> AudioBuffer:
    """Delay by a non-negative, possibly fractional number of samples (same length out)."""
    if delay_samples < 0:
        raise ContractError(f"delay must be non-negative, got {delay_samples}")
    whole = int(math.floor(delay_samples))
    frac = delay_samples - whole
    n = buf.frames
    if frac == 0.0:
        out = np.zeros_like(buf.samples)
        if whole < n:
            out[whole:] = buf.samples[:n - whole]
        return buf.with_samples(out)
    h = fractional_delay_taps(frac)
    base = FRACTIONAL_DELAY_TAPS // 2 - 1
    y = signal.oaconvolve(buf.samples, h[:, None], axes=0)
    out = np.zeros_like(buf.samples)
    # y[m] carries input delayed by base + frac; shift so total delay is whole + frac
    shift = whole - base
    if shift >= 0:
        take = y[:max(n - shift, 0)]
        out[shift:shift + len(take)] = take
    else:
        take = y[-shift:-shift + n]
        out[:len(take)] = take
    return buf.with_samples(out)
