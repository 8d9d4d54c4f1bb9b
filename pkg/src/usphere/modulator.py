"""Transmit side: band-limit, amplitude-modulate and combine channels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_dsp import AudioBuffer, ContractError, design_lowpass, filter

MIN_LOWER_EDGE_HZ = 22000.0
MIN_GUARD_HZ = 2000.0
MAX_CHANNELS = 8
DEFAULT_MOD_INDEX = 0.9
COMPOSITE_CEILING_DBFS = -1.0


class OvermodulationError(ValueError):
    def __init__(self, peak: float, mod_index: float, channel: int | None = None):
        where = f"channel {channel}: " if channel is not None else ""
        super().__init__(f"{where}overmodulation, k_a * peak = {mod_index} * {peak:.4f} = "
                         f"{mod_index * peak:.4f} > 1")
        self.peak = peak
        self.mod_index = mod_index
        self.channel = channel


@dataclass(frozen=True)
class ChannelSpec:
    carrier_hz: float
    audio_bw_hz: float = 4000.0
    mod_index: float = DEFAULT_MOD_INDEX
    gain: float = 1.0

    @property
    def band(self) -> tuple[float, float]:
        return self.carrier_hz - self.audio_bw_hz, self.carrier_hz + self.audio_bw_hz

    def violations(self, rate_hz: int) -> list[str]:
        problems = []
        if self.carrier_hz <= 0 or self.audio_bw_hz <= 0:
            problems.append("carrier and audio bandwidth must be positive")
        if not 0 < self.mod_index <= 1:
            problems.append(f"mod_index {self.mod_index} outside (0, 1]")
        if not 0 < self.gain <= 1:
            problems.append(f"gain {self.gain} outside (0, 1]")
        lo, hi = self.band
        if lo < MIN_LOWER_EDGE_HZ:
            problems.append(f"lower sideband edge {lo:g} Hz below {MIN_LOWER_EDGE_HZ:g} Hz")
        if hi >= rate_hz / 2:
            problems.append(f"upper sideband {hi:g} Hz exceeds Nyquist {rate_hz / 2:g} Hz")
        return problems


@dataclass(frozen=True)
class ChannelPlan:
    channels: tuple = ()
    transmit_rate_hz: int = 96000

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))


@dataclass(frozen=True)
class Violation:
    channels: tuple
    message: str

    def __str__(self):
        idx = ", ".join(str(i) for i in self.channels)
        return f"channel(s) {idx}: {self.message}"


def validate_plan(plan: ChannelPlan) -> list[Violation]:
    """Every broken plan rule, with the channel indices involved. Empty means legal."""
    found = []
    if not plan.channels:
        found.append(Violation((), "plan has no channels"))
    if len(plan.channels) > MAX_CHANNELS:
        found.append(Violation(tuple(range(len(plan.channels))), f"more than {MAX_CHANNELS} channels"))
    for i, spec in enumerate(plan.channels):
        for problem in spec.violations(plan.transmit_rate_hz):
            found.append(Violation((i,), problem))
    for i, a in enumerate(plan.channels):
        for j in range(i + 1, len(plan.channels)):
            b = plan.channels[j]
            low, high = (a, b) if a.carrier_hz <= b.carrier_hz else (b, a)
            guard = high.band[0] - low.band[1]
            if guard < MIN_GUARD_HZ:
                found.append(Violation((i, j), f"guard band {guard:g} Hz < required {MIN_GUARD_HZ:g} Hz "
                                              f"(bands {low.band[0]:g}-{low.band[1]:g} and "
                                              f"{high.band[0]:g}-{high.band[1]:g} Hz)"))
    return found


def prefilter(audio: AudioBuffer, cutoff_hz: float = 4000.0, order: int = 8) -> AudioBuffer:
    """Butterworth band-limit applied before modulation."""
    if audio.channels != 1:
        raise ContractError(f"prefilter expects mono audio, got {audio.channels} channels")
    return filter(design_lowpass(cutoff_hz, order, audio.sample_rate_hz), audio)


def peak_normalize(audio: AudioBuffer, peak: float = 1.0) -> AudioBuffer:
    current = float(np.max(np.abs(audio.samples)))
    if current == 0.0:
        return audio
    return audio.with_samples(audio.samples * (peak / current))


def carrier(n: int, carrier_hz: float, rate_hz: int, phase_rad: float = 0.0) -> np.ndarray:
    """Direct cosine, phase 0 at sample 0."""
    return np.cos(2 * np.pi * carrier_hz * np.arange(n) / rate_hz + phase_rad)


def am_modulate(audio: AudioBuffer, spec: ChannelSpec, channel: int | None = None) -> AudioBuffer:
    """``(1 + k_a x[n]) cos(2 pi f_c n / fs)``; rejects envelopes that would go negative."""
    if audio.channels != 1:
        raise ContractError(f"am_modulate expects mono audio, got {audio.channels} channels")
    problems = spec.violations(audio.sample_rate_hz)
    if problems:
        raise ContractError("; ".join(problems))
    x = audio.mono
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if spec.mod_index * peak > 1.0:
        raise OvermodulationError(peak, spec.mod_index, channel)
    envelope = 1.0 + spec.mod_index * x
    y = envelope * carrier(len(x), spec.carrier_hz, audio.sample_rate_hz)
    return AudioBuffer(y, audio.sample_rate_hz)


@dataclass
class Composite:
    """Composite transmit waveform and the factor applied to keep it in range."""

    buffer: AudioBuffer
    normalization_factor: float = 1.0
    raw_peak: float = 0.0
    per_channel: list = field(default_factory=list)


def compose(channel_audios, plan: ChannelPlan, pad: bool = False) -> Composite:
    """Sum the gain-weighted modulated channels; peak-normalize to -1 dBFS only if the sum clips."""
    problems = validate_plan(plan)
    if problems:
        raise ContractError("illegal channel plan: " + "; ".join(str(p) for p in problems))
    audios = list(channel_audios)
    if len(audios) != len(plan.channels):
        raise ContractError(f"{len(audios)} audio inputs for {len(plan.channels)} channels")
    for i, audio in enumerate(audios):
        if audio.sample_rate_hz != plan.transmit_rate_hz:
            raise ContractError(f"channel {i} audio at {audio.sample_rate_hz} Hz, plan needs "
                                f"{plan.transmit_rate_hz} Hz")
    lengths = [a.frames for a in audios]
    n = max(lengths)
    if len(set(lengths)) > 1:
        if not pad:
            raise ContractError(f"channel lengths differ {lengths}; set pad to zero-pad shorter inputs")
        audios = [a.with_samples(np.pad(a.samples, ((0, n - a.frames), (0, 0)))) for a in audios]

    total = np.zeros(n)
    modulated = []
    for i, (audio, spec) in enumerate(zip(audios, plan.channels)):
        y = am_modulate(audio, spec, channel=i).mono
        modulated.append(y)
        total = total + spec.gain * y

    raw_peak = float(np.max(np.abs(total))) if n else 0.0
    factor = 1.0
    if raw_peak > 1.0:
        factor = 10 ** (COMPOSITE_CEILING_DBFS / 20) / raw_peak
        total = total * factor
    buf = AudioBuffer(total, plan.transmit_rate_hz, {"normalization_factor": factor})
    return Composite(buf, factor, raw_peak, modulated)
