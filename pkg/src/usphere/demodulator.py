"""Receive side: pick one ultrasonic channel and turn it back into audio.

The main path is an envelope detector (bell EQ, Chebyshev II band-pass,
full-wave rectifier, DC block, low-pass, gain, limiter) and needs no carrier
phase. A coherent demodulator with a known carrier phase is kept as a
reference for checking the envelope path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .channel_sim import EAR_RATE_HZ, TRANSMIT_RATE_HZ, EarSignals
from .core_dsp import (AudioBuffer, ContractError, InvalidDesignError, Limiter, LimiterParams,
                       design_allpass_equalizer, design_chebyshev2_bandpass, design_chebyshev2_lowpass,
                       design_dc_block, design_lowpass, design_peaking_eq, filter, filter_block,
                       filter_zero_phase, unwrapped_phase)
from .modulator import ChannelSpec, carrier

TRANSPARENCY_STOP_HZ = 22000.0


def unity_amplification(mod_index: float) -> float:
    """``A`` that makes the envelope path's overall gain one: pi / (4 k_a)."""
    return math.pi / (4 * mod_index)


@dataclass(frozen=True)
class RxConfig:
    channel: ChannelSpec
    eq_center_hz: float | None = None  # None: the carrier frequency
    eq_gain_db: float = 0.0
    eq_q: float = 2.0
    bpf_half_bw_hz: float = 4200.0
    bpf_stop_atten_db: float = 60.0
    bpf_order: int = 8
    post_lpf_cutoff_hz: float = 4000.0
    post_lpf_order: int = 8
    dc_cutoff_hz: float = 20.0
    phase_eq_sections: int = 3  # all-pass group-delay equalizer; 0 disables
    amplification_A: float | None = None  # None: unity_amplification(k_a)
    limiter: LimiterParams = field(default_factory=LimiterParams)
    transparency_gain: float = 1.0
    sample_rate_hz: int = EAR_RATE_HZ

    def __post_init__(self):
        if self.amplification_A is not None and not self.amplification_A > 0:
            raise ContractError(f"amplification_A must be positive, got {self.amplification_A}")
        if not 0 <= self.transparency_gain <= 1:
            raise ContractError(f"transparency_gain must be in [0, 1], got {self.transparency_gain}")
        nyquist = self.sample_rate_hz / 2
        top = self.channel.carrier_hz + max(self.channel.audio_bw_hz, self.bpf_half_bw_hz)
        if top >= nyquist:
            raise InvalidDesignError(f"channel band up to {top:g} Hz exceeds receive Nyquist {nyquist:g} Hz")

    @property
    def gain_A(self) -> float:
        if self.amplification_A is None:
            return unity_amplification(self.channel.mod_index)
        return self.amplification_A

    def stages(self):
        """Designed cascades: (eq, band-pass, dc-block, low-pass, all-pass equalizer)."""
        return _design_stages(self.sample_rate_hz, self.channel.carrier_hz, self.eq_center_hz or
                              self.channel.carrier_hz, self.eq_gain_db, self.eq_q, self.bpf_half_bw_hz,
                              self.bpf_stop_atten_db, self.bpf_order, self.dc_cutoff_hz,
                              self.post_lpf_cutoff_hz, self.post_lpf_order, self.phase_eq_sections)


@lru_cache(maxsize=32)
def _design_stages(fs, carrier_hz, eq_center_hz, eq_gain_db, eq_q, half_bw, atten, bpf_order, dc_cutoff,
                   lpf_cutoff, lpf_order, eq_sections):
    eq = design_peaking_eq(eq_center_hz, eq_gain_db, eq_q, fs)
    bpf = design_chebyshev2_bandpass(carrier_hz, half_bw, atten, bpf_order, fs)
    dc = design_dc_block(dc_cutoff, fs)
    lpf = design_lowpass(lpf_cutoff, lpf_order, fs)
    allpass = design_envelope_equalizer(eq.then(bpf), dc.then(lpf), carrier_hz, lpf_cutoff, eq_sections)
    return eq, bpf, dc, lpf, allpass


def envelope_phase(front, back, carrier_hz: float, freqs_hz) -> np.ndarray:
    """Audio-band phase seen by the envelope: odd part of the RF filters about the carrier plus the audio filters."""
    f = np.asarray(freqs_hz, dtype=float)
    upper = unwrapped_phase(front, carrier_hz + f)
    lower = unwrapped_phase(front, carrier_hz - f)
    return (upper - lower) / 2 + unwrapped_phase(back, f)


def design_envelope_equalizer(front, back, carrier_hz: float, audio_bw_hz: float, n_sections: int):
    """All-pass cascade that flattens the envelope path's group delay across the audio band."""
    f = np.linspace(0.0, 1.125 * audio_bw_hz, 600)[1:]
    weights = np.where(f >= 150.0, np.abs(back.response(f)) ** 2 / np.sqrt(f), 0.0)
    allpass, _ = design_allpass_equalizer(f, envelope_phase(front, back, carrier_hz, f), weights, n_sections,
                                          back.design_sample_rate_hz)
    return allpass


class EnvelopeDecoder:
    """Streaming envelope demodulator for one ear; state persists across blocks."""

    def __init__(self, cfg: RxConfig):
        self.cfg = cfg
        eq, bpf, dc, lpf, allpass = cfg.stages()
        self.front = eq.then(bpf)
        self.back = dc.then(lpf).then(allpass)
        self.reset()

    def reset(self):
        self._front_state = self.front.initial_state()
        self._back_state = self.back.initial_state()
        self.limiter = Limiter(self.cfg.limiter, self.cfg.sample_rate_hz)

    @property
    def latency_samples(self) -> int:
        return self.limiter.delay

    def demodulate(self, block: AudioBuffer) -> AudioBuffer:
        """Unlimited demodulated audio (before the limiter)."""
        _check_rx(block, self.cfg)
        selected, self._front_state = filter_block(self.front, block, self._front_state)
        rectified = selected.with_samples(np.abs(selected.samples))
        audio, self._back_state = filter_block(self.back, rectified, self._back_state)
        return audio.with_samples(audio.samples * (2 * self.cfg.gain_A))

    def process(self, block: AudioBuffer) -> AudioBuffer:
        return self.limiter.process(self.demodulate(block))


def _check_rx(rx: AudioBuffer, cfg: RxConfig):
    if rx.sample_rate_hz != cfg.sample_rate_hz:
        raise ContractError(f"receiver expects {cfg.sample_rate_hz} Hz input, got {rx.sample_rate_hz} Hz")
    if rx.channels != 1:
        raise ContractError(f"receiver expects one ear (mono), got {rx.channels} channels")


def demodulate_envelope(rx: AudioBuffer, cfg: RxConfig) -> AudioBuffer:
    """``limit(2A * allpass(lpf(dc_block(|bpf(eq(rx))|))))`` from zero state."""
    return EnvelopeDecoder(cfg).process(rx)


def demodulate_coherent(rx: AudioBuffer, carrier_hz: float, phase_rad: float, mod_index: float,
                        lpf_cutoff_hz: float = 4000.0, order: int = 8) -> AudioBuffer:
    """Reference demodulator with a known carrier phase.

    Mixes with ``cos(2 pi f_c t + phase)``, low-passes forward and backward (no
    phase shift, so the output lines up with the source), then undoes the
    ``(1 + k_a x) / 2`` scaling.
    """
    if rx.channels != 1:
        raise ContractError("coherent demodulation expects mono input")
    mixed = rx.mono * carrier(rx.frames, carrier_hz, rx.sample_rate_hz, phase_rad)
    lpf = design_lowpass(lpf_cutoff_hz, order, rx.sample_rate_hz)
    base = filter_zero_phase(lpf, rx.with_samples(mixed)).mono
    return rx.with_samples((2 * base - 1) / mod_index)


def transparency_lowpass(sample_rate_hz: int = EAR_RATE_HZ):
    """Keeps the audible band (flat to ~20 kHz) and removes ultrasound before playback."""
    return design_chebyshev2_lowpass(TRANSPARENCY_STOP_HZ, 90.0, 12, sample_rate_hz)


def transparency_mix(demod: AudioBuffer, ambient_path: AudioBuffer, cfg: RxConfig,
                     lowpassed: bool = False) -> AudioBuffer:
    """``limit(demod + transparency_gain * lowpass(ambient))``.

    ``ambient_path`` is the raw ear signal unless ``lowpassed`` says it has
    already been through the transparency low-pass.
    """
    if demod.sample_rate_hz != ambient_path.sample_rate_hz:
        raise ContractError(f"rates differ: {demod.sample_rate_hz} vs {ambient_path.sample_rate_hz}")
    if demod.frames != ambient_path.frames:
        raise ContractError(f"lengths differ: {demod.frames} vs {ambient_path.frames}")
    amb = ambient_path if lowpassed else filter(transparency_lowpass(ambient_path.sample_rate_hz), ambient_path)
    mixed = demod.samples + cfg.transparency_gain * amb.samples
    return Limiter(cfg.limiter, demod.sample_rate_hz, demod.channels).process(demod.with_samples(mixed))


def decode_ear(rx: AudioBuffer, cfg: RxConfig) -> AudioBuffer:
    """One ear: envelope demodulation (unlimited) remixed with the environment, then limited."""
    demod = EnvelopeDecoder(cfg).demodulate(rx)
    return transparency_mix(demod, rx, cfg)


def decode_stereo(ears: EarSignals, cfg: RxConfig) -> tuple[AudioBuffer, AudioBuffer]:
    """Each ear decoded on its own; nothing is shared between them."""
    return decode_ear(ears.left, cfg), decode_ear(ears.right, cfg)


def select_channel(cfg: RxConfig, new_channel: ChannelSpec) -> RxConfig:
    """Retune the receiver to another channel; raises if no legal plan could carry it."""
    problems = new_channel.violations(TRANSMIT_RATE_HZ)
    if problems:
        raise InvalidDesignError(f"channel at {new_channel.carrier_hz:g} Hz: " + "; ".join(problems))
    retuned = replace(cfg, channel=new_channel)
    retuned.stages()
    return retuned
