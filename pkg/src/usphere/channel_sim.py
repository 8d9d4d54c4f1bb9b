"""Free-field propagation from ultrasonic sources to a two-eared listener.

Geometry is 2-D. Azimuths follow compass convention: a facing angle of 0
points along +y and pi/2 along +x, so a positive relative azimuth puts the
source on the listener's right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_dsp import (AudioBuffer, ContractError, delay, design_chebyshev2_lowpass, filter,
                       upsample_2x)
from .io import pink_noise

TRANSMIT_RATE_HZ = 96000
EAR_RATE_HZ = 192000
MIN_DISTANCE_M = 0.1
DEFAULT_HEAD_RADIUS_M = 0.0875
DEFAULT_SPEED_MPS = 343.0
AMBIENT_STOP_HZ = 20000.0


@dataclass(frozen=True)
class Source:
    position: tuple
    waveform: AudioBuffer
    directivity_exponent: float = 8.0
    facing_rad: float | None = None  # None: aimed straight at the listener


@dataclass(frozen=True)
class Listener:
    position: tuple = (0.0, 0.0)
    facing_azimuth_rad: float = 0.0
    head_radius_m: float = DEFAULT_HEAD_RADIUS_M


@dataclass(frozen=True)
class SceneModel:
    sources: tuple
    listener: Listener = field(default_factory=Listener)
    speed_of_sound_mps: float = DEFAULT_SPEED_MPS
    ambient: AudioBuffer | None = None
    noise_snr_db: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))

    def validate(self):
        r = self.listener.head_radius_m
        if not 0.06 <= r <= 0.12:
            raise ContractError(f"head radius {r} m outside [0.06, 0.12]")
        if self.speed_of_sound_mps <= 0:
            raise ContractError("speed of sound must be positive")
        for i, src in enumerate(self.sources):
            d = distance(src.position, self.listener.position)
            if d < MIN_DISTANCE_M:
                raise ContractError(f"source {i} is {d:.3f} m from the listener (minimum {MIN_DISTANCE_M} m)")
            if src.waveform.sample_rate_hz != TRANSMIT_RATE_HZ:
                raise ContractError(f"source {i} waveform at {src.waveform.sample_rate_hz} Hz, "
                                    f"expected {TRANSMIT_RATE_HZ} Hz")
            if src.directivity_exponent < 0:
                raise ContractError(f"source {i} directivity exponent must be >= 0")


@dataclass(frozen=True)
class EarSignals:
    left: AudioBuffer
    right: AudioBuffer

    def __post_init__(self):
        if self.left.sample_rate_hz != EAR_RATE_HZ or self.right.sample_rate_hz != EAR_RATE_HZ:
            raise ContractError(f"ear signals must be at {EAR_RATE_HZ} Hz")
        if self.left.frames != self.right.frames:
            raise ContractError("ear signals must have equal length")

    def as_stereo(self) -> AudioBuffer:
        return AudioBuffer.stack([self.left, self.right])

    @classmethod
    def from_stereo(cls, buf: AudioBuffer) -> "EarSignals":
        if buf.channels != 2:
            raise ContractError(f"expected a stereo ear recording, got {buf.channels} channels")
        return cls(buf.channel(0), buf.channel(1))


def distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(theta, 2 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


def bearing(origin, target) -> float:
    """Compass bearing from ``origin`` to ``target`` (0 = +y, pi/2 = +x)."""
    return math.atan2(target[0] - origin[0], target[1] - origin[1])


def source_azimuth(source_position, listener: Listener) -> float:
    return wrap_angle(bearing(listener.position, source_position) - listener.facing_azimuth_rad)


def itd_delays(source_azimuth_rad: float, head_radius_m: float = DEFAULT_HEAD_RADIUS_M,
               speed_mps: float = DEFAULT_SPEED_MPS) -> tuple[float, float]:
    """Per-ear arrival offsets relative to the head centre, Woodworth spherical head.

    The near ear is early by ``(r/c) sin|theta|`` and the far ear late by
    ``(r/c) |theta|``; sources behind the interaural axis are folded to the
    front, which gives the same lateral angle.
    """
    theta = wrap_angle(source_azimuth_rad)
    lateral = abs(theta)
    if lateral > math.pi / 2:
        lateral = math.pi - lateral
    scale = head_radius_m / speed_mps
    near = -scale * math.sin(lateral)
    far = scale * lateral
    if theta >= 0:
        return far, near  # source on the right: left ear is the far one
    return near, far


def directivity_gain(source: Source, listener_position, exponent: float | None = None) -> float:
    if source.facing_rad is None:
        return 1.0
    k = source.directivity_exponent if exponent is None else exponent
    off_axis = wrap_angle(bearing(source.position, listener_position) - source.facing_rad)
    c = math.cos(off_axis)
    return max(c, 0.0) ** k if k > 0 else 1.0


def ear_delays_s(source: Source, scene: SceneModel) -> tuple[float, float]:
    """Total propagation delay per ear, offset by r/c so it is never negative."""
    lst = scene.listener
    c = scene.speed_of_sound_mps
    d = distance(source.position, lst.position)
    left, right = itd_delays(source_azimuth(source.position, lst), lst.head_radius_m, c)
    base = d / c + lst.head_radius_m / c
    return base + left, base + right


def make_ambient(kind: str, duration_s: float, level_dbfs: float = -20.0, seed: int = 0,
                 sample_rate_hz: int = EAR_RATE_HZ, freq_hz: float = 440.0) -> AudioBuffer:
    """Audible-band environment: ``silence``, ``pink_noise`` (RMS level) or ``tone`` (peak level)."""
    if not 0 < duration_s <= 600:
        raise ContractError(f"duration must be in (0, 600] s, got {duration_s}")
    n = int(round(duration_s * sample_rate_hz))
    level = 10 ** (level_dbfs / 20)
    if kind == "silence":
        return AudioBuffer.zeros(n, sample_rate_hz)
    if kind == "tone":
        if not 0 < freq_hz < AMBIENT_STOP_HZ:
            raise ContractError(f"ambient tone must lie below {AMBIENT_STOP_HZ:g} Hz")
        return AudioBuffer(level * np.sin(2 * np.pi * freq_hz * np.arange(n) / sample_rate_hz), sample_rate_hz)
    if kind == "pink_noise":
        rng = np.random.default_rng(seed)
        x = AudioBuffer(pink_noise(n, rng), sample_rate_hz)
        if sample_rate_hz / 2 > AMBIENT_STOP_HZ:
            x = filter(design_chebyshev2_lowpass(AMBIENT_STOP_HZ, 100.0, 12, sample_rate_hz), x)
        rms = float(np.sqrt(np.mean(x.mono ** 2)))
        return x.with_samples(x.samples * (level / rms))
    raise ContractError(f"unknown ambient kind {kind!r}")


def _to_ear_rate(buf: AudioBuffer) -> AudioBuffer:
    while buf.sample_rate_hz < EAR_RATE_HZ:
        buf = upsample_2x(buf)
    if buf.sample_rate_hz != EAR_RATE_HZ:
        raise ContractError(f"ambient rate {buf.sample_rate_hz} Hz cannot reach {EAR_RATE_HZ} Hz by doubling")
    return buf


def _fit(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.pad(x, (0, n - len(x)))


def render_source(source: Source, scene: SceneModel) -> tuple[np.ndarray, np.ndarray]:
    """Left and right contributions of one source at the ear rate."""
    lst = scene.listener
    wave = source.waveform if source.waveform.channels == 1 else source.waveform.channel(0)
    up = upsample_2x(wave)
    gain = directivity_gain(source, lst.position) / distance(source.position, lst.position)
    d_left, d_right = ear_delays_s(source, scene)
    left = delay(up, d_left * EAR_RATE_HZ).mono * gain
    right = delay(up, d_right * EAR_RATE_HZ).mono * gain
    return left, right


def propagate(scene: SceneModel) -> EarSignals:
    """Delay, attenuate and sum every source at each ear, then add ambient and noise."""
    scene.validate()
    if not scene.sources and scene.ambient is None:
        raise ContractError("scene has neither sources nor ambient sound")
    lengths = [2 * s.waveform.frames for s in scene.sources]
    n = max(lengths) if lengths else _to_ear_rate(scene.ambient).frames
    left = np.zeros(n)
    right = np.zeros(n)
    for src in scene.sources:
        l_part, r_part = render_source(src, scene)
        left += _fit(l_part, n)
        right += _fit(r_part, n)

    if scene.noise_snr_db is not None:
        power = 0.5 * (np.mean(left ** 2) + np.mean(right ** 2))
        if power > 0:
            sigma = math.sqrt(power / 10 ** (scene.noise_snr_db / 10))
            rng = np.random.default_rng(scene.rng_seed)
            noise = rng.standard_normal((2, n)) * sigma
            left = left + noise[0]
            right = right + noise[1]

    if scene.ambient is not None:
        amb = _to_ear_rate(scene.ambient)
        amb_l = amb.samples[:, 0]
        amb_r = amb.samples[:, 1] if amb.channels > 1 else amb_l
        left = left + _fit(amb_l, n)
        right = right + _fit(amb_r, n)

    return EarSignals(AudioBuffer(left, EAR_RATE_HZ), AudioBuffer(right, EAR_RATE_HZ))
