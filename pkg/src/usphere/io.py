"""RIFF/WAVE reading and writing, plus deterministic test material."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .core_dsp import AudioBuffer, ContractError

PCM = 1
IEEE_FLOAT = 3

FORMATS = {
    "pcm16": (PCM, 16),
    "pcm24": (PCM, 24),
    "float32": (IEEE_FLOAT, 32),
}

MAX_FIXTURE_S = 600.0


class WavError(IOError):
    """Base class for WAV container problems; carries the offending path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class MalformedWavError(WavError):
    pass


class UnsupportedFormatError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


class ClippingError(ValueError):
    pass


@dataclass(frozen=True)
class WavMeta:
    sample_rate_hz: int
    channels: int
    bit_format: str
    length_frames: int


def _format_name(tag, bits):
    for name, spec in FORMATS.items():
        if spec == (tag, bits):
            return name
    return None


def read_wav(path) -> tuple[AudioBuffer, WavMeta]:
    """Read a PCM16/PCM24/float32 WAV into a buffer normalized to +-1.0."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(path, "not a RIFF/WAVE file")

    fmt = None
    payload = None
    declared_frames = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        body_start = pos + 8
        body = data[body_start:body_start + size]
        if chunk_id == b"fmt ":
            if size < 16 or len(body) < 16:
                raise MalformedWavError(path, "fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
            declared_frames = size
            if len(body) < size:
                raise TruncatedWavError(path, f"data chunk declares {size} bytes but only {len(body)} present")
            break
        pos = body_start + size + (size & 1)

    if fmt is None:
        raise MalformedWavError(path, "missing fmt chunk")
    if payload is None:
        raise MalformedWavError(path, "missing data chunk")

    tag, channels, rate, byte_rate, block_align, bits = fmt
    name = _format_name(tag, bits)
    if name is None:
        raise UnsupportedFormatError(path, f"format tag {tag} with {bits} bits per sample")
    if channels < 1 or block_align != channels * bits // 8 or byte_rate != rate * block_align:
        raise MalformedWavError(path, "inconsistent fmt chunk fields")
    if declared_frames % block_align:
        raise TruncatedWavError(path, "data chunk ends mid-frame")
    frames = declared_frames // block_align
    if frames == 0:
        raise MalformedWavError(path, "no audio frames")

    if name == "float32":
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    elif name == "pcm16":
        samples = np.frombuffer(payload, dtype="<i2") / 32768.0
    else:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints / float(1 << 23)

    buf = AudioBuffer(samples.reshape(frames, channels), rate)
    return buf, WavMeta(rate, channels, name, frames)


def write_wav(buf: AudioBuffer, path, bit_format: str = "float32", allow_clip: bool = False) -> WavMeta:
    if bit_format not in FORMATS:
        raise ContractError(f"unknown bit format {bit_format!r}; expected one of {sorted(FORMATS)}")
    if buf.frames == 0:
        raise ContractError("cannot write an empty buffer")
    tag, bits = FORMATS[bit_format]
    x = buf.samples
    if tag == PCM:
        peak = float(np.max(np.abs(x)))
        if peak > 1.0 and not allow_clip:
            raise ClippingError(f"peak {peak:.4f} exceeds full scale for {bit_format}; pass allow_clip to clip")
        full = float(1 << (bits - 1))
        ints = np.clip(np.round(x * full), -full, full - 1).astype(np.int32)
        if bits == 16:
            payload = ints.astype("<i2").tobytes()
        else:
            u = (ints & 0xFFFFFF).astype(np.uint32).reshape(-1)
            payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    else:
        payload = x.astype("<f4").tobytes()

    block_align = buf.channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, buf.channels, buf.sample_rate_hz,
                      buf.sample_rate_hz * block_align, block_align, bits)
    pad = b"\x00" if len(payload) & 1 else b""
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload + pad
    path = Path(path)
    try:
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    except OSError as exc:
        raise WavError(path, f"write failed: {exc.strerror or exc}") from exc
    return WavMeta(buf.sample_rate_hz, buf.channels, bit_format, buf.frames)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """1/f noise by spectral shaping of white Gaussian noise; unit RMS."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    k = np.arange(len(spectrum), dtype=float)
    k[0] = 1.0
    spectrum /= np.sqrt(k)
    spectrum[0] = 0.0
    x = np.fft.irfft(spectrum, n)
    return x / np.sqrt(np.mean(x ** 2))


def generate_fixture(kind: str, duration_s: float, sample_rate_hz: int = 96000, seed: int = 0,
                     freq_hz: float | None = None, amplitude: float = 1.0) -> AudioBuffer:
    """Repeatable mono test material.

    ``tone`` is an exact sine at ``freq_hz`` (default 1 kHz); ``sweep`` a
    logarithmic chirp from 100 Hz to ``freq_hz`` (default 4 kHz); ``speech_like_noise`` is
    pink noise band-limited to 300-4000 Hz with a 4 Hz syllabic envelope,
    peak-normalized to ``amplitude``.
    """
    if not 0 < duration_s <= MAX_FIXTURE_S:
        raise ContractError(f"duration must be in (0, {MAX_FIXTURE_S}] s, got {duration_s}")
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    if kind == "tone":
        x = amplitude * np.sin(2 * np.pi * (freq_hz or 1000.0) * t)
    elif kind == "sweep":
        x = amplitude * signal.chirp(t, 100.0, duration_s, freq_hz or 4000.0, method="logarithmic", phi=-90)
    elif kind == "speech_like_noise":
        rng = np.random.default_rng(seed)
        band = signal.butter(6, [300.0, 4000.0], btype="bandpass", fs=sample_rate_hz, output="sos")
        x = signal.sosfilt(band, pink_noise(n, rng))
        syllabic = 0.55 + 0.45 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi))
        x = x * syllabic
        x = amplitude * x / np.max(np.abs(x))
    else:
        raise ContractError(f"unknown fixture kind {kind!r}")
    return AudioBuffer(x, sample_rate_hz)

