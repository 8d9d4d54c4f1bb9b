import struct

import numpy as np
import pytest

from usphere.analysis import band_energy, rms_dbfs
from usphere.core_dsp import AudioBuffer, ContractError
from usphere.io import (ClippingError, MalformedWavError, TruncatedWavError, UnsupportedFormatError, generate_fixture,
                        read_wav, write_wav)

from .conftest import FS_TX


def test_float32_round_trip(tmp_path):
    x = generate_fixture("tone", 0.5, FS_TX, freq_hz=1000.0)
    meta = write_wav(x, tmp_path / "t.wav")
    y, read_meta = read_wav(tmp_path / "t.wav")
    assert meta == read_meta
    assert read_meta.bit_format == "float32" and read_meta.length_frames == x.frames
    assert np.max(np.abs(y.samples - x.samples)) <= 1e-7


@pytest.mark.parametrize("fmt,step", [("pcm16", 1 / 32768), ("pcm24", 1 / 2 ** 23)])
def test_pcm_round_trip(tmp_path, rng, fmt, step):
    x = AudioBuffer(rng.uniform(-1, 1, (3000, 2)) * 0.99, 48000)
    write_wav(x, tmp_path / "p.wav", fmt)
    y, meta = read_wav(tmp_path / "p.wav")
    assert meta.channels == 2 and meta.bit_format == fmt
    assert np.max(np.abs(y.samples - x.samples)) <= step


def test_pcm_clipping(tmp_path):
    x = AudioBuffer(np.array([0.5, 1.5, -0.2]), 48000)
    with pytest.raises(ClippingError):
        write_wav(x, tmp_path / "c.wav", "pcm16")
    write_wav(x, tmp_path / "c.wav", "pcm16", allow_clip=True)
    y, _ = read_wav(tmp_path / "c.wav")
    assert y.mono[1] == pytest.approx(32767 / 32768)


def test_stereo_192k_header_is_standard(tmp_path):
    x = AudioBuffer(np.zeros((100, 2)), 192000)
    write_wav(x, tmp_path / "s.wav")
    raw = (tmp_path / "s.wav").read_bytes()
    assert raw[:4] == b"RIFF" and raw[8:16] == b"WAVEfmt "
    tag, ch, rate, byte_rate, align, bits = struct.unpack_from("<HHIIHH", raw, 20)
    assert (tag, ch, rate, byte_rate, align, bits) == (3, 2, 192000, 192000 * 8, 8, 32)
    assert struct.unpack_from("<I", raw, 4)[0] == len(raw) - 8


def test_truncated(tmp_path):
    write_wav(AudioBuffer(np.zeros(100), 48000), tmp_path / "t.wav")
    raw = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "cut.wav").write_bytes(raw[:-50])
    with pytest.raises(TruncatedWavError):
        read_wav(tmp_path / "cut.wav")


def test_malformed(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"not a wave file at all")
    with pytest.raises(MalformedWavError) as info:
        read_wav(tmp_path / "bad.wav")
    assert "bad.wav" in str(info.value)


def test_unsupported(tmp_path):
    fmt = struct.pack("<HHIIHH", 1, 1, 8000, 8000, 1, 8)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 4) + b"\x80" * 4
    (tmp_path / "u8.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedFormatError):
        read_wav(tmp_path / "u8.wav")


def test_write_rejects_unknown_format(tmp_path):
    with pytest.raises(ContractError):
        write_wav(AudioBuffer(np.zeros(4), 48000), tmp_path / "x.wav", "pcm8")


class TestFixtures:
    def test_tone_is_exact_sine(self):
        x = generate_fixture("tone", 0.1, FS_TX, freq_hz=1000.0)
        t = np.arange(x.frames) / FS_TX
        assert np.array_equal(x.mono, np.sin(2 * np.pi * 1000.0 * t))

    @pytest.mark.parametrize("kind", ["tone", "sweep", "speech_like_noise"])
    def test_deterministic(self, kind):
        a = generate_fixture(kind, 0.5, FS_TX, seed=3)
        b = generate_fixture(kind, 0.5, FS_TX, seed=3)
        assert np.array_equal(a.samples, b.samples)

    def test_seed_changes_noise(self):
        a = generate_fixture("speech_like_noise", 0.5, FS_TX, seed=1)
        b = generate_fixture("speech_like_noise", 0.5, FS_TX, seed=2)
        assert not np.array_equal(a.samples, b.samples)

    def test_speech_like_band(self):
        x = generate_fixture("speech_like_noise", 5.0, FS_TX, seed=0)
        inside = 10 ** (band_energy(x, 300, 4000) / 10)
        total = 10 ** (rms_dbfs(x) / 10)
        assert inside / total >= 0.9
        assert np.max(np.abs(x.mono)) == pytest.approx(1.0)

    def test_speech_like_syllabic_rhythm(self):
        x = generate_fixture("speech_like_noise", 5.0, FS_TX, seed=0)
        env = np.abs(x.mono) ** 2
        spec = np.abs(np.fft.rfft(env - env.mean()))
        freqs = np.fft.rfftfreq(len(env), 1 / FS_TX)
        low = (freqs > 1) & (freqs < 20)
        assert freqs[low][np.argmax(spec[low])] == pytest.approx(4.0, abs=0.3)

    def test_limits(self):
        with pytest.raises(ContractError):
            generate_fixture("tone", 601, FS_TX)
        with pytest.raises(ContractError):
            generate_fixture("chirp", 1, FS_TX)
