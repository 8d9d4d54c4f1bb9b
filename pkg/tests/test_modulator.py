import numpy as np
import pytest

from usphere.analysis import band_energy
from usphere.core_dsp import AudioBuffer, ContractError
from usphere.io import generate_fixture
from usphere.modulator import (ChannelPlan, ChannelSpec, OvermodulationError, am_modulate, compose, prefilter,
                               validate_plan)

from .conftest import FS_TX, db, dft_amplitude, sine, tail


class TestValidatePlan:
    def test_two_channel_demo_is_legal(self):
        assert validate_plan(ChannelPlan([ChannelSpec(30000), ChannelSpec(40000)])) == []

    def test_guard_band(self):
        found = validate_plan(ChannelPlan([ChannelSpec(30000), ChannelSpec(36000)]))
        assert len(found) == 1
        assert found[0].channels == (0, 1)
        assert "guard" in found[0].message

    def test_nyquist(self):
        found = validate_plan(ChannelPlan([ChannelSpec(46000)]))
        assert [v.channels for v in found] == [(0,)]
        assert "Nyquist" in found[0].message

    def test_reports_every_violation(self):
        found = validate_plan(ChannelPlan([ChannelSpec(24000), ChannelSpec(46000, mod_index=1.5)]))
        messages = " | ".join(str(v) for v in found)
        assert "lower sideband" in messages and "Nyquist" in messages and "mod_index" in messages

    def test_too_many_channels(self):
        found = validate_plan(ChannelPlan([ChannelSpec(30000)] * 9, transmit_rate_hz=384000))
        assert any("more than 8" in v.message for v in found)


class TestPrefilter:
    def test_speech_band_limit(self):
        x = generate_fixture("speech_like_noise", 2.0, FS_TX, seed=0)
        # add broadband hiss so there is something above 8 kHz to remove
        x = x.with_samples(x.samples + 0.05 * np.random.default_rng(0).standard_normal(x.samples.shape))
        y = prefilter(x)
        assert band_energy(x, 8000, 48000) - band_energy(y, 8000, 48000) >= 40

    def test_tone_unchanged(self):
        y = prefilter(sine(1000, 1.0, FS_TX))
        assert abs(db(dft_amplitude(tail(y, 0.5), 1000, FS_TX))) <= 0.5

    def test_zero(self):
        assert not np.any(prefilter(AudioBuffer.zeros(100, FS_TX)).samples)


class TestModulate:
    def test_silence_gives_carrier(self):
        y = am_modulate(AudioBuffer.zeros(960, FS_TX), ChannelSpec(30000))
        assert np.allclose(y.mono, np.cos(2 * np.pi * 30000 * np.arange(960) / FS_TX), atol=1e-12)

    def test_sideband_ratio(self):
        y = am_modulate(sine(1000, 1.0, FS_TX), ChannelSpec(30000, mod_index=0.9))
        c = dft_amplitude(y.mono, 30000, FS_TX)
        for f in (29000, 31000):
            assert dft_amplitude(y.mono, f, FS_TX) / c == pytest.approx(0.45, abs=0.01)

    def test_overmodulation(self):
        x = AudioBuffer(np.array([0.0, 1.2, -0.3]), FS_TX)
        with pytest.raises(OvermodulationError) as info:
            am_modulate(x, ChannelSpec(30000, mod_index=0.9), channel=1)
        assert info.value.channel == 1
        assert "1.2000" in str(info.value)

    def test_full_depth_accepted(self):
        y = am_modulate(sine(1000, 0.1, FS_TX), ChannelSpec(30000, mod_index=1.0))
        assert np.all(np.isfinite(y.mono))

    def test_rejects_illegal_spec(self):
        with pytest.raises(ContractError):
            am_modulate(sine(1000, 0.1, FS_TX), ChannelSpec(30000, mod_index=1.2))

    def test_spectral_shift(self):
        # spectrum of am_modulate(x) around f_c is that of (1 + k x) moved up by f_c
        x = prefilter(generate_fixture("speech_like_noise", 1.0, FS_TX, seed=5))
        x = x.with_samples(x.samples / np.max(np.abs(x.samples)))
        y = am_modulate(x, ChannelSpec(30000)).mono
        env = 1 + 0.9 * x.mono
        n = len(y)
        f = np.fft.rfftfreq(n, 1 / FS_TX)
        Y = np.abs(np.fft.rfft(y)) / n
        E = np.abs(np.fft.rfft(env)) / n / 2
        shift = int(round(30000 * n / FS_TX))
        band = (f >= 26000) & (f <= 34000) & (f != 30000)
        idx = np.nonzero(band)[0]
        src = np.abs(idx - shift)
        expected = E[src]
        # lower sideband mirrors the envelope spectrum; conjugate symmetry keeps the magnitudes
        loud = 20 * np.log10(expected + 1e-300) > -60
        err = 20 * np.log10(Y[idx][loud] / expected[loud])
        assert np.max(np.abs(err)) <= 1.0


class TestCompose:
    def test_two_silent_channels(self):
        plan = ChannelPlan([ChannelSpec(30000), ChannelSpec(40000)])
        comp = compose([AudioBuffer.zeros(FS_TX, FS_TX)] * 2, plan)
        a = band_energy(comp.buffer, 29000, 31000)
        b = band_energy(comp.buffer, 39000, 41000)
        assert abs(a - b) <= 0.1
        assert comp.normalization_factor < 1

    def test_single_channel_matches_modulate(self):
        spec = ChannelSpec(30000)
        silent = AudioBuffer.zeros(960, FS_TX)
        comp = compose([silent], ChannelPlan([spec]))
        assert comp.normalization_factor == 1.0
        assert np.array_equal(comp.buffer.samples, am_modulate(silent, spec).samples)
        # any program pushes the envelope past full scale, so only the recorded factor differs
        x = sine(1000, 0.1, FS_TX, 0.5)
        comp = compose([x], ChannelPlan([spec]))
        assert np.allclose(comp.buffer.samples, comp.normalization_factor * am_modulate(x, spec).samples)

    def test_full_scale_normalized(self):
        plan = ChannelPlan([ChannelSpec(30000), ChannelSpec(40000)])
        comp = compose([sine(1000, 0.2, FS_TX), sine(2000, 0.2, FS_TX)], plan)
        assert db(np.max(np.abs(comp.buffer.mono))) <= -1.0 + 1e-9
        assert comp.buffer.meta["normalization_factor"] == comp.normalization_factor
        assert comp.raw_peak > 1

    def test_length_mismatch(self):
        plan = ChannelPlan([ChannelSpec(30000), ChannelSpec(40000)])
        a, b = sine(1000, 0.2, FS_TX, 0.5), sine(1000, 0.1, FS_TX, 0.5)
        with pytest.raises(ContractError):
            compose([a, b], plan)
        assert compose([a, b], plan, pad=True).buffer.frames == a.frames

    def test_refuses_illegal_plan(self):
        with pytest.raises(ContractError, match="guard"):
            compose([sine(1000, 0.1, FS_TX, 0.5)] * 2, ChannelPlan([ChannelSpec(30000), ChannelSpec(36000)]))

    def test_audible_confinement(self):
        plan = ChannelPlan([ChannelSpec(30000), ChannelSpec(40000)])
        audios = [prefilter(generate_fixture("speech_like_noise", 2.0, FS_TX, seed=s)) for s in (1, 2)]
        audios = [a.with_samples(a.samples / np.max(np.abs(a.samples))) for a in audios]
        comp = compose(audios, plan).buffer
        assert band_energy(comp, 20, 20000) <= band_energy(comp, 22000, 48000) - 60
