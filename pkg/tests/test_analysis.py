import json

import numpy as np
import pytest

from usphere.analysis import (FLOOR_DB, REPORT_SCHEMA, AnalysisReport, UndefinedITDError, aligned_similarity,
                              band_energy, crosstalk, find_peak, line_level, measure_itd, occupied_lower_edge,
                              read_report, rms_dbfs, spectrum, write_report)
from usphere.core_dsp import AudioBuffer, ContractError, delay, upsample_2x
from usphere.modulator import ChannelSpec, am_modulate

from .conftest import FS_RX, FS_TX, sine


class TestSpectrum:
    def test_full_scale_sine_reads_zero(self):
        spec = spectrum(sine(30000, 0.5, FS_RX))
        f, level = find_peak(spec, 0, FS_RX / 2)
        assert f == pytest.approx(30000, abs=FS_RX / 8192)
        assert level == pytest.approx(0.0, abs=0.1)

    def test_zero_floor(self):
        assert all(level <= FLOOR_DB for _, level in spectrum(AudioBuffer.zeros(9000, FS_RX)))

    def test_am_lines(self):
        y = upsample_2x(am_modulate(sine(1000, 1.0, FS_TX), ChannelSpec(30000, mod_index=0.9)))
        spec = spectrum(y)
        f_c, carrier = line_level(spec, 29500, 30500)
        assert f_c == pytest.approx(30000, abs=FS_RX / 8192)
        for lo, hi in ((28500, 29500), (30500, 31500)):
            f, side = line_level(spec, lo, hi)
            assert f == pytest.approx((lo + hi) / 2, abs=FS_RX / 8192)
            assert 10 ** ((side - carrier) / 20) == pytest.approx(0.45, rel=0.05)

    def test_line_level_between_bins(self):
        spec = spectrum(sine(1000 + 0.5 * FS_RX / 8192, 1.0, FS_RX, 0.5))
        assert line_level(spec, 500, 1500)[1] == pytest.approx(20 * np.log10(0.5), abs=0.1)

    def test_contract(self):
        with pytest.raises(ContractError):
            spectrum(sine(1000, 0.001, FS_RX))
        with pytest.raises(ContractError):
            spectrum(sine(1000, 1, FS_RX), fft_size=3000)
        with pytest.raises(ContractError):
            spectrum(sine(1000, 1, FS_RX), window="hamming")


class TestBandEnergy:
    def test_sine_power(self):
        x = sine(1000, 1.0, FS_TX)
        assert band_energy(x, 500, 1500) == pytest.approx(-3.01, abs=0.5)
        assert band_energy(x, 10000, 20000) <= -80
        assert band_energy(AudioBuffer.zeros(FS_TX, FS_TX), 10, 100) == FLOOR_DB

    def test_inverted_band(self):
        with pytest.raises(ContractError):
            band_energy(sine(1000, 1.0, FS_TX), 2000, 1000)

    def test_partition_sums_to_total(self, rng):
        x = AudioBuffer(rng.standard_normal(FS_TX) * 0.2, FS_TX)
        edges = [0, 3000, 9000, 20000, 35000, 48000]
        parts = sum(10 ** (band_energy(x, lo, hi) / 10) for lo, hi in zip(edges[:-1], edges[1:]))
        assert 10 * np.log10(parts) == pytest.approx(rms_dbfs(x), abs=0.1)


class TestAlignment:
    def test_self(self, rng):
        x = AudioBuffer(rng.standard_normal(FS_TX), FS_TX)
        corr, lag, gain = aligned_similarity(x, x)
        assert (corr, lag) == (pytest.approx(1.0), 0)
        assert gain == pytest.approx(1.0)

    def test_delayed_scaled(self, rng):
        x = AudioBuffer(rng.standard_normal(FS_TX), FS_TX)
        y = x.with_samples(0.5 * np.r_[np.zeros(100), x.mono[:-100]])
        corr, lag, gain = aligned_similarity(x, y)
        assert corr == pytest.approx(1.0, abs=1e-6)
        assert lag == 100 and gain == pytest.approx(0.5)

    def test_orthogonal_tones(self):
        corr, _, _ = aligned_similarity(sine(1000, 1.0, FS_TX), sine(2000, 1.0, FS_TX), 0.0005)
        assert corr <= 0.05

    def test_short_overlap(self):
        with pytest.raises(ContractError):
            aligned_similarity(sine(1000, 0.4, FS_TX), sine(1000, 0.4, FS_TX))


class TestItd:
    def test_right_delayed(self, rng):
        x = AudioBuffer(rng.standard_normal(FS_RX // 2), FS_RX)
        itd = measure_itd(x, delay(x, 73))
        assert itd == pytest.approx(-73 / FS_RX, abs=1 / FS_RX)
        assert itd == pytest.approx(-3.802e-4, abs=1 / FS_RX)

    def test_fractional(self, rng):
        from scipy import signal
        x = AudioBuffer(signal.sosfilt(signal.butter(6, 0.1, output="sos"), rng.standard_normal(FS_RX // 2)),
                        FS_RX)
        assert measure_itd(delay(x, 10.4), x) * FS_RX == pytest.approx(10.4, abs=0.2)

    def test_equal(self, rng):
        x = AudioBuffer(rng.standard_normal(FS_RX // 4), FS_RX)
        assert measure_itd(x, x) == pytest.approx(0.0, abs=1e-12)

    def test_silence(self):
        z = AudioBuffer.zeros(1000, FS_RX)
        with pytest.raises(UndefinedITDError):
            measure_itd(z, z)


class TestCrosstalk:
    def test_disjoint_tones(self):
        a, b = sine(1000, 1.0, FS_RX, 0.5), sine(2000, 1.0, FS_RX, 0.5)
        leaky = a.with_samples(a.samples + 0.001 * b.samples)
        assert crosstalk(leaky, b) == pytest.approx(-60, abs=0.1)
        assert crosstalk(b, b) == pytest.approx(0.0, abs=1e-9)

    def test_band_form(self):
        b = sine(2000, 1.0, FS_RX, 0.5)
        assert crosstalk(b, b, band=(1900, 2100)) == pytest.approx(0.0, abs=1e-9)
        assert crosstalk(sine(1000, 1.0, FS_RX), b, band=(1900, 2100)) <= -80

    def test_nothing_to_leak(self):
        assert crosstalk(sine(1000, 1.0, FS_RX), AudioBuffer.zeros(FS_RX, FS_RX)) <= -80

    def test_own_program_removed(self, rng):
        a = AudioBuffer(rng.standard_normal(FS_RX), FS_RX)
        b = AudioBuffer(rng.standard_normal(FS_RX), FS_RX)
        target = a.with_samples(0.7 * np.r_[np.zeros(40), a.mono[:-40]] + 0.01 * b.mono)
        assert crosstalk(target, b, target_program=a) == pytest.approx(-40, abs=0.5)


def test_occupied_edge():
    spec = [(float(f), -120.0) for f in range(20000, 30001, 10)]
    spec = [(f, -20.0 if 26000 <= f < 30000 else lvl) for f, lvl in spec]
    assert occupied_lower_edge(spec, 30000, 20000) == pytest.approx(26000, abs=50)


class TestReport:
    def test_round_trip(self, tmp_path):
        report = AnalysisReport(correlation=0.99, lag_samples=3, snr_db=20.0, leakage_audible_db=-80.0,
                                normalization_factor=0.5, config_echo={"seed": 0},
                                gates=[{"metric": "x", "passed": True}],
                                spectra={"composite": [(0.0, -120.0), (10.0, -3.0)]})
        path = write_report(report, tmp_path / "r.json")
        doc = read_report(path)
        assert doc["schema"] == REPORT_SCHEMA
        for key in ("correlation", "lag_samples", "snr_db", "leakage_audible_db", "crosstalk_db",
                    "itd_error_samples", "normalization_factor", "config_echo", "gates", "passed"):
            assert key in doc
        csv_lines = (tmp_path / doc["sidecars"]["composite"]).read_text().splitlines()
        assert csv_lines[0] == "freq_hz,magnitude_dbfs" and len(csv_lines) == 3

    def test_empty(self, tmp_path):
        doc = json.loads(write_report(AnalysisReport(), tmp_path / "e.json").read_text())
        assert doc["correlation"] is None and doc["crosstalk_db"] is None and doc["passed"] is True

    def test_deterministic_bytes(self, tmp_path):
        report = AnalysisReport(correlation=0.123456789012345, metrics={"a": np.float64(1 / 3)})
        a = write_report(report, tmp_path / "a.json", timestamp=False).read_bytes()
        b = write_report(report, tmp_path / "b.json", timestamp=False).read_bytes()
        assert a == b

    def test_invariants(self):
        with pytest.raises(ContractError):
            AnalysisReport(correlation=1.5)
        with pytest.raises(ContractError):
            AnalysisReport(snr_db=float("inf"))

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match="file"):
            write_report(AnalysisReport(), blocker / "r.json")
