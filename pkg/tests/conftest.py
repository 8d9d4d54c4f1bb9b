import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from usphere.core_dsp import AudioBuffer

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FS_TX = 96000
FS_RX = 192000


def sine(freq_hz, duration_s, rate, amplitude=1.0, phase=0.0):
    t = np.arange(int(round(duration_s * rate))) / rate
    return AudioBuffer(amplitude * np.sin(2 * np.pi * freq_hz * t + phase), rate)


def dft_amplitude(x, freq_hz, rate):
    """Amplitude of one frequency by direct correlation; exact over whole periods."""
    x = np.asarray(x, dtype=float)
    period = rate / freq_hz
    n = int(np.floor(len(x) / period) * period)
    n = max(n, 1)
    t = np.arange(n) / rate
    z = np.dot(x[:n], np.exp(-2j * np.pi * freq_hz * t))
    return 2 * abs(z) / n


def tail(buf, seconds):
    """Last ``seconds`` of a buffer as a flat array (past filter start-up)."""
    return buf.mono[-int(seconds * buf.sample_rate_hz):]


def db(ratio):
    return 20 * np.log10(ratio)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
