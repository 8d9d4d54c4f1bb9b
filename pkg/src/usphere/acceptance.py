"""Acceptance suite run by ``usphere selftest``.

Each criterion builds its own fixtures from a seed, runs the library
pipeline and returns one or more gates. Limits come from the thresholds
table (``config.DEFAULT_THRESHOLDS`` unless overridden).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis
from .channel_sim import (EAR_RATE_HZ, Listener, SceneModel, Source, itd_delays, make_ambient, propagate,
                          source_azimuth)
from .config import DEFAULT_THRESHOLDS
from .core_dsp import AudioBuffer, BiquadCascade, filter, upsample_2x
from .demodulator import (RxConfig, decode_ear, demodulate_coherent, demodulate_envelope, select_channel,
                          unity_amplification)
from .io import generate_fixture
from .modulator import (ChannelPlan, ChannelSpec, OvermodulationError, am_modulate, compose, peak_normalize,
                        prefilter)

# closed-form Woodworth ITD for r = 0.0875 m, c = 343 m/s, 45 degrees
WOODWORTH_45_S = 0.0875 / 343.0 * (math.pi / 4 + math.sin(math.pi / 4))


@dataclass
class Gate:
    criterion: str
    name: str
    value: float | bool | None
    limit: str
    passed: bool
    detail: dict = field(default_factory=dict)
    volatile: bool = False  # wall-clock values stay out of the report bytes

    def as_dict(self) -> dict:
        return {"criterion": self.criterion, "name": self.name,
                "value": None if self.volatile else self.value,
                "limit": self.limit, "passed": bool(self.passed), "detail": self.detail}


def _gate(criterion, name, value, op, limit, **detail) -> Gate:
    ok = {"<=": value <= limit, ">=": value >= limit}[op]
    return Gate(str(criterion), name, float(value), f"{op} {limit:g}", bool(ok), detail)


def _trim(buf: AudioBuffer, settle_s: float) -> AudioBuffer:
    return buf.with_samples(buf.samples[int(round(settle_s * buf.sample_rate_hz)):])


def tone_amplitude(x: np.ndarray, freq_hz: float, rate_hz: int) -> float:
    """Least-squares amplitude of a sinusoid at a known frequency."""
    t = np.arange(len(x)) / rate_hz
    basis = np.column_stack([np.sin(2 * np.pi * freq_hz * t), np.cos(2 * np.pi * freq_hz * t),
                             np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    return float(math.hypot(coef[0], coef[1]))


def _projection_db(x: np.ndarray, ref: np.ndarray) -> float:
    n = min(len(x), len(ref))
    energy = float(np.dot(ref[:n], ref[:n]))
    if energy == 0.0:
        return analysis.FLOOR_DB
    return 20 * math.log10(max(abs(float(np.dot(x[:n], ref[:n]))) / energy, 1e-6))


def _speech(seed: int, duration_s: float = 5.0) -> AudioBuffer:
    return peak_normalize(prefilter(generate_fixture("speech_like_noise", duration_s, 96000, seed=seed)))


def _tone(freq_hz: float, duration_s: float, amplitude: float) -> AudioBuffer:
    return generate_fixture("tone", duration_s, 96000, freq_hz=freq_hz, amplitude=amplitude)


def _on_axis(composite: AudioBuffer, distance_m: float = 1.0, theta: float = 0.0, ambient=None):
    pos = (distance_m * math.sin(theta), distance_m * math.cos(theta))
    return SceneModel([Source(pos, composite)] if composite is not None else [], Listener(), ambient=ambient)


# -- criteria ------------------------------------------------------------------

def round_trip(th: dict, seed: int = 0) -> list[Gate]:
    start = time.perf_counter()
    x = _speech(seed + 1)
    spec = ChannelSpec(30000.0, mod_index=0.9)
    comp = compose([x], ChannelPlan([spec]))
    ears = propagate(_on_axis(comp.buffer))
    cfg = RxConfig(spec)
    left = decode_ear(ears.left, cfg)
    elapsed = time.perf_counter() - start

    ref = upsample_2x(x)
    corr, lag, gain = analysis.aligned_similarity(_trim(ref, th["settle_s"]), _trim(left, th["settle_s"]), 0.02)
    expected = comp.normalization_factor  # 1 m, on axis
    err_db = 20 * math.log10(gain / expected)
    return [
        _gate(1, "round-trip correlation", corr, ">=", th["min_correlation"], lag_samples=lag),
        _gate(1, "round-trip |gain error| dB", abs(err_db), "<=", th["max_gain_error_db"],
              gain=gain, expected_gain=expected),
        Gate("1", "round-trip runtime s", elapsed, f"<= {th['max_roundtrip_runtime_s']:g}",
             elapsed <= th["max_roundtrip_runtime_s"], volatile=True),
    ]


def inaudibility(th: dict, seed: int = 0) -> list[Gate]:
    plan = ChannelPlan([ChannelSpec(30000.0), ChannelSpec(40000.0)])
    comp = compose([_speech(seed + 1), _speech(seed + 2)], plan).buffer
    audible = analysis.band_energy(comp, 20.0, 20000.0)
    ultrasonic = analysis.band_energy(comp, 22000.0, 48000.0)
    spec = analysis.spectrum(comp)
    edge = analysis.occupied_lower_edge(spec, 30000.0, 20000.0)
    target = plan.channels[0].band[0]
    return [
        _gate(2, "audible minus ultrasonic energy dB", audible - ultrasonic, "<=", th["max_leakage_db"],
              audible_dbfs=audible, ultrasonic_dbfs=ultrasonic),
        _gate(2, "lower sideband edge error Hz", abs(edge - target), "<=", th["lower_edge_tolerance_hz"],
              edge_hz=edge, target_hz=target),
    ]


def isolation(th: dict, seed: int = 0) -> list[Gate]:
    duration = 2.0
    programs = [_tone(1000.0, duration, 0.8), _tone(2000.0, duration, 0.8)]
    plan = ChannelPlan([ChannelSpec(30000.0), ChannelSpec(40000.0)])
    comp = compose(programs, plan)
    ears = propagate(_on_axis(comp.buffer))

    cfg = RxConfig(plan.channels[0])
    decoded = []
    for i, spec in enumerate(plan.channels):
        cfg = select_channel(cfg, spec)  # the tap gesture: retune, decode again
        decoded.append(_trim(decode_ear(ears.left, cfg), th["settle_s"]))

    gates = []
    for i, j in ((0, 1), (1, 0)):
        xt = analysis.crosstalk(decoded[i], decoded[j])
        gates.append(_gate(3, f"crosstalk ch{j} into ch{i} dB", xt, "<=", th["max_crosstalk_db"]))
    for i, prog in enumerate(programs):
        ref = _trim(upsample_2x(prog), th["settle_s"])
        corr, _, _ = analysis.aligned_similarity(ref, decoded[i], 0.02)
        gates.append(_gate(3, f"ch{i} program recovered, correlation", corr, ">=", th["min_correlation"]))
    return gates


def demod_equivalence(th: dict, seed: int = 0) -> list[Gate]:
    spec = ChannelSpec(30000.0)
    rx = upsample_2x(am_modulate(_speech(seed + 1), spec))
    coherent = demodulate_coherent(rx, spec.carrier_hz, 0.0, spec.mod_index)
    envelope = demodulate_envelope(rx, RxConfig(spec))
    corr, lag, _ = analysis.aligned_similarity(_trim(coherent, th["settle_s"]), _trim(envelope, th["settle_s"]),
                                               0.02)
    return [_gate(4, "envelope vs coherent correlation", corr, ">=", th["min_equivalence_correlation"],
                  lag_samples=lag)]


def gain_law(th: dict, seed: int = 0) -> list[Gate]:
    k, amp, f = 0.9, 0.4, 1000.0
    spec = ChannelSpec(30000.0, mod_index=k)
    rx = upsample_2x(am_modulate(_tone(f, 1.0, amp), spec))
    gates = []
    for factor in (0.5, 1.0, 2.0):
        a = factor * unity_amplification(k)
        out = _trim(demodulate_envelope(rx, RxConfig(spec, amplification_A=a)), th["settle_s"])
        measured = tone_amplitude(out.mono, f, EAR_RATE_HZ) / amp
        predicted = 4 * a * k / math.pi
        gates.append(_gate(5, f"gain law relative error, A = {factor:g} unity", abs(measured / predicted - 1),
                           "<=", th["gain_law_tolerance"], measured=measured, predicted=predicted))
    return gates


def itd_preservation(th: dict, seed: int = 0) -> list[Gate]:
    theta = math.pi / 4
    spec = ChannelSpec(30000.0)
    comp = compose([_speech(seed + 1, 2.0)], ChannelPlan([spec]))
    scene = _on_axis(comp.buffer, 1.0, theta)
    ears = propagate(scene)
    cfg = RxConfig(spec)
    left, right = decode_ear(ears.left, cfg), decode_ear(ears.right, cfg)
    measured = analysis.measure_itd(_trim(left, th["settle_s"]), _trim(right, th["settle_s"]))
    d_left, d_right = itd_delays(source_azimuth(scene.sources[0].position, scene.listener))
    model = d_left - d_right  # positive: right ear leads
    err = abs(measured - model) * EAR_RATE_HZ
    return [_gate(6, "ITD error samples at 192 kHz", err, "<=", th["max_itd_error_samples"],
                  measured_s=measured, model_s=model, closed_form_s=WOODWORTH_45_S)]


def overmodulation_guard(th: dict, seed: int = 0) -> list[Gate]:
    rng = np.random.default_rng([seed, 7])
    spec = ChannelSpec(30000.0, mod_index=0.9)
    rejected = accepted = 0
    min_envelope = math.inf
    trials = 40
    for _ in range(trials):
        x = rng.uniform(-1, 1, 4800) * rng.uniform(0.2, 1.5)
        buf = AudioBuffer(x, 96000)
        peak = float(np.max(np.abs(x)))
        try:
            am_modulate(buf, spec)
        except OvermodulationError:
            rejected += int(spec.mod_index * peak > 1)
            continue
        accepted += int(spec.mod_index * peak <= 1)
        min_envelope = min(min_envelope, float(np.min(1 + spec.mod_index * x)))
    return [
        Gate("7", "inputs classified correctly", float(rejected + accepted), f"== {trials}",
             rejected + accepted == trials, {"rejected": rejected, "accepted": accepted}),
        _gate(7, "minimum accepted envelope", min_envelope, ">=", 0.0),
    ]


def transparency(th: dict, seed: int = 0) -> list[Gate]:
    duration = 2.0
    spec = ChannelSpec(30000.0)
    narration = _tone(1000.0, duration, 0.5)
    comp = compose([narration], ChannelPlan([spec])).buffer
    ambient = make_ambient("tone", duration, -20.0, seed, freq_hz=440.0)
    cfg = RxConfig(spec)
    muted = replace(cfg, transparency_gain=0.0)

    def run(with_narration, with_ambient, rx_cfg):
        scene = _on_axis(comp if with_narration else None, ambient=ambient if with_ambient else None)
        return _trim(decode_ear(propagate(scene).left, rx_cfg), th["settle_s"]).mono

    solo_n = run(True, False, cfg)
    solo_a = run(False, True, cfg)
    both = run(True, True, cfg)
    both_muted = run(True, True, muted)

    n_level = _projection_db(both, solo_n)
    a_level = _projection_db(both, solo_a)
    leak = _projection_db(both_muted, solo_a)
    tol = th["transparency_tolerance_db"]
    return [
        _gate(8, "narration level vs solo |dB|", abs(n_level), "<=", tol),
        _gate(8, "ambient level vs solo |dB|", abs(a_level), "<=", tol),
        _gate(8, "ambient leakage at transparency 0 dB", leak, "<=", th["max_ambient_leakage_db"]),
    ]


def filter_stability(th: dict, seed: int = 0, inject_fault: bool = False) -> list[Gate]:
    """Every receiver stage for the demo channels has poles inside the unit circle."""
    worst = 0.0
    stages = []
    for carrier_hz in (30000.0, 40000.0):
        stages += list(RxConfig(ChannelSpec(carrier_hz)).stages())
    if inject_fault:
        sos = stages[1].sections.copy()
        sos[0, 5] = 1.21  # pole radius 1.1
        stages[1] = BiquadCascade(sos, stages[1].design_sample_rate_hz, stages[1].description + "+fault")
    for stage in stages:
        worst = max(worst, float(np.max(stage.pole_radii())))
    impulse = AudioBuffer(np.r_[1.0, np.zeros(4095)], EAR_RATE_HZ)
    finite = True
    for stage in stages:
        try:
            filter(stage, impulse)
        except ValueError:
            finite = False
    return [_gate("S", "largest pole radius", worst, "<=", 1.0 - 1e-9, all_outputs_finite=finite)]


CRITERIA = {
    "1": round_trip,
    "2": inaudibility,
    "3": isolation,
    "4": demod_equivalence,
    "5": gain_law,
    "6": itd_preservation,
    "7": overmodulation_guard,
    "8": transparency,
}

TITLES = {
    "S": "filter stability",
    "1": "round-trip fidelity",
    "2": "inaudibility",
    "3": "multi-channel isolation",
    "4": "demodulator equivalence",
    "5": "envelope gain law",
    "6": "ITD preservation",
    "7": "overmodulation guard",
    "8": "transparency",
    "9": "determinism",
}


def run_criteria(thresholds: dict | None = None, seed: int = 0, inject_fault: bool = False) -> list[Gate]:
    th = dict(DEFAULT_THRESHOLDS, **(thresholds or {}))
    gates = filter_stability(th, seed, inject_fault)
    for fn in CRITERIA.values():
        gates += fn(th, seed)
    return gates


def report_bytes(gates) -> bytes:
    return json.dumps([g.as_dict() for g in gates], indent=2, sort_keys=True).encode()


def run_selftest(thresholds: dict | None = None, seed: int = 0, inject_fault: bool = False,
                 repeats: int = 2) -> list[Gate]:
    """All criteria, repeated to check that the report bytes do not change."""
    th = dict(DEFAULT_THRESHOLDS, **(thresholds or {}))
    start = time.perf_counter()
    runs = [run_criteria(th, seed, inject_fault) for _ in range(repeats)]
    elapsed = time.perf_counter() - start
    gates = runs[0]
    identical = len({report_bytes(g) for g in runs}) == 1
    gates.append(Gate("9", f"reports identical over {repeats} runs", identical, "== True", identical))
    gates.append(Gate("9", "selftest runtime s", elapsed, f"<= {th['max_selftest_runtime_s']:g}",
                      elapsed <= th["max_selftest_runtime_s"], volatile=True))
    return gates


def summary_table(gates) -> str:
    rows = []
    for g in gates:
        value = g.value if isinstance(g.value, bool) else (f"{g.value:.6g}" if g.value is not None else "-")
        rows.append((g.criterion, TITLES.get(g.criterion, ""), g.name, value, g.limit,
                     "PASS" if g.passed else "FAIL"))
    widths = [max(len(str(r[c])) for r in rows) for c in range(6)]
    lines = ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    verdict = "all gates passed" if all(g.passed for g in gates) else \
        f"{sum(not g.passed for g in gates)} gate(s) FAILED"
    return "\n".join(lines + [verdict])
