"""``usphere`` command line: encode, simulate, decode, analyze, selftest.

Stages talk to each other only through files in the output directory::

    composite.wav (+ .json)      encode     96 kHz transmit composite
    ears.wav (+ .json)           simulate   192 kHz stereo ear signals
    decoded_ch<i>.wav (+ .json)  decode     192 kHz stereo audible output
    report.json, report.*.csv, report.*.png   analyze
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import acceptance, analysis
from .analysis import AnalysisReport, UndefinedITDError
from .channel_sim import (EAR_RATE_HZ, EarSignals, SceneModel, directivity_gain, distance, itd_delays,
                          propagate, source_azimuth)
from .config import ConfigError, RunConfig, load_config
from .core_dsp import AudioBuffer, ContractError, InvalidDesignError, upsample_2x
from .demodulator import EnvelopeDecoder, decode_ear
from .io import ClippingError, WavError, read_wav, write_wav
from .modulator import OvermodulationError, compose
from .plotting import plot_report_spectra

log = logging.getLogger("usphere")

EXIT_OK, EXIT_GATE, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

COMPOSITE = "composite.wav"
EARS = "ears.wav"
REPORT = "report.json"
SELFTEST_REPORT = "selftest_report.json"


def decoded_name(channel: int) -> str:
    return f"decoded_ch{channel}.wav"


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(analysis._clean(doc), indent=2) + "\n")


def _read_input(path: Path) -> AudioBuffer:
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run the previous stage first")
    buf, _ = read_wav(path)
    return buf


# -- commands ------------------------------------------------------------------

def cmd_encode(cfg: RunConfig) -> Path:
    """Band-limit, modulate and sum every channel into the 96 kHz composite WAV."""
    audios = [cfg.channel_audio(i) for i in range(len(cfg.channels))]
    comp = compose(audios, cfg.plan, pad=True)
    out = cfg.output_dir / COMPOSITE
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_wav(comp.buffer, out, cfg.bit_format)
    _write_json(out.with_suffix(".json"), {
        "stage": "encode",
        "seed": cfg.seed,
        "transmit_rate_hz": cfg.transmit_rate_hz,
        "normalization_factor": comp.normalization_factor,
        "raw_peak": comp.raw_peak,
        "channels": [{"index": i, "name": c.name, "carrier_hz": c.spec.carrier_hz,
                      "audio_bw_hz": c.spec.audio_bw_hz, "mod_index": c.spec.mod_index, "gain": c.spec.gain,
                      "band_hz": list(c.spec.band)} for i, c in enumerate(cfg.channels)],
    })
    log.info("composite written to %s (normalization %.4f)", out, comp.normalization_factor)
    return out


def _scene(cfg: RunConfig, composite: AudioBuffer) -> SceneModel:
    sources = cfg.sources(composite)
    ambient = cfg.ambient(composite.duration_s)
    return SceneModel(sources, cfg.listener(), float(cfg.scene.get("speed_of_sound_mps", 343.0)), ambient,
                      cfg.scene.get("noise_snr_db"), cfg.seed)


def cmd_simulate(cfg: RunConfig) -> Path:
    """Propagate the composite (or per-source inputs) to both ears of the listener."""
    composite = _read_input(cfg.output_dir / COMPOSITE)
    if composite.sample_rate_hz != cfg.transmit_rate_hz:
        raise ContractError(f"{COMPOSITE} is {composite.sample_rate_hz} Hz, expected {cfg.transmit_rate_hz} Hz")
    scene = _scene(cfg, composite)
    ears = propagate(scene)
    out = cfg.output_dir / EARS
    write_wav(ears.as_stereo(), out, cfg.bit_format)
    lst = scene.listener
    _write_json(out.with_suffix(".json"), {
        "stage": "simulate",
        "seed": cfg.seed,
        "sample_rate_hz": EAR_RATE_HZ,
        "speed_of_sound_mps": scene.speed_of_sound_mps,
        "noise_snr_db": scene.noise_snr_db,
        "listener": {"position": list(lst.position), "facing_azimuth_rad": lst.facing_azimuth_rad,
                     "head_radius_m": lst.head_radius_m},
        "sources": [{"position": list(s.position), "directivity_exponent": s.directivity_exponent,
                     "facing_rad": s.facing_rad, "distance_m": distance(s.position, lst.position),
                     "azimuth_rad": source_azimuth(s.position, lst)} for s in scene.sources],
        "ambient": cfg.scene.get("ambient"),
    })
    return out


def cmd_decode(cfg: RunConfig, channel: int | None = None) -> Path:
    """Decode one channel independently at each ear, with the transparency remix."""
    channel = cfg.default_channel if channel is None else channel
    rx = cfg.rx_config(channel)
    ears = EarSignals.from_stereo(_read_input(cfg.output_dir / EARS))
    left, right = decode_ear(ears.left, rx), decode_ear(ears.right, rx)
    out = cfg.output_dir / decoded_name(channel)
    write_wav(AudioBuffer.stack([left, right]), out, cfg.bit_format)
    _write_json(out.with_suffix(".json"), {
        "stage": "decode",
        "channel": channel,
        "name": cfg.channels[channel].name,
        "carrier_hz": rx.channel.carrier_hz,
        "amplification_A": rx.gain_A,
        "transparency_gain": rx.transparency_gain,
        "latency_samples": EnvelopeDecoder(rx).latency_samples,
        "stages": [s.description for s in rx.stages()],
    })
    return out


def _expected_gain(cfg: RunConfig, scene: SceneModel, channel: int, norm: float | None) -> float | None:
    if len(scene.sources) != 1 or norm is None:
        return None
    src = scene.sources[0]
    return norm * cfg.channels[channel].spec.gain * directivity_gain(src, scene.listener.position) / \
        distance(src.position, scene.listener.position)


def cmd_analyze(cfg: RunConfig) -> AnalysisReport:
    """Measure everything the stage outputs allow and gate it against the config thresholds."""
    th = cfg.thresholds
    settle = th["settle_s"]
    trim = acceptance._trim
    out_dir = cfg.output_dir
    composite = _read_input(out_dir / COMPOSITE)
    sidecar = out_dir / "composite.json"
    norm = json.loads(sidecar.read_text())["normalization_factor"] if sidecar.is_file() else None

    report = AnalysisReport(normalization_factor=norm, config_echo=cfg.echo())
    spectra = {"composite": analysis.spectrum(composite)}
    nyquist = composite.sample_rate_hz / 2
    audible = analysis.band_energy(composite, 20.0, 20000.0)
    ultrasonic = analysis.band_energy(composite, 22000.0, nyquist)
    report.leakage_audible_db = audible - ultrasonic
    report.metrics["audible_dbfs"] = audible
    report.metrics["ultrasonic_dbfs"] = ultrasonic
    report.metrics["lower_edge_hz"] = {
        str(i): analysis.occupied_lower_edge(spectra["composite"], c.spec.carrier_hz,
                                             c.spec.carrier_hz - c.spec.audio_bw_hz - 1000.0)
        for i, c in enumerate(cfg.channels)}
    gates = [_threshold_gate("leakage_audible_db", report.leakage_audible_db, "<=", th["max_leakage_db"])]

    ears_path = out_dir / EARS
    if ears_path.is_file():
        ears = EarSignals.from_stereo(_read_input(ears_path))
        spectra["ear_left"] = analysis.spectrum(ears.left)
        spectra["ear_right"] = analysis.spectrum(ears.right)
        scene = _scene(cfg, composite)
    else:
        scene = None

    decoded = {}
    for i in range(len(cfg.channels)):
        path = out_dir / decoded_name(i)
        if path.is_file():
            decoded[i] = EarSignals.from_stereo(_read_input(path))
    programs = {i: trim(upsample_2x(cfg.channel_audio(i)), settle) for i in decoded}

    per_channel = {}
    for i, ears_out in decoded.items():
        left = trim(ears_out.left, settle)
        spectra[f"decoded_ch{i}"] = analysis.spectrum(ears_out.left)
        corr, lag, gain = analysis.aligned_similarity(programs[i], left, 0.05)
        entry = {"correlation": corr, "lag_samples": lag, "gain": gain,
                 "snr_db": 10 * math.log10(corr ** 2 / max(1 - corr ** 2, 1e-12)) if corr > 0 else None}
        expected = _expected_gain(cfg, scene, i, norm) if scene is not None else None
        if expected and gain > 0:
            entry["gain_error_db"] = 20 * math.log10(gain / expected)
        per_channel[str(i)] = entry
        gates.append(_threshold_gate(f"ch{i} correlation", corr, ">=", th["min_correlation"]))
        if "gain_error_db" in entry:
            gates.append(_threshold_gate(f"ch{i} |gain error| dB", abs(entry["gain_error_db"]), "<=",
                                         th["max_gain_error_db"]))
    report.metrics["channels"] = per_channel
    if per_channel:
        worst = min(per_channel, key=lambda k: per_channel[k]["correlation"])
        report.correlation = per_channel[worst]["correlation"]
        report.lag_samples = per_channel[worst]["lag_samples"]
        report.snr_db = per_channel[worst]["snr_db"]

    pairs = {}
    for i in decoded:
        for j in decoded:
            if i != j:
                pairs[f"{j}->{i}"] = analysis.crosstalk(trim(decoded[i].left, settle), trim(decoded[j].left, settle),
                                                        target_program=programs[i])
    if pairs:
        report.metrics["crosstalk_db"] = pairs
        report.crosstalk_db = max(pairs.values())
        gates.append(_threshold_gate("crosstalk_db", report.crosstalk_db, "<=", th["max_crosstalk_db"]))

    if decoded and scene is not None and scene.sources:
        first = decoded[min(decoded)]
        lst = scene.listener
        d_left, d_right = itd_delays(source_azimuth(scene.sources[0].position, lst), lst.head_radius_m,
                                     scene.speed_of_sound_mps)
        try:
            measured = analysis.measure_itd(trim(first.left, settle), trim(first.right, settle))
            report.itd_error_samples = abs(measured - (d_left - d_right)) * EAR_RATE_HZ
            report.metrics["itd_s"] = {"measured": measured, "model": d_left - d_right}
            gates.append(_threshold_gate("itd_error_samples", report.itd_error_samples, "<=",
                                         th["max_itd_error_samples"]))
        except UndefinedITDError as exc:
            report.metrics["itd_s"] = {"measured": None, "model": d_left - d_right, "note": str(exc)}

    report.gates = gates
    report.spectra = spectra
    path = out_dir / REPORT
    analysis.write_report(report, path)
    plot_report_spectra(spectra, path, [c.spec.band for c in cfg.channels])
    return report


def _threshold_gate(metric: str, value: float, op: str, limit: float) -> dict:
    ok = value <= limit if op == "<=" else value >= limit
    return {"metric": metric, "value": value, "limit": f"{op} {limit:g}", "passed": bool(ok)}


def cmd_selftest(thresholds: dict, out_dir: Path, seed: int = 0, inject_fault: bool = False):
    gates = acceptance.run_selftest(thresholds, seed, inject_fault)
    by_name = {(g.criterion, g.name): g.value for g in gates}
    report = AnalysisReport(
        correlation=by_name[("1", "round-trip correlation")],
        leakage_audible_db=by_name[("2", "audible minus ultrasonic energy dB")],
        crosstalk_db=max(g.value for g in gates if g.criterion == "3" and g.name.startswith("crosstalk")),
        itd_error_samples=by_name[("6", "ITD error samples at 192 kHz")],
        config_echo={"seed": seed, "thresholds": thresholds, "inject_fault": inject_fault},
        gates=[g.as_dict() for g in gates],
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_report(report, out_dir / SELFTEST_REPORT)
    return gates, report


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usphere", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("encode", "simulate", "decode", "analyze", "selftest"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "selftest", help="run description (TOML)")
        p.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. receiver.transparency_gain=0")
        if name == "decode":
            p.add_argument("--channel", type=int, help="channel index to decode (default receiver.channel)")
        if name == "selftest":
            p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def _setup_logging():
    level = os.environ.get("USPHERE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            th = load_config(args.config, args.overrides).thresholds if args.config else None
            th = th or dict(acceptance.DEFAULT_THRESHOLDS)
            gates, _ = cmd_selftest(th, args.out or Path("usphere_selftest"), args.seed or 0, args.inject_fault)
            print(acceptance.summary_table(gates))
            return EXIT_OK if all(g.passed for g in gates) else EXIT_GATE

        cfg = load_config(args.config, args.overrides, args.seed)
        if args.out is not None:
            cfg.output_dir = args.out
        if args.command == "encode":
            print(cmd_encode(cfg))
        elif args.command == "simulate":
            print(cmd_simulate(cfg))
        elif args.command == "decode":
            print(cmd_decode(cfg, args.channel))
        else:
            report = cmd_analyze(cfg)
            for g in report.gates:
                value = "null" if g["value"] is None else f"{g['value']:.6g}"
                print(f"{'PASS' if g['passed'] else 'FAIL'}  {g['metric']:<24} {value:>12}  {g['limit']}")
            print(cfg.output_dir / REPORT)
            return EXIT_OK if report.passed else EXIT_GATE
        return EXIT_OK
    except OvermodulationError as exc:
        print(f"usphere: refused: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WavError, ClippingError, FileNotFoundError, OSError) as exc:
        print(f"usphere: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, InvalidDesignError) as exc:
        print(f"usphere: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
