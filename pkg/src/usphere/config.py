"""Run configuration: one TOML file describing a full experiment.

Layout::

    seed = 0

    [plan]
    transmit_rate_hz = 96000
    [[plan.channels]]
    name = "english"
    carrier_hz = 30000
    fixture = { kind = "speech_like_noise", duration_s = 5, seed = 1 }   # or input = "narration.wav"

    [scene]                  # optional; default is one source 1 m ahead
    [scene.listener]
    [[scene.sources]]
    [scene.ambient]

    [receiver]               # RxConfig fields except the channel itself
    [receiver.limiter]

    [output]
    [thresholds]

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .channel_sim import EAR_RATE_HZ, Listener, Source, make_ambient
from .core_dsp import AudioBuffer, LimiterParams
from .demodulator import RxConfig
from .io import FORMATS, generate_fixture, read_wav
from .modulator import ChannelPlan, ChannelSpec, peak_normalize, prefilter, validate_plan


class ConfigError(ValueError):
    """Config file is unreadable, incomplete or describes an illegal run."""


DEFAULT_THRESHOLDS = {
    "min_correlation": 0.99,
    "max_gain_error_db": 1.0,
    "max_leakage_db": -60.0,
    "lower_edge_tolerance_hz": 500.0,
    "max_crosstalk_db": -40.0,
    "min_equivalence_correlation": 0.995,
    "gain_law_tolerance": 0.02,
    "max_itd_error_samples": 2.0,
    "transparency_tolerance_db": 1.0,
    "max_ambient_leakage_db": -60.0,
    "max_roundtrip_runtime_s": 10.0,
    "max_selftest_runtime_s": 120.0,
    "settle_s": 0.25,
}

_RECEIVER_KEYS = {
    "eq_center_hz", "eq_gain_db", "eq_q", "bpf_half_bw_hz", "bpf_stop_atten_db", "bpf_order",
    "post_lpf_cutoff_hz", "post_lpf_order", "dc_cutoff_hz", "phase_eq_sections", "amplification_A",
    "transparency_gain", "channel",
}
_LIMITER_KEYS = {"threshold_dbfs", "attack_s", "release_s", "lookahead_s"}
_CHANNEL_KEYS = {"name", "carrier_hz", "audio_bw_hz", "mod_index", "gain", "normalize", "input", "fixture",
                 "prefilter_hz"}


@dataclass
class ChannelInput:
    name: str
    spec: ChannelSpec
    input_path: Path | None = None
    fixture: dict | None = None
    normalize: bool = True
    prefilter_hz: float | None = 4000.0


@dataclass
class RunConfig:
    seed: int
    channels: list
    transmit_rate_hz: int = 96000
    scene: dict = field(default_factory=dict)
    receiver: dict = field(default_factory=dict)
    output_dir: Path = Path("usphere_out")
    bit_format: str = "float32"
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    @property
    def plan(self) -> ChannelPlan:
        return ChannelPlan([c.spec for c in self.channels], self.transmit_rate_hz)

    def channel_audio(self, index: int) -> AudioBuffer:
        """Program audio for one channel, band-limited and (optionally) peak-normalized."""
        ch = self.channels[index]
        if ch.input_path is not None:
            audio, _ = read_wav(ch.input_path)
            if audio.channels > 1:
                audio = audio.with_samples(audio.samples.mean(axis=1))
        else:
            fx = dict(ch.fixture)
            kind = fx.pop("kind")
            fx.setdefault("seed", self.seed + index)
            audio = generate_fixture(kind, sample_rate_hz=self.transmit_rate_hz, **fx)
        if audio.sample_rate_hz != self.transmit_rate_hz:
            raise ConfigError(f"channel {index} input is {audio.sample_rate_hz} Hz, plan needs "
                              f"{self.transmit_rate_hz} Hz")
        if ch.prefilter_hz:
            audio = prefilter(audio, ch.prefilter_hz)
        if ch.normalize:
            audio = peak_normalize(audio)
        return audio

    def rx_config(self, channel_index: int) -> RxConfig:
        if not 0 <= channel_index < len(self.channels):
            raise ConfigError(f"channel index {channel_index} out of range: plan has "
                              f"{len(self.channels)} channel(s)")
        opts = {k: v for k, v in self.receiver.items() if k not in ("limiter", "channel")}
        limiter = LimiterParams(**self.receiver.get("limiter", {}))
        return RxConfig(self.channels[channel_index].spec, limiter=limiter, sample_rate_hz=EAR_RATE_HZ, **opts)

    @property
    def default_channel(self) -> int:
        return int(self.receiver.get("channel", 0))

    def listener(self) -> Listener:
        opts = dict(self.scene.get("listener", {}))
        if "position" in opts:
            opts["position"] = tuple(opts["position"])
        return Listener(**opts)

    def sources(self, composite: AudioBuffer) -> list[Source]:
        """Scene sources; any without their own ``input`` radiate ``composite``."""
        specs = self.scene.get("sources") or [{"position": [0.0, 1.0]}]
        out = []
        for src in specs:
            wave = composite
            if "input" in src:
                wave, _ = read_wav(self._path(src["input"]))
            out.append(Source(tuple(src["position"]), wave, float(src.get("directivity_exponent", 8.0)),
                              src.get("facing_rad")))
        return out

    def ambient(self, duration_s: float) -> AudioBuffer | None:
        amb = self.scene.get("ambient")
        if not amb:
            return None
        if "input" in amb:
            buf, _ = read_wav(self._path(amb["input"]))
            return buf
        return make_ambient(amb.get("kind", "silence"), duration_s, float(amb.get("level_dbfs", -20.0)),
                            int(amb.get("seed", self.seed)), freq_hz=float(amb.get("freq_hz", 440.0)))

    def _path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def echo(self) -> dict:
        """Fully resolved parameter dump for report sidecars."""
        doc = copy.deepcopy(self.raw)
        doc["seed"] = self.seed
        doc["thresholds"] = dict(self.thresholds)
        doc.setdefault("output", {})["bit_format"] = self.bit_format
        return doc


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is read as a TOML literal, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, value = text.split("=", 1)
    try:
        parsed = tomli.loads(f"v = {value}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for text in overrides:
        keys, value = parse_override(text)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {k} is not a table")
        node[keys[-1]] = value
    return doc


def default_document() -> dict:
    """The two-channel demo used when no config file is given."""
    return {
        "seed": 0,
        "plan": {"transmit_rate_hz": 96000, "channels": [
            {"name": "english", "carrier_hz": 30000.0,
             "fixture": {"kind": "speech_like_noise", "duration_s": 5.0, "seed": 1}},
            {"name": "german", "carrier_hz": 40000.0,
             "fixture": {"kind": "speech_like_noise", "duration_s": 5.0, "seed": 2}},
        ]},
        "scene": {"sources": [{"position": [0.0, 1.0]}]},
    }


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    if path is None:
        doc, base = default_document(), Path.cwd()
    else:
        path = Path(path)
        try:
            doc = tomli.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.resolve().parent
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    return from_document(doc, base)


def from_document(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    plan = doc.get("plan") or {}
    rate = int(plan.get("transmit_rate_hz", 96000))
    entries = plan.get("channels") or []
    if not entries:
        raise ConfigError("plan.channels is empty")

    channels = []
    for i, entry in enumerate(entries):
        unknown = set(entry) - _CHANNEL_KEYS
        if unknown:
            raise ConfigError(f"plan.channels[{i}]: unknown keys {sorted(unknown)}")
        if "carrier_hz" not in entry:
            raise ConfigError(f"plan.channels[{i}]: carrier_hz is required")
        if ("input" in entry) == ("fixture" in entry):
            raise ConfigError(f"plan.channels[{i}]: give exactly one of input or fixture")
        spec = ChannelSpec(float(entry["carrier_hz"]), float(entry.get("audio_bw_hz", 4000.0)),
                           float(entry.get("mod_index", 0.9)), float(entry.get("gain", 1.0)))
        input_path = None
        if "input" in entry:
            input_path = Path(entry["input"])
            input_path = input_path if input_path.is_absolute() else base_dir / input_path
            if not input_path.is_file():
                raise ConfigError(f"plan.channels[{i}]: input file {input_path} does not exist")
        fixture = dict(entry["fixture"]) if "fixture" in entry else None
        if fixture is not None and "kind" not in fixture:
            raise ConfigError(f"plan.channels[{i}]: fixture needs a kind")
        channels.append(ChannelInput(entry.get("name", f"ch{i}"), spec, input_path, fixture,
                                     bool(entry.get("normalize", True)), entry.get("prefilter_hz", 4000.0)))

    problems = validate_plan(ChannelPlan([c.spec for c in channels], rate))
    if problems:
        raise ConfigError("illegal channel plan:\n  " + "\n  ".join(str(p) for p in problems))

    receiver = dict(doc.get("receiver") or {})
    unknown = set(receiver) - _RECEIVER_KEYS - {"limiter"}
    if unknown:
        raise ConfigError(f"receiver: unknown keys {sorted(unknown)}")
    unknown = set(receiver.get("limiter", {})) - _LIMITER_KEYS
    if unknown:
        raise ConfigError(f"receiver.limiter: unknown keys {sorted(unknown)}")

    scene = dict(doc.get("scene") or {})
    for j, src in enumerate(scene.get("sources") or []):
        if "position" not in src or len(src["position"]) != 2:
            raise ConfigError(f"scene.sources[{j}]: position must be [x, y]")
        if "input" in src and not (base_dir / src["input"]).is_file():
            raise ConfigError(f"scene.sources[{j}]: input file {src['input']} does not exist")
    amb = scene.get("ambient") or {}
    if "input" in amb and not (base_dir / amb["input"]).is_file():
        raise ConfigError(f"scene.ambient: input file {amb['input']} does not exist")

    output = doc.get("output") or {}
    bit_format = output.get("bit_format", "float32")
    if bit_format not in FORMATS:
        raise ConfigError(f"output.bit_format {bit_format!r} not one of {sorted(FORMATS)}")
    out_dir = Path(output.get("dir", "usphere_out"))
    out_dir = out_dir if out_dir.is_absolute() else base_dir / out_dir

    thresholds = dict(DEFAULT_THRESHOLDS)
    for key, value in (doc.get("thresholds") or {}).items():
        if key not in DEFAULT_THRESHOLDS:
            raise ConfigError(f"thresholds: unknown key {key!r}")
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"thresholds.{key} must be a finite number")
        thresholds[key] = float(value)

    cfg = RunConfig(seed, channels, rate, scene, receiver, out_dir, bit_format, thresholds, base_dir, doc)
    try:
        for i in range(len(channels)):
            cfg.rx_config(i)
        cfg.listener()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"receiver/scene settings rejected: {exc}") from exc
    return cfg

