import pytest

from usphere.config import DEFAULT_THRESHOLDS, ConfigError, apply_overrides, load_config, parse_override

DEMO = """
seed = 3

[plan]
[[plan.channels]]
name = "en"
carrier_hz = 30000
fixture = { kind = "tone", duration_s = 1.0, freq_hz = 1000.0 }

[[plan.channels]]
carrier_hz = 40000
fixture = { kind = "speech_like_noise", duration_s = 1.0 }

[receiver]
transparency_gain = 0.5
[receiver.limiter]
threshold_dbfs = -3.0

[output]
dir = "out"

[thresholds]
min_correlation = 0.95
"""


@pytest.fixture
def demo(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(DEMO)
    return path


def test_load(demo):
    cfg = load_config(demo)
    assert cfg.seed == 3
    assert [c.spec.carrier_hz for c in cfg.channels] == [30000, 40000]
    assert cfg.channels[1].name == "ch1"
    assert cfg.output_dir == demo.parent / "out"
    assert cfg.thresholds["min_correlation"] == 0.95
    assert cfg.thresholds["max_crosstalk_db"] == DEFAULT_THRESHOLDS["max_crosstalk_db"]
    rx = cfg.rx_config(1)
    assert rx.channel.carrier_hz == 40000 and rx.transparency_gain == 0.5
    assert rx.limiter.threshold_dbfs == -3.0


def test_channel_audio_is_deterministic(demo):
    cfg = load_config(demo)
    a, b = cfg.channel_audio(1), cfg.channel_audio(1)
    assert (a.samples == b.samples).all()
    assert abs(a.samples).max() == pytest.approx(1.0)


def test_seed_defaults_to_zero(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(DEMO.replace("seed = 3", ""))
    assert load_config(path).seed == 0
    assert load_config(path, seed=9).seed == 9


def test_overrides(demo):
    cfg = load_config(demo, ["receiver.transparency_gain=0", "thresholds.settle_s=0.5", "seed=11"])
    assert cfg.rx_config(0).transparency_gain == 0
    assert cfg.thresholds["settle_s"] == 0.5 and cfg.seed == 11
    assert parse_override("output.dir=runs/a") == (["output", "dir"], "runs/a")
    assert apply_overrides({}, ["a.b=[1, 2]"]) == {"a": {"b": [1, 2]}}
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_illegal_plan_lists_channels(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(DEMO.replace("carrier_hz = 40000", "carrier_hz = 36000"))
    with pytest.raises(ConfigError, match=r"channel\(s\) 0, 1"):
        load_config(path)


def test_missing_input_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(DEMO.replace('fixture = { kind = "tone", duration_s = 1.0, freq_hz = 1000.0 }',
                                 'input = "missing.wav"'))
    with pytest.raises(ConfigError, match="missing.wav"):
        load_config(path)


@pytest.mark.parametrize("snippet,match", [
    ("[receiver]\nbogus = 1", "unknown keys"),
    ("[thresholds]\nnot_a_gate = 1", "unknown key"),
    ("[output]\nbit_format = 'mp3'", "bit_format"),
])
def test_rejects_bad_sections(tmp_path, snippet, match):
    base = DEMO.split("[receiver]")[0]
    path = tmp_path / "c.toml"
    path.write_text(base + snippet + "\n")
    with pytest.raises(ConfigError, match=match):
        load_config(path)


def test_bad_toml_and_missing_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")


def test_channel_index_out_of_range(demo):
    with pytest.raises(ConfigError, match="out of range"):
        load_config(demo).rx_config(5)


def test_default_document():
    cfg = load_config(None)
    assert len(cfg.channels) == 2 and cfg.seed == 0
