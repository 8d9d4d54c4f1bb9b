"""Ultrasonic AM channels: modulate audio onto inaudible carriers, simulate the air path, decode per ear."""

from .core_dsp import AudioBuffer, BiquadCascade, ContractError, InvalidDesignError, LimiterParams
from .modulator import ChannelPlan, ChannelSpec, OvermodulationError, compose, validate_plan
from .channel_sim import EarSignals, Listener, SceneModel, Source, propagate
from .demodulator import RxConfig, decode_ear, decode_stereo, demodulate_coherent, demodulate_envelope
from .analysis import AnalysisReport, write_report
from .io import read_wav, write_wav, generate_fixture

__version__ = "0.1.0"
