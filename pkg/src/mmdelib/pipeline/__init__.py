"""Experiment orchestration: config, synthetic data, noise, training, checkpoints and the report matrix."""

from .checkpoint import Checkpoint, IncompatibleCheckpoint, load_checkpoint, load_model, save_checkpoint, save_model
from .config import ConfigError, read_config, write_config
from .experiment import SETUPS, ExperimentSpec, enumerate_specs, prepare_data, train
from .matrix import MatrixReport, run_matrix
from .noise import NoiseCalibrationError, noise_transcripts
from .synthetic import make_synthetic_task
