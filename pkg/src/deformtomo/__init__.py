"""Joint estimation of a 3D density and per-image deformations from a tilt series."""
from .config import RunConfig, load_config
from .deformation import DeformationParams, GroundTruthDeformations, sample_random_deformations
from .diff_core import ParamBlock, Tensor, adam_step, forward_backward
from .fbp import FilterSpec, fbp_reconstruct
from .geometry import TiltGeometry, VolumeGrid, backproject, project_series
from .io import read_mrc, write_mrc
from .metrics import MetricsReport, deformation_errors, fsc, snr_db
from .neural_field import NeuralVolume, WarpNetSpec
from .reconstruct import ModelConfig, TrainConfig, train
from .simulator import NoiseModel, generate_phantom, synthesize_tilt_series

__version__ = "0.1.0"
