"""Cellular simultaneous recurrent networks trained with an extended Kalman filter."""
from .gmlp import CellSpec, cell_backward, cell_forward, fd_jacobian
from .grid import GridSpec, grid_forward, grid_jacobian
from .ekf import EkfState, anneal_r, ekf_update, kalman_gain, multi_stream_stack
from .alr import AlrState, alr_step
from .harness import ExperimentConfig, run_experiment, train

__version__ = "0.1.0"
