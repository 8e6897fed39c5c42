"""Spiking-unit recurrent transducers: cells, RNN-T training and decoding,
and analytic compute-cost profiling."""

from .cells import CellConfig, make_cell, run_bidirectional, run_layer
from .estimator import DeltaFeatures, FrameStacker, RNNTransducer
from .numerics import Value, backward, finite_difference_check
from .transducer import TransducerConfig, TransducerModel, rnnt_loss

__version__ = "0.1.0"
