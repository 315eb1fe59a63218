"""Adaptive spectral distribution alignment for graph domain adaptation."""

from .autodiff import Tape, Tensor, backward, grad_check
from .encoder import EncoderParams, classify, encode, predict, source_loss
from .graph import CsbmSpec, DomainGraph, NormalizedAdjacency, canonical_task, generate_csbm, normalize_adjacency
from .metrics import discrepancy_report, macro_f1, micro_f1
from .sampler import FrequencyBatch, SamplerParams, fixed_band_frequencies, sample_frequencies
from .spectral import CfEvaluation, alignment_loss, empirical_cf, mmd_rbf, pointwise_loss, weighted_pointwise_loss
from .trainer import MetricsRecord, TrainConfig, TrainState, fit

__version__ = "0.1.0"
