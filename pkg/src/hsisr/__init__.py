"""Hyperspectral image super-resolution with correlation-kernel linear
attention: a small autodiff tensor core, the attention mechanism and its
quadratic oracles, the staged transformer model, synthetic data tooling,
fidelity metrics, training, and complexity benchmarking."""

from .attention import AttentionConfig, essa_forward, reference_attention, scc2
from .data import HsiCube, PairSet, SynthSpec, bicubic_resize, make_pairs, synthesize
from .metrics import MetricReport, evaluate_metrics
from .model import ModelConfig, ParamStore, build_model, forward
from .tensor import Tensor, finite_diff_check
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
