"""Micro neural-net engine with gradient-variance probes and a
closed-form variance-propagation predictor for BN residual stacks."""

from .analysis import (
    MomentMode,
    MomentReport,
    c_constants,
    moment_report,
    relu_moments_formula,
    relu_moments_monte_carlo,
    relu_moments_quadrature,
)
from .data import Dataset, SyntheticSpec, generate_synthetic, load_cifar10_binary
from .numerics import SeededRng, batch_mean, batch_var, normal_cdf, normal_pdf, p_of_a
from .probes import ProbeRecorder, VarTrace, detect_explosion, profile_check
from .resnet import Model, NetSpec, Variant, build_network, network_backward, network_forward
from .training import SgdConfig, evaluate, sgd_step, softmax_xent, train

__all__ = [
    "MomentMode", "MomentReport", "c_constants", "moment_report",
    "relu_moments_formula", "relu_moments_monte_carlo", "relu_moments_quadrature",
    "Dataset", "SyntheticSpec", "generate_synthetic", "load_cifar10_binary",
    "SeededRng", "batch_mean", "batch_var", "normal_cdf", "normal_pdf", "p_of_a",
    "ProbeRecorder", "VarTrace", "detect_explosion", "profile_check",
    "Model", "NetSpec", "Variant", "build_network", "network_backward", "network_forward",
    "SgdConfig", "evaluate", "sgd_step", "softmax_xent", "train",
]
