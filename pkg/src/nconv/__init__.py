"""Normalized-convolution networks for sparse signal densification."""

from .autodiff import (DiffTensor, Tape, finite_diff_check,
                       finite_diff_check_many, registered_ops)
from .core import (Applicability, BasisMatrix, ConfidencedGrid, conf_pool,
                   conf_unpool, nc_basis_cov, nc_basis_solve, nconv_backward,
                   nconv_forward, nconv_point)
from .evaluation import (EvalReport, ause, compute_metrics, evaluate_arrays,
                         evaluate_samples, oracle_curve, sparsification_curve)
from .fusion import EnsembleSlice, fuse_deterministic, fuse_maps, fuse_mle
from .losses import LossInput, loss_plain, loss_pncnn
from .networks import (Pipeline, PipelineConfig, PipelineOutput, build_pipeline,
                       pipeline_forward)
from .synth import DisturbSpec, Sample, SceneSpec, synth_dataset
from .training import TrainConfig, adam_step, lr_schedule, train

__all__ = [
    "Applicability", "BasisMatrix", "ConfidencedGrid", "DiffTensor",
    "DisturbSpec", "EnsembleSlice", "EvalReport", "LossInput", "Pipeline",
    "PipelineConfig", "PipelineOutput", "Sample", "SceneSpec", "Tape",
    "TrainConfig", "adam_step", "ause", "build_pipeline", "compute_metrics",
    "conf_pool", "conf_unpool", "evaluate_arrays", "evaluate_samples",
    "finite_diff_check", "finite_diff_check_many", "fuse_deterministic",
    "fuse_maps", "fuse_mle", "loss_plain", "loss_pncnn", "lr_schedule",
    "nc_basis_cov", "nc_basis_solve", "nconv_backward", "nconv_forward",
    "nconv_point", "oracle_curve", "pipeline_forward", "registered_ops",
    "sparsification_curve", "synth_dataset", "train",
]
