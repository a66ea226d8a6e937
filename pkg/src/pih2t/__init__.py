"""Permutation-invariant and head-to-tail feature fusion for long-tailed classification."""

from .h2tf import FusedBatch, cosine_distance, couple_branches, fusion_ratios, h2tf_fuse
from .longtail_data import (
    BranchKind,
    ClassProfile,
    LabeledDataset,
    MetricsReport,
    PartitionSpec,
    build_exponential_profile,
    build_pareto_profile,
    make_sampler,
    partition_classes,
    partition_metrics,
    synth_gaussian_longtail,
)
from .pif import PIFFusionParams, init_pif_params, pi_mean, pif_fuse, pooled_representation
from .trainer import BackboneSpec, Checkpoint, TrainConfig, evaluate, train_stage1, train_stage2

__version__ = "0.1.0"
