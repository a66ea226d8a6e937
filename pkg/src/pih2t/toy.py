"""Desk-scale Gaussian long-tailed benchmark shared by the acceptance suite and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import BoundaryReport, boundary_report
from .longtail_data import (
    LabeledDataset,
    MetricsReport,
    Partition,
    PartitionSpec,
    balanced_profile,
    build_exponential_profile,
    partition_classes,
    synth_gaussian_longtail,
)
from .trainer import BackboneSpec, Checkpoint, TrainConfig, evaluate, train_stage1, train_stage2

__all__ = ["ToyBenchmark", "ToyRun", "run_toy"]


@dataclass(frozen=True)
class ToyBenchmark:
    """Small long-tailed benchmark: 10 Gaussian classes in 16 dims, 500 samples in the largest class.

    The test set is balanced and drawn from the same class centres.
    """

    class_count: int = 10
    dim: int = 16
    base_count: int = 500
    imbalance_factor: float = 100.0
    mean_separation: float = 4.0
    noise_scale: float = 1.0
    test_per_class: int = 200
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec("mlp", (16,), (64,), (2, 2, 16)))
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            stage1_epochs=40, stage2_epochs=10, batch_size=128, lr=0.1, lr_decay_epochs=(32, 36),
            weight_decay=5e-4,
        )  # fmt: skip
    )

    def datasets(self, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
        train_seed, test_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
        profile = build_exponential_profile(self.base_count, self.class_count, self.imbalance_factor)
        train = synth_gaussian_longtail(
            self.class_count, self.dim, profile, self.mean_separation, self.noise_scale, train_seed
        )
        test = synth_gaussian_longtail(
            self.class_count, self.dim, balanced_profile(self.test_per_class, self.class_count),
            self.mean_separation, self.noise_scale, test_seed,
        )  # fmt: skip
        return train, test


@dataclass(eq=False)
class ToyRun:
    mode: str
    seed: int
    train: LabeledDataset
    test: LabeledDataset
    partition: Partition
    stage1: Checkpoint
    stage1_test: MetricsReport
    stage1_train_acc: float
    stage2: Checkpoint | None = None
    stage2_test: MetricsReport | None = None
    metrics: list[dict] = field(default_factory=list)

    @property
    def final(self) -> Checkpoint:
        return self.stage2 or self.stage1

    @property
    def final_test(self) -> MetricsReport:
        return self.stage2_test or self.stage1_test

    def tail_to_head(self, checkpoint: Checkpoint) -> BoundaryReport:
        """Most-frequent head class (0) against the rarest tail class (C - 1) on the test set."""
        return boundary_report(checkpoint, self.test, 0, self.train.class_count - 1)


def run_toy(bench: ToyBenchmark, mode: str, seed: int, stage2: bool = True) -> ToyRun:
    config = replace(bench.train, mode=mode, seed=seed)
    train, test = bench.datasets(seed)
    partition = partition_classes(train.profile, PartitionSpec())
    metrics: list[dict] = []
    ck1 = train_stage1(train, bench.backbone, config, eval_data=test, partition=partition, metrics=metrics)
    run = ToyRun(
        mode, seed, train, test, partition, ck1,
        evaluate(ck1, test, partition), evaluate(ck1, train, partition).overall, metrics=metrics,
    )  # fmt: skip
    if stage2 and config.has_stage2:
        run.stage2 = train_stage2(ck1, train, config, eval_data=test, partition=partition, metrics=metrics)
        run.stage2_test = evaluate(run.stage2, test, partition)
    return run
