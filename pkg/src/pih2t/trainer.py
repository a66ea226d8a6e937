"""Two-stage training: representation learning with PIF, then classifier calibration with H2TF."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .h2tf import couple_branches, fusion_ratios
from .longtail_data import (
    BranchKind,
    ClassProfile,
    LabeledDataset,
    MetricsReport,
    Partition,
    PartitionSpec,
    epoch_batches,
    make_sampler,
    partition_classes,
    partition_metrics,
)
from .pif import PIFFusionParams, PIFLayer, pooled_representation

__all__ = [
    "MODES",
    "BackboneSpec",
    "TrainConfig",
    "Checkpoint",
    "PIH2TModel",
    "TrainingDivergedError",
    "LossFn",
    "cross_entropy",
    "config_hash",
    "init_checkpoint",
    "train_stage1",
    "train_stage2",
    "evaluate",
    "predict_logits",
    "METRIC_COLUMNS",
]

log = logging.getLogger(__name__)

MODES = ("ce_baseline", "dr_baseline", "pi_h2t")
METRIC_COLUMNS = (
    "stage", "epoch", "loss", "train_acc", "overall_acc", "head_acc",
    "med_acc", "tail_acc", "mean_r", "head_fusing_frac",
)  # fmt: skip


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BackboneSpec:
    """Desk-scale backbone producing a ``w x h x d`` feature map.

    ``mlp`` reads flat vectors of length ``input_shape[0]``; ``small_cnn``
    reads ``channels x height x width`` images and uses ``widths`` as the
    channel counts of its three conv blocks (the last one must equal ``d``).
    """

    arch: str = "mlp"
    input_shape: tuple[int, ...] = (16,)
    widths: tuple[int, ...] = (64,)
    feature_shape: tuple[int, int, int] = (2, 2, 16)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(s) for s in self.widths))
        object.__setattr__(self, "feature_shape", tuple(int(s) for s in self.feature_shape))
        if self.arch not in ("mlp", "small_cnn"):
            raise ValueError(f"unknown backbone {self.arch!r}")
        if len(self.feature_shape) != 3 or min(self.feature_shape) < 1:
            raise ValueError("feature_shape must be (w, h, d) with positive entries")
        if self.arch == "small_cnn":
            if len(self.input_shape) != 3 or len(self.widths) != 3:
                raise ValueError("small_cnn needs a (c, h, w) input_shape and three block widths")
            if self.widths[-1] != self.feature_shape[2]:
                raise ValueError("last conv width must equal the feature channel dimension")

    @property
    def channel_dim(self) -> int:
        return self.feature_shape[2]


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 200
    stage2_epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (160, 180)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    stage2_lr_scale: float = 0.1
    reset_classifier: bool = False
    freeze_ratio_weights: bool = False
    seed: int = 0
    mode: str = "pi_h2t"

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr > 0 and self.stage2_lr_scale > 0 and 0 < self.lr_decay_factor):
            raise ValueError("learning rates and decay factor must be positive")

    @property
    def uses_pif(self) -> bool:
        return self.mode == "pi_h2t"

    @property
    def uses_h2tf(self) -> bool:
        return self.mode == "pi_h2t"

    @property
    def has_stage2(self) -> bool:
        return self.mode != "ce_baseline"


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(*parts) -> str:
    """Short sha256 over the canonical JSON of dataclasses / dicts."""
    payload = [dataclasses.asdict(p) if dataclasses.is_dataclass(p) else p for p in parts]
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model


class _MLPBackbone(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        sizes = [spec.input_shape[0], *spec.widths, math.prod(spec.feature_shape)]
        self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in zip(sizes, sizes[1:]))
        self.feature_shape = spec.feature_shape

    def forward(self, x):
        for layer in self.layers:
            x = torch.relu(layer(x))
        return x.reshape(-1, *self.feature_shape)


class _SmallCNNBackbone(nn.Module):
    """Three conv3x3-ReLU blocks, max-pooling until the target spatial size."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        channels = [spec.input_shape[0], *spec.widths]
        self.convs = nn.ModuleList(nn.Conv2d(i, o, 3, padding=1) for i, o in zip(channels, channels[1:]))
        self.target = spec.feature_shape[:2]
        side = list(spec.input_shape[1:])
        self.pool_after = []
        for _ in self.convs:
            pool = side[0] > self.target[0] and side[0] % 2 == 0 and side[1] % 2 == 0
            self.pool_after.append(pool)
            if pool:
                side = [s // 2 for s in side]
        if tuple(side) != tuple(self.target):
            raise ValueError(f"input {spec.input_shape} cannot be reduced to {self.target} in three blocks")

    def forward(self, x):
        for conv, pool in zip(self.convs, self.pool_after):
            x = torch.relu(conv(x))
            if pool:
                x = F.max_pool2d(x, 2)
        return x.permute(0, 2, 3, 1)  # channels-last


class PIH2TModel(nn.Module):
    """backbone -> [PIF] -> global average pool -> bias-free linear classifier ``f @ W``."""

    def __init__(self, spec: BackboneSpec, class_count: int, use_pif: bool):
        super().__init__()
        self.spec = spec
        self.use_pif = use_pif
        self.backbone = _MLPBackbone(spec) if spec.arch == "mlp" else _SmallCNNBackbone(spec)
        self.pif = PIFLayer(spec.channel_dim)
        self.classifier = nn.Parameter(torch.zeros(spec.channel_dim, class_count, dtype=torch.float64))
        self.double()

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for module in self.backbone.modules():
                if isinstance(module, (nn.Linear, nn.Conv2d)):
                    fan_in = module.weight[0].numel()
                    bound = math.sqrt(6.0 / fan_in)  # He-uniform for ReLU
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.zero_()
            bound = 1.0 / math.sqrt(self.spec.channel_dim)
            self.classifier.uniform_(-bound, bound, generator=generator)

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        fm = self.backbone(x)
        return self.pif(fm) if self.use_pif else fm

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return pooled_representation(self.feature_map(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x) @ self.classifier

    def representation_parameters(self) -> list[nn.Parameter]:
        return [*self.backbone.parameters(), *self.pif.parameters()]


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PIH2TCK\x00"
_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    """Parameters plus the metadata needed to rebuild the model.

    Parameter names: ``backbone.*`` (torch state-dict keys), ``pif.residual``,
    ``pif.identity``, ``classifier`` (``d x C``).
    """

    spec: BackboneSpec
    class_count: int
    mode: str
    stage: str
    epoch: int
    seed: int
    config_hash: str
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def uses_pif(self) -> bool:
        return self.mode == "pi_h2t"

    @property
    def classifier(self) -> np.ndarray:
        return self.params["classifier"]

    @property
    def pif_params(self) -> PIFFusionParams:
        return PIFFusionParams(self.params["pif.residual"], self.params["pif.identity"])

    def to_model(self) -> PIH2TModel:
        model = PIH2TModel(self.spec, self.class_count, use_pif=self.uses_pif)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state)
        return model

    @classmethod
    def from_model(cls, model: PIH2TModel, *, mode, stage, epoch, seed, config_hash, meta=None) -> "Checkpoint":
        params = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.spec, model.classifier.shape[1], mode, stage, epoch, seed, config_hash, params, meta or {})

    def representation_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name != "classifier":
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    # Container: magic(8) | uint32 version | uint32 len + config hash |
    # uint32 len + JSON header | uint32 block count | blocks, where each block
    # is uint32 name len, utf-8 name, uint32 ndim, uint64 shape[ndim],
    # little-endian float64 data (row-major).
    def to_bytes(self) -> bytes:
        header = {
            "spec": dataclasses.asdict(self.spec),
            "class_count": self.class_count,
            "mode": self.mode,
            "stage": self.stage,
            "epoch": self.epoch,
            "seed": self.seed,
            "meta": self.meta,
        }
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<I", _VERSION))
        for chunk in (self.config_hash.encode(), _canonical(header).encode()):
            buf.write(struct.pack("<I", len(chunk)))
            buf.write(chunk)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            encoded = name.encode()
            buf.write(struct.pack("<I", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != _MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        pos = 8
        (version,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")

        def chunk():
            nonlocal pos
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            out = blob[pos : pos + n]
            pos += n
            return out

        digest = chunk().decode()
        header = json.loads(chunk())
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        params = {}
        for _ in range(count):
            name = chunk().decode()
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = math.prod(shape)
            params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
        if pos != len(blob):
            raise ValueError("trailing bytes after the last parameter block")
        spec = BackboneSpec(**header["spec"])
        return cls(
            spec, header["class_count"], header["mode"], header["stage"], header["epoch"],
            header["seed"], digest, params, header.get("meta", {}),
        )  # fmt: skip

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# losses


class LossFn(Protocol):
    def __call__(self, logits: torch.Tensor, labels: torch.Tensor, profile: ClassProfile | None = None) -> torch.Tensor: ...


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, profile: ClassProfile | None = None) -> torch.Tensor:
    """Mean softmax cross-entropy. ``profile`` is accepted for drop-in losses that need class counts."""
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"expected logits (B, C) and labels (B,), got {tuple(logits.shape)}, {tuple(labels.shape)}")
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# training


def _seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("init", "stage1", "balanced", "instance")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def _tensor_inputs(dataset: LabeledDataset, idx=None) -> torch.Tensor:
    x = dataset.inputs if idx is None else dataset.inputs[idx]
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _labels(dataset: LabeledDataset, idx=None) -> torch.Tensor:
    y = dataset.labels if idx is None else dataset.labels[idx]
    return torch.as_tensor(y, dtype=torch.int64)


def _check_input(spec: BackboneSpec, dataset: LabeledDataset) -> None:
    if dataset.item_shape != spec.input_shape:
        raise ValueError(f"dataset items have shape {dataset.item_shape}, backbone expects {spec.input_shape}")


def init_checkpoint(spec: BackboneSpec, class_count: int, config: TrainConfig, seed: int | None = None, digest: str | None = None) -> Checkpoint:
    """Randomly initialised model; identical across modes for the same seed."""
    seed = config.seed if seed is None else seed
    model = PIH2TModel(spec, class_count, use_pif=config.uses_pif)
    model.reset_parameters(torch.Generator().manual_seed(_seeds(seed)["init"]))
    return Checkpoint.from_model(
        model, mode=config.mode, stage="init", epoch=0, seed=seed,
        config_hash=digest or config_hash(spec, config),
    )  # fmt: skip


def predict_logits(checkpoint_or_model, dataset: LabeledDataset, batch_size: int = 1024) -> np.ndarray:
    model = checkpoint_or_model.to_model() if isinstance(checkpoint_or_model, Checkpoint) else checkpoint_or_model
    out = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            out.append(model(_tensor_inputs(dataset, slice(start, start + batch_size))).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.classifier.shape[1]))


def _accuracy(model: PIH2TModel, dataset: LabeledDataset) -> float:
    return float((predict_logits(model, dataset).argmax(axis=1) == dataset.labels).mean())


def _eval_fields(model, eval_data, partition) -> dict:
    if eval_data is None:
        return {}
    preds = predict_logits(model, eval_data).argmax(axis=1)
    rep = partition_metrics(preds, eval_data.labels, partition, eval_data.class_count)
    return {"overall_acc": rep.overall, "head_acc": rep.head, "med_acc": rep.medium, "tail_acc": rep.tail}


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")


def _stage1_lr(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.lr * config.lr_decay_factor**drops


def train_stage1(
    dataset: LabeledDataset,
    backbone: BackboneSpec,
    config: TrainConfig,
    seed: int | None = None,
    *,
    loss_fn: LossFn = cross_entropy,
    eval_data: LabeledDataset | None = None,
    partition: Partition | None = None,
    metrics: list[dict] | None = None,
    digest: str | None = None,
) -> Checkpoint:
    """Momentum SGD on the raw long-tailed stream; PIF is active only in ``pi_h2t`` mode.

    One row per epoch is appended to ``metrics`` when given.
    """
    seed = config.seed if seed is None else seed
    _check_input(backbone, dataset)
    start = init_checkpoint(backbone, dataset.class_count, config, seed, digest)
    model = start.to_model()
    if config.stage1_epochs == 0:
        return dataclasses.replace(start, stage="stage1", meta={"train_counts": list(dataset.profile.counts)})
    partition = partition or partition_classes(dataset.profile, PartitionSpec())
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng(_seeds(seed)["stage1"])
    y_all = _labels(dataset)
    for epoch in range(config.stage1_epochs):
        for group in opt.param_groups:
            group["lr"] = _stage1_lr(config, epoch)
        total, seen = 0.0, 0
        for step, idx in enumerate(epoch_batches(len(dataset), config.batch_size, rng)):
            loss = loss_fn(model(_tensor_inputs(dataset, idx)), y_all[idx], dataset.profile)
            _check_finite(loss, "stage1", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        if metrics is not None:
            row = {"stage": 1, "epoch": epoch + 1, "loss": total / seen, "train_acc": _accuracy(model, dataset)}
            row.update(_eval_fields(model, eval_data, partition))
            metrics.append(row)
    return Checkpoint.from_model(
        model, mode=config.mode, stage="stage1", epoch=config.stage1_epochs, seed=seed,
        config_hash=start.config_hash, meta={"train_counts": list(dataset.profile.counts)},
    )  # fmt: skip


def train_stage2(
    checkpoint: Checkpoint,
    dataset: LabeledDataset,
    config: TrainConfig,
    seed: int | None = None,
    *,
    loss_fn: LossFn = cross_entropy,
    ratio_fn: Callable = fusion_ratios,
    eval_data: LabeledDataset | None = None,
    partition: Partition | None = None,
    metrics: list[dict] | None = None,
) -> Checkpoint:
    """Re-train only the classifier on balanced batches, fused with instance batches in ``pi_h2t`` mode.

    The representation (backbone and PIF) stays frozen. An epoch is
    ``ceil(N / batch_size)`` balanced batches; the learning rate starts at
    ``lr * stage2_lr_scale`` and follows a per-step cosine decay.
    """
    if checkpoint is None or checkpoint.stage not in ("stage1", "stage2"):
        raise ValueError("stage 2 needs a stage-1 checkpoint")
    if not config.has_stage2:
        raise ValueError(f"mode {config.mode!r} has no stage 2")
    if checkpoint.mode != config.mode:
        raise ValueError(f"checkpoint was trained in mode {checkpoint.mode!r}, config says {config.mode!r}")
    seed = config.seed if seed is None else seed
    _check_input(checkpoint.spec, dataset)
    model = checkpoint.to_model()
    for p in model.representation_parameters():
        p.requires_grad_(False)
    model.eval()
    if config.reset_classifier:
        bound = 1.0 / math.sqrt(checkpoint.spec.channel_dim)
        with torch.no_grad():
            model.classifier.uniform_(-bound, bound, generator=torch.Generator().manual_seed(_seeds(seed)["init"] + 1))
    frozen_W = model.classifier.detach().clone()

    partition = partition or partition_classes(dataset.profile, PartitionSpec())
    head = torch.as_tensor(sorted(partition.head), dtype=torch.int64)
    base_lr = config.lr * config.stage2_lr_scale
    opt = torch.optim.SGD([model.classifier], lr=base_lr, momentum=config.momentum, weight_decay=config.weight_decay)
    seeds = _seeds(seed)
    balanced = make_sampler(dataset, BranchKind.BALANCED, config.batch_size, seeds["balanced"])
    instance = make_sampler(dataset, BranchKind.INSTANCE, config.batch_size, seeds["instance"])
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = steps_per_epoch * config.stage2_epochs
    y_all = _labels(dataset)
    step = 0
    for epoch in range(config.stage2_epochs):
        total = r_sum = head_frac_sum = 0.0
        for _ in range(steps_per_epoch):
            for group in opt.param_groups:
                group["lr"] = 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))
            ib, ii = next(balanced), next(instance)
            yb, yi = y_all[ib], y_all[ii]
            with torch.no_grad():
                fb = model.features(_tensor_inputs(dataset, ib))
                fi = model.features(_tensor_inputs(dataset, ii))
            if config.uses_h2tf:
                W_ratio = frozen_W if config.freeze_ratio_weights else model.classifier
                batch = couple_branches((fb, yb), (fi, yi), W_ratio, ratio_fn=ratio_fn)
                fused, r_mean = batch.fused, float(batch.ratios.mean())
            else:
                fused, r_mean = fb, 1.0
            loss = loss_fn(fused @ model.classifier, yb, dataset.profile)
            _check_finite(loss, "stage2", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            r_sum += r_mean
            head_frac_sum += float(torch.isin(yi, head).double().mean())
            step += 1
        if metrics is not None:
            row = {
                "stage": 2, "epoch": epoch + 1, "loss": total / steps_per_epoch,
                "train_acc": _accuracy(model, dataset),
                "mean_r": r_sum / steps_per_epoch if config.uses_h2tf else None,
                "head_fusing_frac": head_frac_sum / steps_per_epoch if config.uses_h2tf else None,
            }  # fmt: skip
            row.update(_eval_fields(model, eval_data, partition))
            metrics.append(row)
    return Checkpoint.from_model(
        model, mode=config.mode, stage="stage2", epoch=config.stage2_epochs, seed=seed,
        config_hash=checkpoint.config_hash, meta=dict(checkpoint.meta),
    )  # fmt: skip


def evaluate(checkpoint: Checkpoint, test_dataset: LabeledDataset, partition: Partition) -> MetricsReport:
    """Inference path: backbone, PIF if trained with it, pool, classifier, argmax. No H2TF."""
    _check_input(checkpoint.spec, test_dataset)
    if test_dataset.class_count != checkpoint.class_count:
        raise ValueError("dataset and checkpoint disagree on the number of classes")
    preds = predict_logits(checkpoint, test_dataset).argmax(axis=1)
    return partition_metrics(preds, test_dataset.labels, partition, checkpoint.class_count)
