"""``pih2t`` command line: synth, train, eval, analyze.

Runs are driven by an INI-style ``key = value`` file with the sections
``[run]``, ``[data]``, ``[model]``, ``[train]`` and ``[analysis]``; see
``configs/toy.ini``. Exit codes: 0 success, 1 usage or config error,
2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import analysis
from .longtail_data import (
    ClassProfile,
    LabeledDataset,
    PartitionSpec,
    balanced_profile,
    build_exponential_profile,
    build_pareto_profile,
    load_dataset,
    partition_classes,
    save_dataset,
    synth_gaussian_longtail,
    write_profile_csv,
)
from .trainer import (
    METRIC_COLUMNS,
    BackboneSpec,
    Checkpoint,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("pih2t")

ANALYSES = ("margin", "forces", "oracles", "embeddings", "boundary")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    path: str = ""
    class_count: int = 10
    dim: int = 16
    profile: str = "exponential"
    base_count: int = 500
    imbalance_factor: float = 100.0
    min_count: int = 5
    pareto_power: float = 6.0
    mean_separation: float = 4.0
    noise_scale: float = 1.0
    test_per_class: int = 200

    def train_profile(self) -> ClassProfile:
        if self.profile == "exponential":
            return build_exponential_profile(self.base_count, self.class_count, self.imbalance_factor)
        if self.profile == "pareto":
            return build_pareto_profile(self.base_count, self.min_count, self.class_count, self.pareto_power)
        raise ConfigError(f"unknown profile {self.profile!r}")


@dataclass(frozen=True)
class AnalysisSpec:
    which: tuple[str, ...] = ANALYSES
    oracle_trials: int = 10_000
    oracle_dims: tuple[int, ...] = (2, 8, 64)
    projector: str = "pca2d"
    boundary_classes: tuple[int, int] = (0, 9)
    force_batches: int = 20


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSpec = field(default_factory=DataSpec)
    arch: str = "mlp"
    widths: tuple[int, ...] = (64,)
    feature_shape: tuple[int, int, int] = (2, 2, 16)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)

    def backbone(self, item_shape: tuple[int, ...]) -> BackboneSpec:
        return BackboneSpec(self.arch, item_shape, self.widths, self.feature_shape)

    def to_text(self) -> str:
        """Canonical serialisation; ``seed`` and ``out`` are left out of the hash but written here."""
        parser = configparser.ConfigParser()
        parser["run"] = {"seed": str(self.seed), "out": self.out}
        parser["data"] = _section(self.data)
        parser["model"] = {"arch": self.arch, "widths": _join(self.widths), "feature_shape": _join(self.feature_shape)}
        parser["train"] = _section(self.train, skip=("seed",))
        parser["analysis"] = _section(self.analysis)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        body = dataclasses.replace(self, seed=0, out="").to_text()
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def _join(values) -> str:
    return ",".join(str(v) for v in values)


def _section(obj, skip=()) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        out[f.name] = _join(value) if isinstance(value, tuple) else str(value)
    return out


def _coerce(cls, section: dict[str, str]):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        default = getattr(cls(), key)
        try:
            if isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                kwargs[key] = raw.lower() in ("true", "1", "yes")
            elif isinstance(default, tuple):
                items = [s.strip() for s in raw.split(",") if s.strip()]
                kind = type(default[0]) if default else str
                kwargs[key] = tuple(kind(s) for s in items)
            else:
                kwargs[key] = type(default)(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return cls(**kwargs)


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        if not parser.read(path):
            raise ConfigError(f"cannot read config {path}")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(parser.sections()) - {"run", "data", "model", "train", "analysis"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    run = dict(parser["run"]) if parser.has_section("run") else {}
    model = dict(parser["model"]) if parser.has_section("model") else {}
    try:
        base = RunConfig()
        train = _coerce(TrainConfig, dict(parser["train"])) if parser.has_section("train") else TrainConfig()
        cfg = RunConfig(
            seed=int(run.pop("seed", base.seed)),
            out=run.pop("out", base.out),
            data=_coerce(DataSpec, dict(parser["data"])) if parser.has_section("data") else DataSpec(),
            arch=model.pop("arch", base.arch),
            widths=tuple(int(s) for s in model.pop("widths", _join(base.widths)).split(",")),
            feature_shape=tuple(int(s) for s in model.pop("feature_shape", _join(base.feature_shape)).split(",")),
            train=train,
            analysis=_coerce(AnalysisSpec, dict(parser["analysis"])) if parser.has_section("analysis") else AnalysisSpec(),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if run or model:
        raise ConfigError(f"unknown keys: {sorted(run) + sorted(model)}")
    bad = set(cfg.analysis.which) - set(ANALYSES)
    if bad:
        raise ConfigError(f"unknown analyses {sorted(bad)}")
    return cfg


# ---------------------------------------------------------------------------
# commands


def _data_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.data.path) if cfg.data.path else out / "data"


def _data_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).spawn(2)
    return int(a.generate_state(1)[0]), int(b.generate_state(1)[0])


def cmd_synth(cfg: RunConfig, out: Path) -> Path:
    spec = cfg.data
    try:
        profile = spec.train_profile()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    train_seed, test_seed = _data_seeds(cfg.seed)
    train = synth_gaussian_longtail(spec.class_count, spec.dim, profile, spec.mean_separation, spec.noise_scale, train_seed)
    test = synth_gaussian_longtail(
        spec.class_count, spec.dim, balanced_profile(spec.test_per_class, spec.class_count),
        spec.mean_separation, spec.noise_scale, test_seed,
    )  # fmt: skip
    root = out / "data"
    tag = {"config_hash": cfg.digest(), "run_seed": cfg.seed}
    save_dataset(train, root / "train", train_seed, **tag)
    save_dataset(test, root / "test", test_seed, **tag)
    write_profile_csv(profile, root / "profile.csv", comment=f"config_hash={cfg.digest()} seed={cfg.seed}")
    return root


def _write_metrics(rows: list[dict], path: Path, digest: str, seed: int) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={digest} seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([analysis._fmt(row.get(c)) for c in METRIC_COLUMNS])
    _atomic_write(path, buf.getvalue().encode())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _load_split(root: Path, name: str) -> LabeledDataset | None:
    return load_dataset(root / name) if (root / name / "manifest.txt").exists() else None


def cmd_train(cfg: RunConfig, out: Path) -> dict[str, Path]:
    root = _data_dir(cfg, out)
    train = _load_split(root, "train")
    if train is None:
        raise ConfigError(f"no dataset at {root / 'train'}; run `pih2t synth` first or set data.path")
    test = _load_split(root, "test")
    config = dataclasses.replace(cfg.train, seed=cfg.seed)
    digest = cfg.digest()
    partition = partition_classes(train.profile, PartitionSpec())
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.ini", f"# config_hash={digest} seed={cfg.seed}\n{cfg.to_text()}".encode())
    rows: list[dict] = []
    outputs = {}
    ck = train_stage1(
        train, cfg.backbone(train.item_shape), config, eval_data=test, partition=partition, metrics=rows, digest=digest
    )
    outputs["stage1"] = ck.save(out / "stage1.ckpt")
    if config.has_stage2:
        ck = train_stage2(ck, train, config, eval_data=test, partition=partition, metrics=rows)
        outputs["stage2"] = ck.save(out / "stage2.ckpt")
    _write_metrics(rows, out / "metrics.csv", digest, cfg.seed)
    outputs["metrics"] = out / "metrics.csv"
    return outputs


def _partition_for(ck: Checkpoint, dataset: LabeledDataset):
    counts = ck.meta.get("train_counts")
    profile = ClassProfile(tuple(counts)) if counts else dataset.profile
    return partition_classes(profile, PartitionSpec())


def cmd_eval(checkpoint: Path, dataset: Path, out: Path) -> dict:
    ck = Checkpoint.load(checkpoint)
    data = load_dataset(dataset)
    report = evaluate(ck, data, _partition_for(ck, data))
    payload = {
        "config_hash": ck.config_hash, "seed": ck.seed, "mode": ck.mode, "stage": ck.stage,
        "metrics": report.to_dict(),
    }  # fmt: skip
    _atomic_write(out / "eval.json", (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())
    return payload


def cmd_analyze(cfg: RunConfig, checkpoint: Path | None, dataset: Path | None, which, out: Path) -> list[Path]:
    spec = cfg.analysis
    which = tuple(which or spec.which)
    needs_model = set(which) - {"oracles"}
    if needs_model and (checkpoint is None or dataset is None):
        raise ConfigError(f"{sorted(needs_model)} need --checkpoint and --dataset")
    ck = Checkpoint.load(checkpoint) if checkpoint is not None else None
    data = load_dataset(dataset) if dataset is not None else None
    digest, seed = (ck.config_hash, ck.seed) if ck else (cfg.digest(), cfg.seed)
    stamp = f"# config_hash={digest} seed={seed}\n"
    adir = out / "analysis"
    written = []

    def emit(name, text):
        path = adir / name
        _atomic_write(path, text.encode())
        written.append(path)

    if "margin" in which:
        if ck.uses_pif:
            audit = analysis.margin_audit(ck, data)
            emit("margin.csv", stamp + audit.to_csv())
            summary = (
                f"{stamp}trained={audit.trained} stage={ck.stage}\n"
                f"pairs={audit.pairs} positive={int(audit.positive.sum())} "
                f"fraction_positive={analysis._fmt(audit.fraction_positive)}\n"
                f"scale_a_over_a_plus_b={','.join(analysis._fmt(s) for s in audit.scale)}\n"
            )
        else:
            summary = f"{stamp}mode={ck.mode} has no PIF layer; margin audit not applicable\n"
        emit("margin.txt", summary)
    if "forces" in which:
        fb = analysis.force_balance_report(ck, data, batches=spec.force_batches, seed=seed)
        emit(
            "forces.txt",
            f"{stamp}pairs={fb.pairs} correct_type={fb.correct_type} wrong_type={fb.wrong_type} "
            f"ratio={analysis._fmt(fb.ratio)}\n",
        )
    if "oracles" in which:
        results = []
        for dim in spec.oracle_dims:
            results.append(analysis.force_oracle_correct(spec.oracle_trials, dim, seed))
            results.append(analysis.force_oracle_wrong(spec.oracle_trials, dim, seed))
        emit("oracles.csv", stamp + analysis.oracle_report_csv(results))
        lines = [
            f"{r.oracle}@dim{r.dim}: kept {r.kept}/{r.drawn} (rejection {r.rejection_rate:.3f}), "
            f"violations {r.violations}, angle-form violations {r.angle_violations}, "
            f"max slack {r.max_slack:.3e}"
            for r in results
        ]
        emit("oracles.txt", stamp + "\n".join(lines) + "\n")
    if "embeddings" in which:
        table = analysis.export_embeddings(ck, data, spec.projector)
        emit("embeddings.csv", stamp + table.to_csv())
    if "boundary" in which:
        a, b = spec.boundary_classes
        rep = analysis.boundary_report(ck, data, a, b)
        payload = {"config_hash": digest, "seed": seed, **rep.to_dict()}
        emit("boundary.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return written


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", type=Path, help="override [run] out directory")
    p = _Parser(prog="pih2t", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic long-tailed dataset")
    sub.add_parser("train", parents=[common], help="run stage 1 (and stage 2) training")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--dataset", type=Path, required=True)
    an = sub.add_parser("analyze", parents=[common], help="margin / force / oracle / export reports")
    an.add_argument("--checkpoint", type=Path)
    an.add_argument("--dataset", type=Path)
    an.add_argument("--which", nargs="+", choices=ANALYSES)
    return p


def _threads() -> int:
    raw = os.environ.get("PIH2T_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PIH2T_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("PIH2T_THREADS must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        torch.set_num_threads(_threads())
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        out = args.out or Path(cfg.out)
        if args.command == "synth":
            print(cmd_synth(cfg, out))
        elif args.command == "train":
            for name, path in cmd_train(cfg, out).items():
                print(f"{name}: {path}")
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args.checkpoint, args.dataset, out), indent=2, sort_keys=True))
        else:
            for path in cmd_analyze(cfg, args.checkpoint, args.dataset, args.which, out):
                print(path)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"pih2t: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, ValueError, RuntimeError, OSError) as exc:
        print(f"pih2t: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
