"""Numerical audits of the PIF margin and H2TF force arguments, plus embedding / boundary exports."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .h2tf import fusion_ratios
from .longtail_data import BranchKind, LabeledDataset, make_sampler
from .pif import pi_mean, pooled_representation
from .trainer import Checkpoint, predict_logits

__all__ = [
    "MarginAudit",
    "margin_audit",
    "margin_gaps",
    "OracleResult",
    "force_oracle_correct",
    "force_oracle_wrong",
    "oracle_report_csv",
    "ForceBalance",
    "force_balance_report",
    "force_balance_counts",
    "EmbeddingTable",
    "export_embeddings",
    "pca_2d",
    "BoundaryReport",
    "boundary_report",
    "boundary_counts",
]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# margin audit


@dataclass(frozen=True, eq=False)
class MarginAudit:
    """``gaps[y, i] = w_y . f_PI(y) - w_i . f_PI(y)`` where ``f_PI(y)`` is the class-mean pooled PI feature.

    The diagonal and rows of classes without samples are NaN. ``scale`` is
    the per-channel ``a / (a + b)`` factor; it is reported but not part of
    the sign test.
    """

    gaps: np.ndarray
    class_pi: np.ndarray
    scale: np.ndarray
    trained: bool

    @property
    def positive(self) -> np.ndarray:
        return np.nan_to_num(self.gaps, nan=0.0) > 0

    @property
    def pairs(self) -> int:
        return int(np.isfinite(self.gaps).sum())

    @property
    def fraction_positive(self) -> float:
        return float(self.positive.sum() / self.pairs) if self.pairs else float("nan")

    def rows(self):
        C = len(self.gaps)
        for y in range(C):
            for i in range(C):
                if y != i and np.isfinite(self.gaps[y, i]):
                    yield y, i, self.gaps[y, i], int(self.gaps[y, i] > 0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "rival", "gap", "positive"])
        for y, i, g, p in self.rows():
            w.writerow([y, i, _fmt(g), p])
        return buf.getvalue()


def margin_gaps(classifier: np.ndarray, class_pi: np.ndarray) -> np.ndarray:
    """Unscaled gaps from a ``d x C`` classifier and per-class pooled PI vectors ``(C, d)``."""
    W = np.asarray(classifier, dtype=np.float64)
    P = np.asarray(class_pi, dtype=np.float64)
    scores = P @ W  # scores[y, i] = w_i . f_PI(y)
    gaps = np.diag(scores)[:, None] - scores
    np.fill_diagonal(gaps, np.nan)
    return gaps


def _is_trained(checkpoint: Checkpoint) -> bool:
    return checkpoint.stage == "stage2" or (checkpoint.stage == "stage1" and checkpoint.epoch > 0)


def margin_audit(checkpoint: Checkpoint, dataset: LabeledDataset, batch_size: int = 1024) -> MarginAudit:
    if not checkpoint.uses_pif:
        raise ValueError(f"margin audit needs a PIF checkpoint, got mode {checkpoint.mode!r}")
    model = checkpoint.to_model()
    d = checkpoint.spec.channel_dim
    sums = np.zeros((dataset.class_count, d))
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = torch.as_tensor(dataset.inputs[start : start + batch_size], dtype=torch.float64)
            fm = model.backbone(x)
            pi_map = pi_mean(fm).unsqueeze(-1).expand_as(fm)  # F_PI subtracted from every channel
            f_pi = pooled_representation(pi_map).numpy()
            np.add.at(sums, dataset.labels[start : start + batch_size], f_pi)
    counts = np.bincount(dataset.labels, minlength=dataset.class_count)
    class_pi = np.full_like(sums, np.nan)
    present = counts > 0
    class_pi[present] = sums[present] / counts[present, None]
    a, b = checkpoint.params["pif.residual"], checkpoint.params["pif.identity"]
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = a / (a + b)
    return MarginAudit(margin_gaps(checkpoint.classifier, class_pi), class_pi, scale, _is_trained(checkpoint))


# ---------------------------------------------------------------------------
# force-balance implication oracles
#
# Correct-tail premises: w_t.f_t > w_h.f_t, and the fused head sample
# r f_h + (1 - r) f_t scores higher for h than for t.
# Conclusion: w_t.(f_t - f_h) > w_h.(f_t - f_h), i.e. |w_t| cos(theta_t) > |w_h| cos(theta_h).
#
# Wrong-tail premises: w_h.f_t > w_t.f_t, and the fused tail sample
# r f_t + (1 - r) f_h scores higher for t than for h.
# Conclusion: |w_h| cos(theta_h) > |w_t| cos(theta_t).

_SLACK = 1e-9
_SHARD = 4096


@dataclass(frozen=True)
class OracleResult:
    oracle: str
    dim: int
    drawn: int
    kept: int
    violations: int
    angle_violations: int
    max_slack: float

    @property
    def rejection_rate(self) -> float:
        return 1.0 - self.kept / self.drawn if self.drawn else float("nan")


def _draw(rng: np.random.Generator, n: int, dim: int):
    w_t, w_h, f_t, f_h = (rng.standard_normal((n, dim)) for _ in range(4))
    r = rng.uniform(0.05, 0.95, size=(n, 1))
    return w_t, w_h, f_t, f_h, r


def _dot(a, b):
    return np.einsum("nd,nd->n", a, b)


def _premises(kind, w_t, w_h, f_t, f_h, r):
    if kind == "correct":
        fused = r * f_h + (1 - r) * f_t
        return (_dot(w_t, f_t) > _dot(w_h, f_t)) & (_dot(w_h, fused) > _dot(w_t, fused))
    fused = r * f_t + (1 - r) * f_h
    return (_dot(w_h, f_t) > _dot(w_t, f_t)) & (_dot(w_t, fused) > _dot(w_h, fused))


def _shard(kind: str, want: int, dim: int, seed_seq: np.random.SeedSequence):
    rng = np.random.default_rng(seed_seq)
    drawn = kept = violations = angle_violations = 0
    max_slack = -math.inf
    while kept < want:
        block = max(64, 4 * (want - kept))
        w_t, w_h, f_t, f_h, r = _draw(rng, block, dim)
        keep = np.flatnonzero(_premises(kind, w_t, w_h, f_t, f_h, r))[: want - kept]
        # count draws up to and including the last kept tuple
        drawn += block if len(keep) < want - kept else int(keep[-1]) + 1
        if not len(keep):
            continue
        w_t, w_h, f_t, f_h = w_t[keep], w_h[keep], f_t[keep], f_h[keep]
        delta = f_t - f_h
        lhs, rhs = _dot(w_t, delta), _dot(w_h, delta)
        if kind == "wrong":
            lhs, rhs = rhs, lhs
        gap = lhs - rhs  # must be > 0
        violations += int((gap < -_SLACK).sum())
        max_slack = max(max_slack, float((-gap).max()))
        # angle form, computed from the angles themselves
        nd = np.linalg.norm(delta, axis=1)
        nt, nh = np.linalg.norm(w_t, axis=1), np.linalg.norm(w_h, axis=1)
        theta_t = np.arccos(np.clip(_dot(w_t, delta) / (nt * nd), -1, 1))
        theta_h = np.arccos(np.clip(_dot(w_h, delta) / (nh * nd), -1, 1))
        angle_gap = nt * np.cos(theta_t) - nh * np.cos(theta_h)
        if kind == "wrong":
            angle_gap = -angle_gap
        angle_violations += int((angle_gap < -_SLACK).sum())
        kept += len(keep)
    return drawn, kept, violations, angle_violations, max_slack


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PIH2T_THREADS", "1")))
    except ValueError:
        return 1


def _run_oracle(kind: str, trials: int, dim: int, seed: int) -> OracleResult:
    if trials < 1 or dim < 2:
        raise ValueError("need trials >= 1 and dim >= 2")
    n_shards = math.ceil(trials / _SHARD)
    wants = [min(_SHARD, trials - k * _SHARD) for k in range(n_shards)]
    seqs = np.random.SeedSequence([seed, dim, 0 if kind == "correct" else 1]).spawn(n_shards)
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        parts = list(pool.map(lambda args: _shard(kind, *args), [(w, dim, s) for w, s in zip(wants, seqs)]))
    drawn, kept, violations, angle_violations = (sum(p[i] for p in parts) for i in range(4))
    return OracleResult(kind, dim, drawn, kept, violations, angle_violations, max(p[4] for p in parts))


def force_oracle_correct(trials: int, dim: int, seed: int) -> OracleResult:
    """Test the correct-tail implication on ``trials`` premise-satisfying random tuples."""
    return _run_oracle("correct", trials, dim, seed)


def force_oracle_wrong(trials: int, dim: int, seed: int) -> OracleResult:
    """Test the wrong-tail implication on ``trials`` premise-satisfying random tuples."""
    return _run_oracle("wrong", trials, dim, seed)


def oracle_report_csv(results: list[OracleResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["oracle", "trials", "kept", "violations", "max_slack"])
    for r in results:
        w.writerow([f"{r.oracle}@dim{r.dim}", r.drawn, r.kept, r.violations, _fmt(r.max_slack)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# force balance on real data


@dataclass(frozen=True)
class ForceBalance:
    pairs: int
    correct_type: int
    wrong_type: int

    @property
    def ratio(self) -> float:
        if self.wrong_type == 0:
            return math.inf if self.correct_type else float("nan")
        return self.correct_type / self.wrong_type


def force_balance_counts(W, f_fused, y_fused, f_fusing, y_fusing, r, class_counts) -> ForceBalance:
    """Classify coupled pairs as correct-type or wrong-type using the two classes involved.

    Of the two labels, the one with fewer training samples plays the tail.
    Pairs with equal labels or equal class sizes are skipped.
    """
    W = np.asarray(W, dtype=np.float64)
    counts = np.asarray(class_counts)
    pairs = correct = wrong = 0
    for fb, yb, fi, yi, rr in zip(f_fused, y_fused, f_fusing, y_fusing, r):
        if yb == yi or counts[yb] == counts[yi]:
            continue
        pairs += 1
        if counts[yb] < counts[yi]:
            t, h, f_t, f_h = yb, yi, fb, fi
        else:
            t, h, f_t, f_h = yi, yb, fi, fb
        w_t, w_h = W[:, t], W[:, h]
        tail_right = w_t @ f_t > w_h @ f_t
        head_fused = rr * f_h + (1 - rr) * f_t
        tail_fused = rr * f_t + (1 - rr) * f_h
        if tail_right and w_h @ head_fused > w_t @ head_fused:
            correct += 1
        elif not tail_right and w_t @ tail_fused > w_h @ tail_fused:
            wrong += 1
    return ForceBalance(pairs, correct, wrong)


def force_balance_report(
    checkpoint: Checkpoint, dataset: LabeledDataset, batches: int = 20, batch_size: int = 128, seed: int = 0
) -> ForceBalance:
    """Count correct-type vs wrong-type coupled pairs drawn from the two sampling branches."""
    model = checkpoint.to_model()
    seqs = np.random.SeedSequence(seed).spawn(2)
    balanced = make_sampler(dataset, BranchKind.BALANCED, batch_size, int(seqs[0].generate_state(1)[0]))
    instance = make_sampler(dataset, BranchKind.INSTANCE, batch_size, int(seqs[1].generate_state(1)[0]))
    W = torch.as_tensor(checkpoint.classifier)
    total = ForceBalance(0, 0, 0)
    with torch.no_grad():
        for _ in range(batches):
            ib, ii = next(balanced), next(instance)
            fb = model.features(torch.as_tensor(dataset.inputs[ib], dtype=torch.float64))
            fi = model.features(torch.as_tensor(dataset.inputs[ii], dtype=torch.float64))
            yb = dataset.labels[ib]
            r = fusion_ratios(fb, W.T[torch.as_tensor(yb)]).numpy()
            part = force_balance_counts(
                checkpoint.classifier, fb.numpy(), yb, fi.numpy(), dataset.labels[ii], r, dataset.profile.counts
            )
            total = ForceBalance(
                total.pairs + part.pairs, total.correct_type + part.correct_type, total.wrong_type + part.wrong_type
            )
    return total


# ---------------------------------------------------------------------------
# exports


def _top_component(cov: np.ndarray, start: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return np.zeros_like(v)
        w /= norm
        if w @ v < 0:
            w = -w
        if np.linalg.norm(w - v) < tol:
            return w
        v = w
    return v


def pca_2d(features: np.ndarray, tol: float = 1e-8, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top two principal axes found by power iteration with deflation.

    Returns ``(projection (n, 2), axes (2, d))``. Each axis is signed so that
    its largest-magnitude entry is positive; missing components are zero.
    """
    X = np.asarray(features, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(len(X), 1)
    d = X.shape[1]
    start_rng = np.random.default_rng(0)
    axes = np.zeros((2, d))
    for k in range(min(2, d)):
        if not np.any(cov):
            break
        v = _top_component(cov, start_rng.standard_normal(d), tol, max_iter)
        if np.any(v):
            v = v * np.sign(v[np.argmax(np.abs(v))])
        axes[k] = v
        cov = cov - (v @ cov @ v) * np.outer(v, v)
    return Xc @ axes.T, axes


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    header: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def export_embeddings(checkpoint: Checkpoint, dataset: LabeledDataset, projector: str = "none") -> EmbeddingTable:
    """Pooled features (or their 2-D PCA projection) with labels, predictions and logits."""
    if projector not in ("none", "pca2d"):
        raise ValueError(f"unknown projector {projector!r}")
    model = checkpoint.to_model()
    with torch.no_grad():
        feats = model.features(torch.as_tensor(dataset.inputs, dtype=torch.float64)).numpy()
    logits = feats @ checkpoint.classifier
    preds = logits.argmax(axis=1)
    C = checkpoint.class_count
    if projector == "pca2d":
        cols, _ = pca_2d(feats)
        names = ("proj_x", "proj_y")
    else:
        cols = feats
        names = tuple(f"feat_{j}" for j in range(feats.shape[1]))
    header = ("sample_id", "label", "prediction", *names, *(f"logit_{c}" for c in range(C)))
    rows = [
        (i, int(dataset.labels[i]), int(preds[i]), *cols[i].tolist(), *logits[i].tolist()) for i in range(len(dataset))
    ]
    return EmbeddingTable(header, rows)


@dataclass(frozen=True)
class BoundaryReport:
    class_a: int
    class_b: int
    a_to_b: int
    b_to_a: int
    n_a: int
    n_b: int
    mean_gap_a: float
    mean_gap_b: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def boundary_counts(logits: np.ndarray, labels: np.ndarray, class_a: int, class_b: int) -> BoundaryReport:
    """Cross-confusions between two classes and the mean ``z_a - z_b`` per true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    C = logits.shape[1]
    for c in (class_a, class_b):
        if not 0 <= c < C:
            raise ValueError(f"unknown class index {c}")
    preds = logits.argmax(axis=1)
    in_a, in_b = labels == class_a, labels == class_b
    if not in_a.any() or not in_b.any():
        raise ValueError(f"both classes {class_a} and {class_b} must have samples")
    gap = logits[:, class_a] - logits[:, class_b]
    return BoundaryReport(
        class_a, class_b,
        int((preds[in_a] == class_b).sum()), int((preds[in_b] == class_a).sum()),
        int(in_a.sum()), int(in_b.sum()),
        float(gap[in_a].mean()), float(gap[in_b].mean()),
    )  # fmt: skip


def boundary_report(checkpoint: Checkpoint, dataset: LabeledDataset, class_a: int, class_b: int) -> BoundaryReport:
    return boundary_counts(predict_logits(checkpoint, dataset), dataset.labels, class_a, class_b)
