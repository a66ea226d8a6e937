"""Head-to-tail fusion of pooled features for classifier calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "FusedBatch",
    "cosine_distance",
    "fusion_ratios",
    "halved_distance_ratios",
    "h2tf_fuse",
    "couple_branches",
]

_DEGENERATE_RANGE = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cosine_distance(f, w) -> torch.Tensor:
    """``1 - cos(f, w)`` along the last axis, in ``[0, 2]``."""
    f, w = _as_tensor(f), _as_tensor(w)
    nf = torch.linalg.vector_norm(f, dim=-1)
    nw = torch.linalg.vector_norm(w, dim=-1)
    if bool((nf == 0).any()) or bool((nw == 0).any()):
        raise ValueError("cosine distance is undefined for zero-norm vectors")
    cos = (f * w).sum(dim=-1) / (nf * nw)
    return (1.0 - cos).clamp(0.0, 2.0)


def fusion_ratios(features, class_weights) -> torch.Tensor:
    """Min-max normalised distance of each sample to its own class weight.

    ``class_weights[j]`` is the classifier column of sample ``j``'s label.
    The farthest sample in the batch gets ``r = 1``, the nearest ``r = 0``;
    a batch with no spread gets ``r = 1`` everywhere.
    """
    dist = cosine_distance(features, class_weights)
    if dist.dim() != 1 or dist.numel() == 0:
        raise ValueError("expected a non-empty batch of feature vectors")
    lo, hi = dist.min(), dist.max()
    if float(hi - lo) <= _DEGENERATE_RANGE:
        return torch.ones_like(dist)
    return ((dist - lo) / (hi - lo)).clamp(0.0, 1.0)


def halved_distance_ratios(features, class_weights) -> torch.Tensor:
    """Fixed map ``r = d / 2``; an alternative normaliser for ablations."""
    return cosine_distance(features, class_weights) / 2.0


def h2tf_fuse(fused_target, fusing, r) -> torch.Tensor:
    """``r * fused_target + (1 - r) * fusing``; ``r`` is a scalar or one value per row."""
    ft, fh = _as_tensor(fused_target), _as_tensor(fusing)
    if ft.shape != fh.shape:
        raise ValueError(f"dimension mismatch: {tuple(ft.shape)} vs {tuple(fh.shape)}")
    r = _as_tensor(r).to(ft.dtype)
    if bool((r < 0).any()) or bool((r > 1).any()):
        raise ValueError("fusion ratio must lie in [0, 1]")
    if r.dim() == 1 and ft.dim() > 1:
        r = r.unsqueeze(-1)
    return r * ft + (1.0 - r) * fh


@dataclass(frozen=True, eq=False)
class FusedBatch:
    balanced_features: torch.Tensor
    instance_features: torch.Tensor
    ratios: torch.Tensor
    fused: torch.Tensor
    labels: torch.Tensor


def couple_branches(balanced_batch, instance_batch, classifier, ratio_fn=fusion_ratios) -> FusedBatch:
    """Pair the two branches position by position and fuse them.

    ``classifier`` is the ``d x C`` weight matrix. Ratios come from the
    balanced features and their own label's column and carry no gradient;
    the fused rows keep the balanced labels only.
    """
    fb, yb = balanced_batch
    fi, _ = instance_batch
    fb, fi = _as_tensor(fb), _as_tensor(fi)
    yb = torch.as_tensor(yb, dtype=torch.int64)
    W = _as_tensor(classifier)
    if fb.shape != fi.shape or len(yb) != len(fb):
        raise ValueError(f"batch-length mismatch: balanced {tuple(fb.shape)}, instance {tuple(fi.shape)}")
    if W.shape[0] != fb.shape[-1]:
        raise ValueError(f"classifier expects {W.shape[0]}-dim features, got {fb.shape[-1]}")
    with torch.no_grad():
        r = ratio_fn(fb, W.detach().T[yb])
    return FusedBatch(fb, fi, r, h2tf_fuse(fb, fi, r), yb)
