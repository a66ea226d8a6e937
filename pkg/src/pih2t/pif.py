"""Permutation-invariant feature fusion.

Feature maps are channels-last: ``(..., width, height, channels)``. Any
leading axes are treated as a batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

__all__ = [
    "PIFFusionParams",
    "PIFLayer",
    "init_pif_params",
    "pi_mean",
    "pif_fuse",
    "pooled_representation",
]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def pi_mean(feature_map) -> torch.Tensor:
    """Channel mean at every spatial location.

    Values are sorted along the channel axis and then added one channel at
    a time, which fixes the order of floating-point additions, so the result
    is bitwise identical under any channel permutation. (A vectorised
    ``sum`` can regroup additions depending on memory alignment.)
    """
    fm = _as_tensor(feature_map)
    d = fm.shape[-1]
    ordered = torch.sort(fm, dim=-1).values
    acc = ordered[..., 0].clone()
    for c in range(1, d):
        acc = acc + ordered[..., c]
    return acc / d


def pooled_representation(feature_map) -> torch.Tensor:
    """Global average pool over the two spatial axes: ``(..., w, h, d) -> (..., d)``."""
    fm = _as_tensor(feature_map)
    return fm.mean(dim=(-3, -2))


@dataclass(frozen=True, eq=False)
class PIFFusionParams:
    """Per-channel weights: ``residual`` (a_c) scales ``F - F_PI``, ``identity`` (b_c) scales ``F``."""

    residual: np.ndarray
    identity: np.ndarray

    def __post_init__(self):
        a = np.array(self.residual, dtype=np.float64).reshape(-1)
        b = np.array(self.identity, dtype=np.float64).reshape(-1)
        if a.shape != b.shape:
            raise ValueError("residual and identity weights need the same length")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("PIF weights must be finite")
        object.__setattr__(self, "residual", a)
        object.__setattr__(self, "identity", b)

    @property
    def channel_dim(self) -> int:
        return len(self.residual)

    def __eq__(self, other):
        if not isinstance(other, PIFFusionParams):
            return NotImplemented
        return np.array_equal(self.residual, other.residual) and np.array_equal(self.identity, other.identity)

    def to_bytes(self) -> bytes:
        """``uint32 d`` then ``a_0..a_{d-1}, b_0..b_{d-1}`` as little-endian float64."""
        body = np.concatenate([self.residual, self.identity]).astype("<f8").tobytes()
        return struct.pack("<I", self.channel_dim) + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PIFFusionParams":
        (d,) = struct.unpack_from("<I", blob, 0)
        if len(blob) != 4 + 16 * d:
            raise ValueError(f"expected {4 + 16 * d} bytes for d={d}, got {len(blob)}")
        values = np.frombuffer(blob, dtype="<f8", offset=4).astype(np.float64)
        return cls(values[:d], values[d:])


def init_pif_params(channel_dim: int) -> PIFFusionParams:
    """Identity start: ``a = 0``, ``b = 1`` for every channel."""
    if channel_dim < 1:
        raise ValueError("channel_dim must be >= 1")
    return PIFFusionParams(np.zeros(channel_dim), np.ones(channel_dim))


class _PIFFunction(torch.autograd.Function):
    # out_c = a_c (F_c - m) + b_c F_c with m = mean_c F_c

    @staticmethod
    def forward(ctx, fm, a, b):
        m = pi_mean(fm).unsqueeze(-1)
        centred = fm - m
        ctx.save_for_backward(fm, centred, a, b)
        return a * centred + b * fm

    @staticmethod
    def backward(ctx, grad):
        fm, centred, a, b = ctx.saved_tensors
        d = fm.shape[-1]
        grad_fm = grad_a = grad_b = None
        if ctx.needs_input_grad[0]:
            grad_fm = grad * (a + b) - (grad * a).sum(dim=-1, keepdim=True) / d
        reduce_dims = tuple(range(grad.dim() - 1))
        if ctx.needs_input_grad[1]:
            grad_a = (grad * centred).sum(dim=reduce_dims)
        if ctx.needs_input_grad[2]:
            grad_b = (grad * fm).sum(dim=reduce_dims)
        return grad_fm, grad_a, grad_b


def pif_fuse(feature_map, params) -> torch.Tensor:
    """Kernel-size-1 channel mix of ``Concat{F - F_PI, F}``.

    ``params`` is a :class:`PIFFusionParams` or a ``(residual, identity)``
    pair of tensors (pass tensors to get gradients for them).
    """
    fm = _as_tensor(feature_map)
    if isinstance(params, PIFFusionParams):
        a = torch.as_tensor(params.residual, dtype=fm.dtype)
        b = torch.as_tensor(params.identity, dtype=fm.dtype)
    else:
        a, b = (_as_tensor(p).to(fm.dtype) for p in params)
    if a.shape != (fm.shape[-1],) or b.shape != a.shape:
        raise ValueError(f"PIF weights of shape {tuple(a.shape)} do not fit {fm.shape[-1]} channels")
    return _PIFFunction.apply(fm, a, b)


class PIFLayer(nn.Module):
    """Trainable PIF block placed between the last conv block and global pooling."""

    def __init__(self, channel_dim: int):
        super().__init__()
        start = init_pif_params(channel_dim)
        self.residual = nn.Parameter(torch.from_numpy(start.residual.copy()))
        self.identity = nn.Parameter(torch.from_numpy(start.identity.copy()))

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        return pif_fuse(fm, (self.residual, self.identity))

    def params(self) -> PIFFusionParams:
        return PIFFusionParams(self.residual.detach().numpy().copy(), self.identity.detach().numpy().copy())

    def load_params(self, params: PIFFusionParams) -> None:
        with torch.no_grad():
            self.residual.copy_(torch.from_numpy(params.residual))
            self.identity.copy_(torch.from_numpy(params.identity))
