"""Low-rank adapter factors and the scaled side-path application rule."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass
class LoraFactors:
    """A factor pair for one target linear, row-vector convention.

    ``b`` maps the input into the rank-``rank`` bottleneck, ``a`` maps it back
    out, so the adapted weight is ``W + (alpha/rank) * b @ a``. Shapes are
    ``(d_in, rank)`` and ``(rank, d_out)`` — or the same with one leading
    batch axis when every sample in a batch carries its own factors.
    """

    b: Tensor
    a: Tensor
    rank: int
    alpha: float

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        d_in, d_out = self.b.shape[-2], self.a.shape[-1]
        if self.rank > min(d_in, d_out):
            raise ValueError(f"rank {self.rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        if self.b.shape[-1] != self.rank or self.a.shape[-2] != self.rank:
            raise ValueError("factor shapes do not match the declared rank")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def apply_delta(x: Tensor, w: Tensor, bias: Tensor, factors: LoraFactors | None) -> Tensor:
    """y = x @ w + bias, plus the low-rank side path when factors are present.

    The side path is computed as ``((x @ b) @ a) * (alpha/rank)`` — the dense
    ``d_in x d_out`` delta is never materialised here. ``x`` is ``(..., d_in)``
    with at least one leading axis; per-sample factor stacks broadcast through
    the batched matmul.
    """
    y = T.add(T.matmul(x, w), bias)
    if factors is None:
        return y
    if factors.b.shape[-2] != w.shape[0] or factors.a.shape[-1] != w.shape[1]:
        raise ValueError(
            f"factor dims ({factors.b.shape[-2]}x{factors.a.shape[-1]}) do not match "
            f"base weight {tuple(w.shape)}"
        )
    side = T.matmul(T.matmul(x, factors.b), factors.a)
    return T.add(y, T.scale(side, factors.scale))
