"""Scaled dot-product attention, multi-head attention, feed-forward, embeddings.

Shapes follow one convention throughout: a sequence is rows, the model width
``d`` is columns. ``scaled_dot_attention(x, y, ...)`` reads queries from ``x``
and keys/values from ``y``, so the output always has ``x.rows`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from .autograd import (
    Tensor,
    add,
    concat_cols,
    embedding,
    matmul,
    relu,
    scale,
    softmax_rows,
    transpose,
)

# Finite stand-in for -inf: keeps every tensor finite while exp() underflows
# masked scores to exactly 0 after max subtraction.
MASKED_SCORE = -1e9


@dataclass
class HeadParams:
    """Projection triple for one attention head; each matrix is d x d_n."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    def __post_init__(self):
        if not (self.wq.shape == self.wk.shape == self.wv.shape):
            raise ValueError(
                f"head projections must share a shape: {self.wq.shape}, "
                f"{self.wk.shape}, {self.wv.shape}"
            )

    @property
    def width(self) -> int:
        return self.wq.cols


@dataclass
class MhaParams:
    heads: list[HeadParams]
    wo: Tensor  # d x d output projection over the concatenated heads

    def __post_init__(self):
        if not self.heads:
            raise ValueError("multi-head attention needs at least one head")
        d = self.heads[0].wq.rows
        n = len(self.heads)
        if d % n != 0:
            raise ValueError(f"model width {d} not divisible by head count {n}")
        for h in self.heads:
            if h.wq.rows != d or h.width != d // n:
                raise ValueError(
                    f"every head must be {d}x{d // n}, got {h.wq.shape}"
                )
        if self.wo.shape != (d, d):
            raise ValueError(f"output projection must be {d}x{d}, got {self.wo.shape}")

    @property
    def d(self) -> int:
        return self.heads[0].wq.rows

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @classmethod
    def create(cls, d: int, n_heads: int, rng: np.random.Generator) -> "MhaParams":
        if d % n_heads != 0:
            raise ValueError(f"model width {d} not divisible by head count {n_heads}")
        dn = d // n_heads
        std = 1.0 / math.sqrt(d)
        heads = [
            HeadParams(
                Tensor(rng.normal(0.0, std, (d, dn))),
                Tensor(rng.normal(0.0, std, (d, dn))),
                Tensor(rng.normal(0.0, std, (d, dn))),
            )
            for _ in range(n_heads)
        ]
        return cls(heads, Tensor(rng.normal(0.0, std, (d, d))))


def causal_mask(length: int) -> np.ndarray:
    """Strictly-upper-triangular MASKED_SCORE matrix: row h sees columns <= h."""
    return np.triu(np.full((length, length), MASKED_SCORE), k=1)


def scaled_dot_attention(
    x: Tensor,
    y: Tensor,
    head: HeadParams,
    causal: bool = False,
    with_weights: bool = False,
):
    """One head: softmax(q k^T / sqrt(d_n)) v with q from x, k and v from y."""
    if x.cols != head.wq.rows:
        raise ValueError(f"query width {x.cols} does not match projection {head.wq.shape}")
    if y.cols != head.wk.rows:
        raise ValueError(f"key width {y.cols} does not match projection {head.wk.shape}")
    q = matmul(x, head.wq)
    k = matmul(y, head.wk)
    v = matmul(y, head.wv)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(head.width))
    if causal:
        if x.rows != y.rows:
            raise ValueError(
                f"causal attention requires matching lengths, got {x.rows} and {y.rows}"
            )
        scores = add(scores, Tensor(causal_mask(x.rows)))
    weights = softmax_rows(scores)
    out = matmul(weights, v)
    return (out, weights) if with_weights else out


def multi_head_attention(x: Tensor, y: Tensor, params: MhaParams, causal: bool = False) -> Tensor:
    outs = [scaled_dot_attention(x, y, h, causal=causal) for h in params.heads]
    return matmul(concat_cols(outs), params.wo)


@dataclass
class FfnParams:
    """Two-layer position-wise feed-forward: d -> multiplier*d -> d."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        if self.w1.cols != self.w2.rows or self.w1.rows != self.w2.cols:
            raise ValueError(
                f"feed-forward shapes inconsistent: {self.w1.shape} then {self.w2.shape}"
            )
        if self.b1.shape != (1, self.w1.cols) or self.b2.shape != (1, self.w2.cols):
            raise ValueError("feed-forward biases must be row vectors matching their layer")

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, multiplier: int = 4) -> "FfnParams":
        if multiplier < 1:
            raise ValueError(f"feed-forward multiplier must be >= 1, got {multiplier}")
        inner = multiplier * d
        return cls(
            Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, inner))),
            Tensor(np.zeros((1, inner))),
            Tensor(rng.normal(0.0, 1.0 / math.sqrt(inner), (inner, d))),
            Tensor(np.zeros((1, d))),
        )


def feed_forward(x: Tensor, params: FfnParams) -> Tensor:
    return add(matmul(relu(add(matmul(x, params.w1), params.b1)), params.w2), params.b2)


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Classic fixed positional table; row 0 is (0, 1, 0, 1, ...)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


@dataclass
class EmbeddingTable:
    """Token rows plus a positional signal (sinusoidal unless a table is given)."""

    rows: Tensor
    positions: Tensor | None = None  # learned positional table, else sinusoidal

    @property
    def vocab_size(self) -> int:
        return self.rows.rows

    @property
    def dim(self) -> int:
        return self.rows.cols

    @classmethod
    def create(
        cls,
        vocab_size: int,
        dim: int,
        rng: np.random.Generator,
        learned_positions: int | None = None,
    ) -> "EmbeddingTable":
        std = 1.0 / math.sqrt(dim)
        rows = Tensor(rng.normal(0.0, std, (vocab_size, dim)))
        positions = None
        if learned_positions is not None:
            positions = Tensor(rng.normal(0.0, std, (learned_positions, dim)))
        return cls(rows, positions)


def embed_tokens(ids: Sequence[int], table: EmbeddingTable) -> Tensor:
    """len(ids) x d matrix of token embedding + positional encoding."""
    tok = embedding(table.rows, ids)
    n = len(tok.value)
    if n == 0:
        return tok
    if table.positions is None:
        pos = Tensor(sinusoidal_encoding(n, table.dim))
    else:
        if n > table.positions.rows:
            raise ValueError(
                f"sequence length {n} exceeds learned positional table "
                f"({table.positions.rows} rows)"
            )
        pos = embedding(table.positions, range(n))
    return add(tok, pos)
