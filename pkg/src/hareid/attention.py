"""Attention over deep descriptors, guided by the coarse-level output.

The coarse output o1 passes through a two-layer transformer network
(linear, ReLU, linear) into a guidance vector w living in descriptor space.
Each spatial location (i,j) of the activation map scores

    s_ij = softplus(w . f_ij)                       (strictly positive)
    a_ij = (s_ij + eps) / sum_kl (s_kl + eps)       (sums to one, eps = 0.1)

and the attended descriptors a_ij * f_ij are averaged over the grid into the
fine-level input embedding x2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, global_average_pool, matmul, parameter, relu, reshape,
                       scale_rows, softplus, tsum)
from .backbone import ActivationMap
from .errors import ConfigError, ShapeError

DEFAULT_EPSILON = 0.1


@dataclass
class TransformerNetParams:
    """Two fully connected layers with a ReLU between them; output lives in
    descriptor space so that w . f is defined."""

    w1: Tensor  # (H_t, H)
    b1: Tensor  # (H_t,)
    w2: Tensor  # (d, H_t)
    b2: Tensor  # (d,)

    @classmethod
    def init(cls, hidden: int, attn_hidden: int, d: int,
             rng: np.random.Generator) -> "TransformerNetParams":
        def weight(rows, cols):
            bound = 1.0 / np.sqrt(cols)
            return parameter(rng.uniform(-bound, bound, size=(rows, cols)))

        return cls(w1=weight(attn_hidden, hidden), b1=parameter(np.zeros(attn_hidden)),
                   w2=weight(d, attn_hidden), b2=parameter(np.zeros(d)))

    def named(self, prefix: str = "attn") -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class AttentionWeights:
    """Raw scores s and normalized weights a over the spatial grid (numpy
    snapshots; the differentiable path lives in the tensors they came from)."""

    s: np.ndarray
    a: np.ndarray
    epsilon: float

    def __post_init__(self):
        if self.s.shape != self.a.shape:
            raise ShapeError(f"score grid {self.s.shape} != weight grid {self.a.shape}")

    def argmax_cell(self) -> tuple[int, int]:
        flat = int(np.argmax(self.a))
        return flat // self.a.shape[1], flat % self.a.shape[1]


def guidance_signal(o1: Tensor, params: TransformerNetParams) -> Tensor:
    """w = W2 relu(W1 o1 + b1) + b2."""
    if o1.data.ndim != 1 or o1.shape[0] != params.w1.shape[1]:
        raise ShapeError(f"guidance_signal: o1 shape {o1.shape} does not match "
                         f"transformer input {params.w1.shape[1]}")
    return matmul(params.w2, relu(matmul(params.w1, o1) + params.b1)) + params.b2


def attention_scores(w: Tensor, amap: ActivationMap) -> Tensor:
    """Softplus of w . f_ij for every grid location; an (h, w) tensor."""
    h, gw, d = amap.shape
    if w.data.ndim != 1 or w.shape[0] != d:
        raise ShapeError(f"attention_scores: guidance shape {w.shape} does not match "
                         f"descriptor dim {d}")
    flat = reshape(amap.tensor, (h * gw, d))
    return reshape(softplus(matmul(flat, w)), (h, gw))


def normalize_scores(s: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Shift by epsilon and normalize to a distribution over the grid."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    shifted = s + epsilon
    return shifted / tsum(shifted)


def attend(a: Tensor, amap: ActivationMap) -> Tensor:
    """Scale every descriptor by its scalar weight: f_hat_ij = a_ij * f_ij."""
    h, gw, d = amap.shape
    if a.shape != (h, gw):
        raise ShapeError(f"attend: weight grid {a.shape} does not match "
                         f"map grid {(h, gw)}")
    flat = reshape(amap.tensor, (h * gw, d))
    attended = scale_rows(flat, reshape(a, (h * gw,)))
    return reshape(attended, (h, gw, d))


def attention_embedding(attended: Tensor) -> Tensor:
    """x2 = (1/(h*w)) sum_ij f_hat_ij."""
    return global_average_pool(attended)


def attention_pipeline(o1: Tensor, amap: ActivationMap, params: TransformerNetParams,
                       epsilon: float = DEFAULT_EPSILON) -> tuple[Tensor, AttentionWeights]:
    """Full guidance -> scores -> normalize -> attend -> embed chain.

    Returns the differentiable x2 and a numpy snapshot of the weights for
    reporting and export.
    """
    w = guidance_signal(o1, params)
    s = attention_scores(w, amap)
    a = normalize_scores(s, epsilon)
    x2 = attention_embedding(attend(a, amap))
    return x2, AttentionWeights(s=s.data.copy(), a=a.data.copy(), epsilon=epsilon)
