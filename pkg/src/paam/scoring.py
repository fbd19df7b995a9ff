"""Attention networks mapping a layer's filter weights to per-filter scores.

Two variants are provided. The vanilla network flattens the whole filter bank
into one row and maps it through a dense ``(F*C*K*K) x F`` matrix. The
key-query network treats each filter as a chunk of length ``C*K*K``, projects
chunks to queries and keys, and takes the row-wise mean of ``Q @ K.T``.
Both end in a score activation, by default the leaky exponential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

ACTIVATIONS = ("leaky_expo", "leaky_2sigmoid", "sigmoid", "sigmoid_hot")


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "leaky_expo"
    a: float = 0.01
    b: float = 100.0  # temperature of sigmoid_hot

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; choose from {ACTIVATIONS}")
        if not self.a > 0:
            raise ValueError(f"leak slope a must be > 0, got {self.a}")

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "leaky_expo":
            return ops.leaky_expo(x, self.a)
        if self.kind == "leaky_2sigmoid":
            return ops.leaky_2sigmoid(x, self.a)
        if self.kind == "sigmoid":
            return ops.sigmoid(x, 1.0)
        return ops.sigmoid(x, self.b)


def leaky_expo(x: float, a: float = 0.01) -> float:
    """Scalar leaky exponential: ``e**x`` below zero, ``1 + a*x`` from zero up."""
    return math.exp(x) if x < 0 else 1.0 + a * x


@dataclass
class ScoreVector:
    analog: Tensor
    layer_index: int

    @property
    def values(self) -> np.ndarray:
        return self.analog.data

    def __len__(self) -> int:
        return self.analog.shape[0]


@dataclass
class VanillaAttention:
    W_F: Tensor
    layer_index: int = 0
    variant: str = field(default="vanilla", init=False)

    def parameters(self) -> list[Tensor]:
        return [self.W_F]

    def state(self) -> dict[str, np.ndarray]:
        return {"W_F": self.W_F.data}


@dataclass
class KQAttention:
    W_Q: Tensor
    W_K: Tensor
    alpha: float = 1.0
    layer_index: int = 0
    variant: str = field(default="kq", init=False)

    def __post_init__(self):
        if self.W_Q.shape != self.W_K.shape or self.W_Q.ndim != 2:
            raise ShapeError(f"W_Q {self.W_Q.shape} and W_K {self.W_K.shape} must be equal 2-D shapes")
        if self.W_Q.shape[1] < 1:
            raise ValueError("hidden dimension d_l must be >= 1")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.W_Q, self.W_K]

    def state(self) -> dict[str, np.ndarray]:
        return {"W_Q": self.W_Q.data, "W_K": self.W_K.data}


def _filter_input(weights) -> Tensor:
    # CNN weights enter the attention network as constants; no gradient flows back into them.
    data = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    return Tensor(data)


def _pre_vanilla(weights, att: VanillaAttention) -> Tensor:
    w = _filter_input(weights)
    f = w.shape[0]
    flat = w.reshape(1, w.size)
    if att.W_F.shape != (w.size, f):
        raise ShapeError(
            f"layer {att.layer_index}: W_F has shape {att.W_F.shape}, expected {(w.size, f)}"
        )
    return ops.matmul(flat, att.W_F).reshape(f)


def _pre_kq(weights, att: KQAttention) -> Tensor:
    w = _filter_input(weights)
    f = w.shape[0]
    chunk = w.size // f if f else int(np.prod(w.shape[1:]))
    if att.W_Q.shape[0] != chunk:
        raise ShapeError(
            f"layer {att.layer_index}: W_Q has {att.W_Q.shape[0]} rows, expected C*K*K = {chunk}"
        )
    rows = w.reshape(f, chunk)
    q = rows @ att.W_Q
    k = rows @ att.W_K
    corr = ops.reduce_mean_rows(q @ k.T)
    return corr * (1.0 / (att.alpha * math.sqrt(att.d)))


def preactivation(weights, att) -> Tensor:
    """Scores before the activation function."""
    if isinstance(att, VanillaAttention):
        return _pre_vanilla(weights, att)
    return _pre_kq(weights, att)


def score_vanilla(weights, att: VanillaAttention, act: ActivationSpec) -> ScoreVector:
    return ScoreVector(act(_pre_vanilla(weights, att)), att.layer_index)


def score_kq(weights, att: KQAttention, act: ActivationSpec) -> ScoreVector:
    return ScoreVector(act(_pre_kq(weights, att)), att.layer_index)


def sensitivity(weights, att) -> float:
    """Mean over filters of ``sum_theta |d pre_f / d theta|`` for the AN parameters.

    This bounds how far one pre-activation moves under a unit sign step on
    every parameter, which is roughly what one Adam step does.
    """
    params = att.parameters()
    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
    try:
        if isinstance(att, VanillaAttention):
            w = np.asarray(weights.data if isinstance(weights, Tensor) else weights)
            return float(np.abs(w).sum())
        f = weights.shape[0]
        total = 0.0
        for i in range(f):
            for p in params:
                p.grad = None
            onehot = np.zeros(f)
            onehot[i] = 1.0
            preactivation(weights, att).backward(onehot)
            total += sum(float(np.abs(p.grad).sum()) for p in params if p.grad is not None)
        return total / f if f else 0.0
    finally:
        for p, (rg, g) in zip(params, saved):
            p.requires_grad, p.grad = rg, g


def score(weights, att, act: ActivationSpec) -> ScoreVector:
    if isinstance(att, VanillaAttention):
        return score_vanilla(weights, att, act)
    return score_kq(weights, att, act)


def init_attention(
    variant: str,
    weights_shape: tuple,
    rng: np.random.Generator,
    layer_index: int = 0,
    hidden_divisor: int = 1,
    alpha: float = 1.0,
):
    """Build an attention network whose initial scores are (close to) 1.

    Vanilla starts from ``W_F = 0``, giving scores of exactly 1. Key-query draws
    ``W_Q``/``W_K`` from ``N(0, 1/(C*K*K))`` so pre-activations start near 0.
    """
    f, c, k, _ = weights_shape
    if variant == "vanilla":
        n_in = f * c * k * k
        return VanillaAttention(Tensor(np.zeros((n_in, f)), requires_grad=True), layer_index)
    if variant == "kq":
        chunk = c * k * k
        d = max(1, f // hidden_divisor)
        std = 1.0 / math.sqrt(chunk)
        wq = rng.normal(0.0, std, size=(chunk, d))
        wk = rng.normal(0.0, std, size=(chunk, d))
        return KQAttention(Tensor(wq, requires_grad=True), Tensor(wk, requires_grad=True), alpha, layer_index)
    raise ValueError(f"unknown attention variant {variant!r}")


def block_alpha(last_layer_filters: int) -> float:
    """Per-block scale: square root of the filter count of the block's last layer."""
    return math.sqrt(last_layer_filters)
