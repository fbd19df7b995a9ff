"""Prunable ResNet-style CNN and exact parameter/flop accounting.

A :class:`Network` is a stem conv, an optional chain of plain conv layers and a
list of residual blocks, followed by global average pooling and a linear
classifier. Every conv carries a per-channel normalization and is a *prunable
layer* with its own ``layer_index``; its output feature map can be multiplied
by a score vector.

Score placement: after normalization and ReLU for layers that have one, and
after normalization only for the second conv of a residual block (its ReLU
follows the residual sum). Shortcuts are never scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, no_grad

SCORE_MODES = ("off", "analog", "binary")


@dataclass
class ChannelNorm:
    """Per-channel affine normalization driven by running statistics.

    In training mode the running statistics are first moved toward the batch
    statistics, then applied. The output never depends on batch composition
    beyond that update.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "ChannelNorm":
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            np.zeros(channels, dtype=Tensor(0.0).data.dtype),
            np.ones(channels, dtype=Tensor(0.0).data.dtype),
            momentum,
        )

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        if train and x.shape[1]:
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * x.data.mean(axis=(0, 2, 3))
            self.running_var = (1 - m) * self.running_var + m * x.data.var(axis=(0, 2, 3))
        return ops.channel_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


@dataclass
class FilterBank:
    weights: Tensor
    layer_index: int
    spatial_dims: tuple[int, int]

    @property
    def F(self) -> int:
        return self.weights.shape[0]

    @property
    def C(self) -> int:
        return self.weights.shape[1]

    @property
    def K(self) -> int:
        return self.weights.shape[2]


@dataclass
class ConvUnit:
    bank: FilterBank
    norm: ChannelNorm
    stride: int = 1
    padding: int = 1
    relu: bool = True
    # False when the output joins a residual stream: filters can then only be masked.
    structural: bool = True

    @property
    def layer_index(self) -> int:
        return self.bank.layer_index

    def __call__(self, x: Tensor, score=None, train: bool = False) -> Tensor:
        y = ops.conv2d(x, self.bank.weights, self.stride, self.padding)
        y = self.norm(y, train)
        if self.relu:
            y = ops.relu(y)
        if score is not None:
            y = ops.pointwise_mul_broadcast(score, y)
        return y

    def parameters(self) -> list[Tensor]:
        return [self.bank.weights] + self.norm.parameters()


@dataclass
class Projection:
    """1x1 strided conv + normalization shortcut (never scored, never pruned)."""

    weights: Tensor
    norm: ChannelNorm
    stride: int

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return self.norm(ops.conv2d(x, self.weights, self.stride, 0), train)

    def parameters(self) -> list[Tensor]:
        return [self.weights] + self.norm.parameters()


@dataclass
class ResidualBlock:
    conv1: ConvUnit
    conv2: ConvUnit
    in_channels: int
    out_channels: int
    stride: int
    projection: Projection | None = None

    @property
    def identity_pass(self) -> bool:
        """True once the first conv has no filters left."""
        return self.conv1.bank.F == 0

    def shortcut(self, x: Tensor, train: bool = False) -> Tensor:
        if self.projection is not None:
            return self.projection(x, train)
        if self.stride == 1 and self.in_channels == self.out_channels:
            return x
        return ops.shortcut_pad(x, self.stride, self.out_channels)

    def branch(self, x: Tensor, s1=None, s2=None, train: bool = False) -> Tensor:
        return self.conv2(self.conv1(x, s1, train), s2, train)

    def __call__(self, x: Tensor, s1=None, s2=None, train: bool = False) -> Tensor:
        return ops.relu(ops.add(self.shortcut(x, train), self.branch(x, s1, s2, train)))

    def parameters(self) -> list[Tensor]:
        ps = self.conv1.parameters() + self.conv2.parameters()
        if self.projection is not None:
            ps += self.projection.parameters()
        return ps


@dataclass
class Network:
    stem: ConvUnit
    plain: list[ConvUnit]
    blocks: list[ResidualBlock]
    head_weight: Tensor
    head_bias: Tensor
    input_dims: tuple[int, int, int]
    arch: dict = field(default_factory=dict)

    @property
    def units(self) -> list[ConvUnit]:
        """Prunable conv layers in ``layer_index`` order."""
        out = [self.stem, *self.plain]
        for b in self.blocks:
            out += [b.conv1, b.conv2]
        return out

    @property
    def L(self) -> int:
        return len(self.units)

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def feeders(self) -> list[int | None]:
        """For each prunable layer, the index of the prunable layer whose output it consumes."""
        feeders: list[int | None] = [None]
        idx = 0
        for _ in self.plain:
            feeders.append(idx)
            idx += 1
        stream = idx
        for _ in self.blocks:
            feeders.append(stream)
            feeders.append(stream + 1)
            stream += 2
        return feeders

    def parameters(self) -> list[Tensor]:
        ps: list[Tensor] = []
        for u in [self.stem, *self.plain]:
            ps += u.parameters()
        for b in self.blocks:
            ps += b.parameters()
        return ps + [self.head_weight, self.head_bias]

    def norms(self) -> list[ChannelNorm]:
        out = [u.norm for u in self.units]
        out += [b.projection.norm for b in self.blocks if b.projection is not None]
        return out


# ----------------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------------


def _conv_weights(rng: np.random.Generator, f: int, c: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / max(c * k * k, 1))
    return Tensor(rng.normal(0.0, std, size=(f, c, k, k)), requires_grad=True)


def _out_dims(dims: tuple[int, int], k: int, stride: int, padding: int) -> tuple[int, int]:
    return tuple((d + 2 * padding - k) // stride + 1 for d in dims)  # type: ignore[return-value]


def build_network(arch: dict, input_dims: Sequence[int], num_classes: int, rng: np.random.Generator) -> Network:
    """Build a network from an architecture dict.

    ``{"kind": "resnet", "widths": [8, 16, 32], "blocks_per_stage": 1, "shortcut": "pad"}``
    gives ResNet-(6n+2); ``{"kind": "plain", "widths": [3, 3]}`` gives a chain of
    3x3 convs with no residual blocks.
    """
    kind = arch.get("kind", "resnet")
    widths = list(arch.get("widths", [8, 16, 32]))
    kernel = int(arch.get("kernel", 3))
    momentum = float(arch.get("norm_momentum", 0.1))
    c_in, h, w = (int(v) for v in input_dims)
    pad = kernel // 2
    index = 0

    def unit(c, f, dims, stride, relu=True):
        nonlocal index
        out = _out_dims(dims, kernel, stride, pad)
        u = ConvUnit(FilterBank(_conv_weights(rng, f, c, kernel), index, out), ChannelNorm.create(f, momentum),
                     stride, pad, relu)
        index += 1
        return u, out

    stem, dims = unit(c_in, widths[0], (h, w), 1)
    plain: list[ConvUnit] = []
    blocks: list[ResidualBlock] = []
    if kind == "plain":
        c = widths[0]
        for f in widths[1:]:
            u, dims = unit(c, f, dims, 1)
            plain.append(u)
            c = f
    elif kind == "resnet":
        n = int(arch.get("blocks_per_stage", 1))
        shortcut = arch.get("shortcut", "pad")
        c = widths[0]
        for stage, f in enumerate(widths):
            for i in range(n):
                stride = 2 if (stage > 0 and i == 0) else 1
                u1, d1 = unit(c, f, dims, stride)
                u2, d2 = unit(f, f, d1, 1, relu=False)
                u2.structural = False
                proj = None
                if shortcut == "projection" and (stride != 1 or c != f):
                    proj = Projection(_conv_weights(rng, f, c, 1), ChannelNorm.create(f, momentum), stride)
                blocks.append(ResidualBlock(u1, u2, c, f, stride, proj))
                c, dims = f, d2
        # The layer feeding the first block writes into the residual stream.
        ([stem] + plain)[-1].structural = False
    else:
        raise ValueError(f"unknown architecture kind {kind!r}")

    feat = ([stem] + plain)[-1].bank.F if not blocks else blocks[-1].out_channels
    bound = 1.0 / np.sqrt(feat)
    head_w = Tensor(rng.uniform(-bound, bound, size=(num_classes, feat)), requires_grad=True)
    head_b = Tensor(np.zeros(num_classes), requires_grad=True)
    return Network(stem, plain, blocks, head_w, head_b, (c_in, h, w), dict(arch))


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------


def _resolve_scores(net: Network, scores, score_mode: str, threshold: float):
    if score_mode not in SCORE_MODES:
        raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {score_mode!r}")
    units = net.units
    if score_mode == "off" or scores is None:
        if score_mode != "off":
            raise ValueError(f"score_mode {score_mode!r} requires score vectors")
        return [None] * len(units)
    if len(scores) != len(units):
        raise ShapeError(f"expected {len(units)} score vectors, got {len(scores)}")
    out = []
    for u, s in zip(units, scores):
        s = getattr(s, "analog", s)
        if score_mode == "binary":
            raw = s.data if isinstance(s, Tensor) else np.asarray(s)
            s = Tensor((raw >= threshold).astype(raw.dtype if raw.dtype.kind == "f" else np.float64))
        elif not isinstance(s, Tensor):
            s = Tensor(s)
        if s.shape != (u.bank.F,):
            raise ShapeError(f"layer {u.layer_index}: score length {s.shape} does not match F={u.bank.F}")
        out.append(s)
    return out


def features(net: Network, x, scores=None, score_mode: str = "off", train: bool = False,
             threshold: float = 0.5) -> Tensor:
    """Pooled penultimate features (``N x D``)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    s = _resolve_scores(net, scores, score_mode, threshold)
    h = net.stem(x, s[0], train)
    i = 1
    for u in net.plain:
        h = u(h, s[i], train)
        i += 1
    for b in net.blocks:
        h = b(h, s[i], s[i + 1], train)
        i += 2
    return ops.global_average_pool(h)


def forward(net: Network, x, scores=None, score_mode: str = "off", train: bool = False,
            threshold: float = 0.5) -> Tensor:
    """Logits of ``net`` on the batch ``x`` (``N x C x H x W``).

    ``score_mode`` is ``off`` (no multiplication), ``analog`` (multiply by the
    given scores) or ``binary`` (multiply by ``scores >= threshold``; 0/1 masks
    pass through unchanged).
    """
    feats = features(net, x, scores, score_mode, train, threshold)
    return ops.linear(feats, net.head_weight, net.head_bias)


def predict(net: Network, x, batch_size: int = 256, **kw) -> np.ndarray:
    with no_grad():
        outs = [forward(net, x[i : i + batch_size], **kw).data for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, net.num_classes))


# ----------------------------------------------------------------------------
# accounting
# ----------------------------------------------------------------------------


@dataclass
class FlopsAccount:
    params: list[int]
    flops: list[int]

    @property
    def total_params(self) -> int:
        return int(sum(self.params))

    @property
    def total_flops(self) -> int:
        return int(sum(self.flops))

    def to_dict(self) -> dict:
        return {
            "params": [int(p) for p in self.params],
            "flops": [int(f) for f in self.flops],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }


def layer_cost(c: int, f: int, k: int, h: int, w: int) -> tuple[int, int]:
    params = int(c) * int(f) * int(k) * int(k)
    return params, params * int(h) * int(w)


def count(net: Network, surviving: Sequence[int] | None = None) -> FlopsAccount:
    """Params/flops of every prunable layer with the given survivor counts.

    A layer's input channel count is the survivor count of the layer feeding
    it (image channels for the stem). ``surviving=None`` counts the dense net.
    """
    units = net.units
    if surviving is None:
        surviving = [u.bank.F for u in units]
    if len(surviving) != len(units):
        raise ValueError(f"expected {len(units)} survivor counts, got {len(surviving)}")
    for u, s in zip(units, surviving):
        if int(s) != s or s < 0 or s > u.bank.F:
            raise ValueError(f"layer {u.layer_index}: surviving count {s} outside [0, {u.bank.F}]")
    params, flops = [], []
    for u, fd in zip(units, net.feeders()):
        c = u.bank.C if fd is None else int(surviving[fd])
        h, w = u.bank.spatial_dims
        p, fl = layer_cost(c, int(surviving[u.layer_index]), u.bank.K, h, w)
        params.append(p)
        flops.append(fl)
    return FlopsAccount(params, flops)


def count_physical(net: Network) -> FlopsAccount:
    """Params/flops of the conv weights as physically stored (masked filters included)."""
    params, flops = [], []
    for u in net.units:
        h, w = u.bank.spatial_dims
        p, fl = layer_cost(u.bank.C, u.bank.F, u.bank.K, h, w)
        params.append(p)
        flops.append(fl)
    return FlopsAccount(params, flops)


# ----------------------------------------------------------------------------
# state (used by checkpointing)
# ----------------------------------------------------------------------------


def _unit_desc(u: ConvUnit) -> dict:
    return {
        "layer_index": u.layer_index,
        "F": u.bank.F, "C": u.bank.C, "K": u.bank.K,
        "stride": u.stride, "padding": u.padding,
        "relu": u.relu, "structural": u.structural,
        "spatial_dims": list(u.bank.spatial_dims),
        "norm_momentum": u.norm.momentum, "norm_eps": u.norm.eps,
    }


def describe(net: Network) -> dict:
    """JSON-able structural description; with :func:`state_arrays` it fully determines ``net``."""
    return {
        "arch": net.arch,
        "input_dims": list(net.input_dims),
        "num_classes": net.num_classes,
        "stem": _unit_desc(net.stem),
        "plain": [_unit_desc(u) for u in net.plain],
        "blocks": [
            {
                "conv1": _unit_desc(b.conv1), "conv2": _unit_desc(b.conv2),
                "in_channels": b.in_channels, "out_channels": b.out_channels, "stride": b.stride,
                "projection": b.projection is not None,
            }
            for b in net.blocks
        ],
    }


def state_arrays(net: Network) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}

    def put_unit(prefix, u):
        out[f"{prefix}.weight"] = u.bank.weights.data
        put_norm(prefix + ".norm", u.norm)

    def put_norm(prefix, n):
        out[f"{prefix}.gamma"] = n.gamma.data
        out[f"{prefix}.beta"] = n.beta.data
        out[f"{prefix}.running_mean"] = n.running_mean
        out[f"{prefix}.running_var"] = n.running_var

    put_unit("stem", net.stem)
    for i, u in enumerate(net.plain):
        put_unit(f"plain.{i}", u)
    for i, b in enumerate(net.blocks):
        put_unit(f"blocks.{i}.conv1", b.conv1)
        put_unit(f"blocks.{i}.conv2", b.conv2)
        if b.projection is not None:
            out[f"blocks.{i}.projection.weight"] = b.projection.weights.data
            put_norm(f"blocks.{i}.projection.norm", b.projection.norm)
    out["head.weight"] = net.head_weight.data
    out["head.bias"] = net.head_bias.data
    return out


def from_state(desc: dict, arrays: dict[str, np.ndarray]) -> Network:
    def norm(prefix, d):
        return ChannelNorm(
            Tensor(arrays[f"{prefix}.gamma"], requires_grad=True),
            Tensor(arrays[f"{prefix}.beta"], requires_grad=True),
            np.array(arrays[f"{prefix}.running_mean"]),
            np.array(arrays[f"{prefix}.running_var"]),
            d.get("norm_momentum", 0.1), d.get("norm_eps", 1e-5),
        )

    def unit(prefix, d):
        bank = FilterBank(Tensor(arrays[f"{prefix}.weight"], requires_grad=True), d["layer_index"],
                          tuple(d["spatial_dims"]))
        if bank.weights.shape != (d["F"], d["C"], d["K"], d["K"]):
            raise ShapeError(f"{prefix}: stored weight shape {bank.weights.shape} disagrees with description")
        return ConvUnit(bank, norm(prefix + ".norm", d), d["stride"], d["padding"], d["relu"], d["structural"])

    stem = unit("stem", desc["stem"])
    plain = [unit(f"plain.{i}", d) for i, d in enumerate(desc["plain"])]
    blocks = []
    for i, bd in enumerate(desc["blocks"]):
        proj = None
        if bd["projection"]:
            proj = Projection(Tensor(arrays[f"blocks.{i}.projection.weight"], requires_grad=True),
                              norm(f"blocks.{i}.projection.norm", bd["conv2"]), bd["stride"])
        blocks.append(ResidualBlock(unit(f"blocks.{i}.conv1", bd["conv1"]), unit(f"blocks.{i}.conv2", bd["conv2"]),
                                    bd["in_channels"], bd["out_channels"], bd["stride"], proj))
    return Network(stem, plain, blocks,
                   Tensor(arrays["head.weight"], requires_grad=True), Tensor(arrays["head.bias"], requires_grad=True),
                   tuple(desc["input_dims"]), dict(desc["arch"]))
