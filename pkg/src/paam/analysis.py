"""Verification instruments: refinement-scale bounds, score histograms,
per-layer budget emission and an exhaustive subnetwork oracle.

Refinement bounds
-----------------
For a residual block ``x_{i+1} = x_i + f_i(x_i)`` whose output is multiplied
channel-wise by scores ``S`` in ``[delta, 1 + eps]``, the scored refinement
ratio ``||S*f||^2 / ||S*x||^2`` relative to the unscored ratio
``||f||^2 / ||x||^2`` is bounded. The multiplicative band that follows from
``delta^2 ||v||^2 <= ||S*v||^2 <= (1+eps)^2 ||v||^2`` is the *squared* band
``((1+eps)/delta)^2``. :func:`check_lemma1` reports both that band and the
narrower unsquared band ``(1+eps)/delta``; the latter can fail for inputs
whose energy sits on low-score channels while the residual branch's energy
sits on high-score channels (see :func:`unsquared_counterexample`).
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cnn import Network, ResidualBlock
from .pruning import BudgetReport, evaluate
from .tensor import Tensor, no_grad


class DegenerateInputError(ValueError):
    pass


class OracleGuardError(ValueError):
    pass


# ----------------------------------------------------------------------------
# refinement-scale bounds
# ----------------------------------------------------------------------------


@dataclass
class RefinementMeasurement:
    block_index: int
    ratio_unscored: float
    ratio_scored: float
    delta: float
    eps_bound: float
    below_delta_min: int = 0
    holds_stated: bool = True
    holds_squared: bool = True

    @property
    def lower_stated(self) -> float:
        return self.delta / self.eps_bound * self.ratio_unscored

    @property
    def upper_stated(self) -> float:
        return self.eps_bound / self.delta * self.ratio_unscored


def _within(lo: float, val: float, hi: float, rtol: float = 1e-12) -> bool:
    slack = rtol * max(abs(lo), abs(hi), abs(val))
    return lo - slack <= val <= hi + slack


def refinement_ratios(x_i: np.ndarray, f_x: np.ndarray, s: np.ndarray) -> tuple[float, float]:
    """``(||f||^2/||x||^2, ||s*f||^2/||s*x||^2)`` with ``s`` broadcast over channel axis 1 (or 0 if 3-D)."""
    axis = 1 if x_i.ndim == 4 else 0
    shape = [1] * x_i.ndim
    shape[axis] = -1
    sb = s.reshape(shape)
    nx = float(np.sum(x_i * x_i))
    if nx == 0.0:
        raise DegenerateInputError("refinement ratio undefined: ||x_i|| = 0")
    sx = float(np.sum((sb * x_i) ** 2))
    return float(np.sum(f_x * f_x)) / nx, float(np.sum((sb * f_x) ** 2)) / sx


def check_lemma1(block: ResidualBlock, x, scores, delta_min: float = 1e-3, block_index: int = 0) -> RefinementMeasurement:
    """Measure the refinement ratios of one block under channel scores.

    ``x_i`` is the block's shortcut output (the input itself for identity
    shortcuts) and ``f_i(x_i)`` its unscored residual branch, so both share
    the output shape. Scores are clipped to ``[delta_min, inf)``; how many
    needed clipping is recorded. ``eps_bound`` is ``1 + eps`` with
    ``eps = max(0, max(s) - 1)``.
    """
    if not delta_min > 0:
        raise ValueError(f"delta_min must be > 0, got {delta_min}")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    s = np.asarray(getattr(scores, "values", scores), dtype=np.float64).reshape(-1)
    if s.shape != (block.out_channels,):
        raise ValueError(f"block {block_index}: {s.size} scores for {block.out_channels} channels")
    with no_grad():
        x_i = block.shortcut(x).data
        f_x = block.branch(x).data
    below = int(np.sum(s < delta_min))
    s = np.maximum(s, delta_min)
    ru, rs = refinement_ratios(x_i, f_x, s)
    # 1 + eps is the activation ceiling, never below 1 since eps >= 0.
    delta, top = float(s.min()), max(1.0, float(s.max()))
    band = top / delta
    return RefinementMeasurement(
        block_index, ru, rs, delta, top, below,
        holds_stated=_within(ru / band, rs, ru * band),
        holds_squared=_within(ru / band ** 2, rs, ru * band ** 2),
    )


def block_inputs(net: Network, x) -> list[Tensor]:
    """Input of every residual block for a score-free, eval-mode pass of ``x``."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    out = []
    with no_grad():
        h = net.stem(x)
        for u in net.plain:
            h = u(h)
        for b in net.blocks:
            out.append(h)
            h = b(h)
    return out


def check_network(net: Network, x, layer_scores: Sequence, delta_min: float = 1e-3) -> list[RefinementMeasurement]:
    """:func:`check_lemma1` on every block, scored by its second conv's scores."""
    units = net.units
    pos = {id(u): i for i, u in enumerate(units)}
    out = []
    for i, (b, xin) in enumerate(zip(net.blocks, block_inputs(net, x))):
        out.append(check_lemma1(b, xin, layer_scores[pos[id(b.conv2)]], delta_min, i))
    return out


def unsquared_counterexample(delta: float = 0.5, top: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two-channel ``(x, f, s)`` reaching the squared band, beyond the unsquared one."""
    x = np.array([1.0, 0.0]).reshape(2, 1, 1)
    f = np.array([0.0, 1.0]).reshape(2, 1, 1)
    return x, f, np.array([delta, top])


# ----------------------------------------------------------------------------
# histograms
# ----------------------------------------------------------------------------


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    layer_counts: list[np.ndarray]
    pooled: np.ndarray
    near_one_mode: float
    bimodality: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "bin_index", "bin_lo", "bin_hi", "count"])
        rows = [(str(i), c) for i, c in enumerate(self.layer_counts)] + [("pooled", self.pooled)]
        for name, counts in rows:
            for b, n in enumerate(counts):
                w.writerow([name, b, repr(float(self.edges[b])), repr(float(self.edges[b + 1])), int(n)])
        return buf.getvalue()


def near_one_mode(values: np.ndarray, edges: np.ndarray, counts: np.ndarray) -> float:
    """Centre of the fullest bin whose centre is at least 0.9 (1.0 when those bins are empty)."""
    centres = 0.5 * (edges[:-1] + edges[1:])
    cand = np.flatnonzero(centres >= 0.9)
    if cand.size == 0 or counts[cand].max() == 0:
        return 1.0
    best = cand[counts[cand] == counts[cand].max()]
    return float(centres[best[np.argmin(np.abs(centres[best] - 1.0))]])


def bimodality(values: np.ndarray, mode: float, width: float = 0.1) -> float:
    """Fraction of scores within ``width`` of 0 or of ``mode``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return 0.0
    hit = (np.abs(v) <= width) | (np.abs(v - mode) <= width)
    return float(hit.mean())


def histogram(scores: Sequence, bins: int = 20) -> ScoreHistogram:
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    arrs = [np.asarray(getattr(s, "values", s), dtype=np.float64).reshape(-1) for s in scores]
    pooled_vals = np.concatenate(arrs) if arrs else np.zeros(0)
    top = max(1.0, float(pooled_vals.max()) if pooled_vals.size else 1.0)
    edges = np.linspace(0.0, top, bins + 1)
    layer_counts = [np.histogram(a, bins=edges)[0] for a in arrs]
    pooled = np.histogram(pooled_vals, bins=edges)[0]
    mode = near_one_mode(pooled_vals, edges, pooled)
    return ScoreHistogram(edges, layer_counts, pooled, mode, bimodality(pooled_vals, mode))


# ----------------------------------------------------------------------------
# budget data
# ----------------------------------------------------------------------------

BUDGET_FIELDS = ["layer_index", "F_original", "F_surviving", "structural", "layer_removed"]


def emit_budget_data(report: BudgetReport, path) -> Path:
    """Write per-layer ``(original, surviving)`` counts as CSV for bar plots."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BUDGET_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in report.layers:
        w.writerow({k: (int(row[k]) if isinstance(row[k], bool) else row[k]) for k in BUDGET_FIELDS})
    try:
        atomic_write_text(path, buf.getvalue())
    except OSError as e:
        raise OSError(f"cannot write budget data to {path}: {e.strerror or e}") from e
    return path


def read_budget_data(path) -> list[dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read budget data from {path}: {e.strerror or e}") from e
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({
            "layer_index": int(r["layer_index"]),
            "F_original": int(r["F_original"]),
            "F_surviving": int(r["F_surviving"]),
            "structural": bool(int(r["structural"])),
            "layer_removed": bool(int(r["layer_removed"])),
        })
    return rows


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


# ----------------------------------------------------------------------------
# exhaustive oracle
# ----------------------------------------------------------------------------


@dataclass
class OracleTable:
    keep_counts: list[int]
    rows: list[tuple[tuple[tuple[int, ...], ...], float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def loss_of(self, kept: Sequence[Sequence[int]]) -> float:
        key = tuple(tuple(int(i) for i in k) for k in kept)
        for k, loss in self.rows:
            if k == key:
                return loss
        raise KeyError(f"mask {key} is not in the table")

    def percentile(self, loss: float) -> float:
        """Percentage of enumerated masks with strictly lower loss."""
        lower = sum(1 for _, l in self.rows if l < loss)
        return 100.0 * lower / len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "kept", "loss"])
        order = sorted(range(len(self.rows)), key=lambda i: (self.rows[i][1], self.rows[i][0]))
        for r, i in enumerate(order):
            kept, loss = self.rows[i]
            w.writerow([r, "|".join(" ".join(map(str, k)) for k in kept), repr(float(loss))])
        return buf.getvalue()


def combination_count(sizes: Sequence[int], keep_counts: Sequence[int]) -> int:
    return math.prod(math.comb(int(f), int(k)) for f, k in zip(sizes, keep_counts))


def kept_indices(masks: Sequence) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(i) for i in np.flatnonzero(np.asarray(m) > 0)) for m in masks)


def brute_force_best_subnet(net: Network, x: np.ndarray, y: np.ndarray, keep_counts: Sequence[int],
                            guard: int = 100_000) -> tuple[list[np.ndarray], OracleTable]:
    """Evaluate the masked loss of every per-layer ``k_l``-of-``F_l`` filter choice.

    No candidate is retrained. Returns the best masks (ties go to the
    lexicographically first choice) and the full table.
    """
    sizes = [u.bank.F for u in net.units]
    if len(keep_counts) != len(sizes):
        raise ValueError(f"expected {len(sizes)} keep counts, got {len(keep_counts)}")
    for l, (f, k) in enumerate(zip(sizes, keep_counts)):
        if not 0 <= k <= f:
            raise ValueError(f"layer {l}: keep count {k} outside [0, {f}]")
    total = combination_count(sizes, keep_counts)
    if total > guard:
        raise OracleGuardError(f"{total} mask combinations exceed the guard of {guard}")
    table = OracleTable(list(keep_counts))
    per_layer = [list(itertools.combinations(range(f), k)) for f, k in zip(sizes, keep_counts)]
    best_key, best_loss = None, math.inf
    for combo in itertools.product(*per_layer):
        masks = []
        for f, kept in zip(sizes, combo):
            m = np.zeros(f)
            m[list(kept)] = 1.0
            masks.append(m)
        loss, _ = evaluate(net, x, y, masks, "binary")
        table.rows.append((combo, loss))
        if loss < best_loss:
            best_key, best_loss = combo, loss
    best = []
    for f, kept in zip(sizes, best_key):
        m = np.zeros(f)
        m[list(kept)] = 1.0
        best.append(m)
    return best, table
