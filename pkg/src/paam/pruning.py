"""Regularized score training, binarization, extraction and the alternating schedule.

The schedule is a small state machine::

    Warmup -> TrainAN -> TrainCNN -> (TrainAN ... ) -> Finetune

Warmup trains the dense CNN without scores. Each cycle trains the attention
networks on cross-entropy plus a weighted L1 penalty on the analog scores with
every CNN tensor frozen, then trains the CNN on cross-entropy with binary
masks and the attention networks frozen. After the last cycle the network is
physically shrunk and fine-tuned.
"""

from __future__ import annotations

import copy
import csv
import enum
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import cnn, ops
from .cnn import FlopsAccount, Network
from .data import Dataset
from .optim import SGD, Adam
from .scoring import ActivationSpec, ScoreVector, score, sensitivity
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class BudgetError(ConfigError):
    pass


class StructureError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


class SchedulePhase(str, enum.Enum):
    WARMUP = "Warmup"
    TRAIN_AN = "TrainAN"
    TRAIN_CNN = "TrainCNN"
    FINETUNE = "Finetune"


def next_phase(phase: SchedulePhase, cycle_index: int, cycles: int) -> SchedulePhase:
    """Legal successor of ``phase``; ``cycle_index`` counts completed TrainCNN phases."""
    if phase is SchedulePhase.WARMUP:
        return SchedulePhase.TRAIN_AN
    if phase is SchedulePhase.TRAIN_AN:
        return SchedulePhase.TRAIN_CNN
    if phase is SchedulePhase.TRAIN_CNN:
        return SchedulePhase.TRAIN_AN if cycle_index < cycles else SchedulePhase.FINETUNE
    raise ValueError("Finetune is terminal")


@dataclass
class PruningConfig:
    lam: float = 0.0
    p: float = 0.5
    threshold_mode: str = "fixed"
    theta: float = 0.5
    warmup_epochs: int = 5
    cycles: int = 2
    an_epochs: int = 3
    cnn_epochs: int = 6
    finetune_epochs: int = 5
    flops_balance: bool = True
    batch_size: int = 64
    an_batch_size: int = 16
    an_lr: float = 1e-4
    an_betas: tuple[float, float] = (0.9, 0.999)
    # "sensitivity": divide each layer's AN learning rate by its pre-activation sensitivity.
    an_lr_scaling: str = "none"
    warmup_lr: float = 0.05
    # Warm-up learning rate is multiplied by lr_gamma from this epoch on (0 = never).
    warmup_step: int = 0
    lr_gamma: float = 0.1
    cnn_lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    finetune_lr: float = 0.005
    # Fine-tune learning rate is multiplied by lr_gamma from this epoch on (0 = never).
    finetune_step: int = 0
    activation: ActivationSpec = field(default_factory=ActivationSpec)

    def validate(self) -> list[str]:
        errs = []
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            errs.append(f"pruning.lambda: must be a finite value >= 0, got {self.lam}")
        if self.threshold_mode not in ("fixed", "quantile"):
            errs.append(f"pruning.threshold_mode: must be 'fixed' or 'quantile', got {self.threshold_mode!r}")
        if self.threshold_mode == "quantile" and not (0 < self.p <= 1):
            errs.append(f"pruning.p: keep-ratio budget must be in (0, 1] for quantile mode, got {self.p}")
        if self.threshold_mode == "fixed" and not (0 <= self.theta <= 1):
            errs.append(f"pruning.theta: must be in [0, 1], got {self.theta}")
        for name in ("an_epochs", "cnn_epochs"):
            if getattr(self, name) < 1:
                errs.append(f"pruning.{name}: must be >= 1")
        for name in ("warmup_epochs", "cycles", "finetune_epochs"):
            if getattr(self, name) < 0:
                errs.append(f"pruning.{name}: must be >= 0")
        if self.an_lr_scaling not in ("none", "sensitivity"):
            errs.append(f"pruning.an_lr_scaling: must be 'none' or 'sensitivity', got {self.an_lr_scaling!r}")
        if self.batch_size < 1 or self.an_batch_size < 1:
            errs.append("pruning.batch_size/an_batch_size: must be >= 1")
        if self.warmup_step < 0 or self.finetune_step < 0 or not (0 < self.lr_gamma <= 1):
            errs.append("pruning.warmup_step/finetune_step/lr_gamma: need steps >= 0 and 0 < lr_gamma <= 1")
        for name in ("an_lr", "warmup_lr", "cnn_lr", "finetune_lr"):
            if not getattr(self, name) > 0:
                errs.append(f"pruning.{name}: must be > 0")
        return errs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["an_betas"] = list(self.an_betas)
        return d


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------


def layer_weights(net: Network, flops_balance: bool) -> list[float]:
    """L1 weight per layer: spatial size relative to the last prunable layer, or all 1."""
    units = net.units
    if not flops_balance:
        return [1.0] * len(units)
    hl, wl = units[-1].bank.spatial_dims
    return [u.bank.spatial_dims[0] * u.bank.spatial_dims[1] / (hl * wl) for u in units]


def regularized_loss(logits: Tensor, labels, scores: Sequence, cfg: PruningConfig, net: Network) -> Tensor:
    """Cross-entropy plus ``lambda * sum_l w_l * ||S_l||_1``."""
    if len(scores) != net.L or any(s is None for s in scores):
        raise ConfigError(f"regularized_loss needs {net.L} score vectors, got {len(scores)}")
    loss = ops.cross_entropy(logits, labels)
    if cfg.lam == 0:
        return loss
    reg = None
    for w, s in zip(layer_weights(net, cfg.flops_balance), scores):
        term = ops.l1_norm(getattr(s, "analog", s)) * w
        reg = term if reg is None else reg + term
    return loss + reg * cfg.lam


# ----------------------------------------------------------------------------
# binarization
# ----------------------------------------------------------------------------


def _score_arrays(scores) -> list[np.ndarray]:
    out = []
    for s in scores:
        s = getattr(s, "analog", s)
        out.append(np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64))
    return out


def budget_count(p: float, total: int) -> int:
    """``ceil(p * total)`` evaluated exactly on the decimal value of ``p``."""
    return math.ceil(Fraction(str(p)) * total)


def binarize(scores: Sequence, cfg: PruningConfig) -> tuple[list[np.ndarray], float]:
    """0/1 keep masks per layer and the threshold used.

    Fixed mode keeps ``s >= theta``. Quantile mode keeps exactly
    ``ceil(p * sum F_l)`` filters, highest scores first; ties go to the lower
    ``(layer_index, filter_index)``. The reported threshold is the smallest
    kept score.
    """
    arrs = _score_arrays(scores)
    if not arrs:
        raise ValueError("binarize needs at least one score vector")
    if cfg.threshold_mode == "fixed":
        return [(a >= cfg.theta).astype(np.float64) for a in arrs], float(cfg.theta)
    total = sum(a.size for a in arrs)
    if not cfg.p * total >= 1:
        raise BudgetError(f"budget p * sum(F) = {cfg.p} * {total} < 1 would prune every filter")
    k = budget_count(cfg.p, total)
    pooled = np.concatenate(arrs)
    layer = np.concatenate([np.full(a.size, i) for i, a in enumerate(arrs)])
    pos = np.concatenate([np.arange(a.size) for a in arrs])
    order = np.lexsort((pos, layer, -pooled))
    keep = np.zeros(total, dtype=bool)
    keep[order[:k]] = True
    masks, start = [], 0
    for a in arrs:
        masks.append(keep[start : start + a.size].astype(np.float64))
        start += a.size
    return masks, float(pooled[order[k - 1]])


def top_k_masks(scores: Sequence, keep_counts: Sequence[int]) -> list[np.ndarray]:
    """Per-layer masks keeping the ``k_l`` highest scores (ties to lower index)."""
    out = []
    for a, k in zip(_score_arrays(scores), keep_counts):
        order = np.lexsort((np.arange(a.size), -a))
        m = np.zeros(a.size)
        m[order[:k]] = 1.0
        out.append(m)
    return out


# ----------------------------------------------------------------------------
# extraction
# ----------------------------------------------------------------------------


def _slice_norm(norm, idx):
    norm.gamma = Tensor(norm.gamma.data[idx], requires_grad=True)
    norm.beta = Tensor(norm.beta.data[idx], requires_grad=True)
    norm.running_mean = norm.running_mean[idx].copy()
    norm.running_var = norm.running_var[idx].copy()


def extract(net: Network, masks: Sequence) -> Network:
    """Physically smaller copy of ``net`` keeping the filters whose mask is 1.

    Layers whose output feeds only the next conv (or the classifier) lose the
    dropped filters, and the consumer loses the matching input channels.
    Layers writing into a residual stream keep their shape; dropped filters
    get zero weights and zero normalization scale/shift, so they output
    exactly zero. A block whose first conv keeps no filters becomes an
    identity pass plus a constant per-channel offset.
    """
    units = net.units
    if len(masks) != len(units):
        raise StructureError(f"expected {len(units)} masks, got {len(masks)}")
    keeps = []
    for u, m in zip(units, masks):
        m = np.asarray(m)
        if m.shape != (u.bank.F,):
            raise StructureError(f"layer {u.layer_index}: mask shape {m.shape} does not match F={u.bank.F}")
        if not np.all((m == 0) | (m == 1)):
            raise StructureError(f"layer {u.layer_index}: mask must be 0/1")
        keeps.append(m.astype(bool))

    new = copy.deepcopy(net)
    new_units = new.units
    consumers: dict[int, list] = {}
    for l, fd in enumerate(new.feeders()):
        if fd is not None and new_units[fd].structural:
            consumers.setdefault(fd, []).append(new_units[l])
    if not new.blocks and new_units[-1].structural:
        consumers.setdefault(len(new_units) - 1, []).append("head")

    for l, u in enumerate(new_units):
        keep = keeps[l]
        if u.structural:
            idx = np.flatnonzero(keep)
            u.bank.weights = Tensor(u.bank.weights.data[idx], requires_grad=True)
            _slice_norm(u.norm, idx)
            for c in consumers.get(l, []):
                if c == "head":
                    new.head_weight = Tensor(new.head_weight.data[:, idx], requires_grad=True)
                else:
                    c.bank.weights = Tensor(c.bank.weights.data[:, idx], requires_grad=True)
        else:
            drop = ~keep
            w = u.bank.weights.data.copy()
            w[drop] = 0.0
            u.bank.weights = Tensor(w, requires_grad=True)
            g, b = u.norm.gamma.data.copy(), u.norm.beta.data.copy()
            g[drop] = 0.0
            b[drop] = 0.0
            u.norm.gamma = Tensor(g, requires_grad=True)
            u.norm.beta = Tensor(b, requires_grad=True)
    return new


# ----------------------------------------------------------------------------
# budget report
# ----------------------------------------------------------------------------


@dataclass
class BudgetReport:
    layers: list[dict]
    threshold: float
    flops_before: FlopsAccount
    flops_after: FlopsAccount
    flops_structural: FlopsAccount
    keep_ratio: float

    @classmethod
    def build(cls, net: Network, masks: Sequence, threshold: float, extracted: Network | None = None) -> "BudgetReport":
        surv = [int(np.sum(m)) for m in masks]
        layers = []
        for u, s in zip(net.units, surv):
            layers.append({
                "layer_index": u.layer_index,
                "F_original": u.bank.F,
                "F_surviving": s,
                "structural": u.structural,
                "layer_removed": s == 0,
            })
        total = sum(u.bank.F for u in net.units)
        return cls(
            layers, float(threshold), cnn.count(net), cnn.count(net, surv),
            cnn.count_physical(extracted if extracted is not None else extract(net, masks)),
            sum(surv) / total if total else 0.0,
        )

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "layers": self.layers,
            "threshold": self.threshold,
            "flops_before": self.flops_before.to_dict(),
            "flops_after": self.flops_after.to_dict(),
            "flops_structural": self.flops_structural.to_dict(),
            "keep_ratio": self.keep_ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetReport":
        def acc(x):
            return FlopsAccount(list(x["params"]), list(x["flops"]))

        return cls(list(d["layers"]), float(d["threshold"]), acc(d["flops_before"]), acc(d["flops_after"]),
                   acc(d["flops_structural"]), float(d["keep_ratio"]))


# ----------------------------------------------------------------------------
# history
# ----------------------------------------------------------------------------

HISTORY_FIELDS = ["epoch", "phase", "cycle", "loss", "accuracy", "keep_ratio", "mean_score",
                  "frac_scores_near_0", "frac_scores_near_1", "threshold"]


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)

    def enter(self, phase: SchedulePhase) -> None:
        self.phases.append(phase.value)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
        return buf.getvalue()


def score_stats(arrs: Sequence[np.ndarray]) -> dict:
    pooled = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrs]) if arrs else np.zeros(0)
    if pooled.size == 0:
        return {"mean_score": 0.0, "frac_scores_near_0": 0.0, "frac_scores_near_1": 0.0}
    return {
        "mean_score": float(pooled.mean()),
        "frac_scores_near_0": float(np.mean(pooled < 0.1)),
        "frac_scores_near_1": float(np.mean(np.abs(pooled - 1.0) < 0.1)),
    }


# ----------------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------------


def compute_scores(net: Network, an_list, act: ActivationSpec) -> list[ScoreVector]:
    return [score(u.bank.weights, an, act) for u, an in zip(net.units, an_list)]


def analog_scores(net: Network, an_list, act: ActivationSpec) -> list[np.ndarray]:
    with no_grad():
        return [s.values.copy() for s in compute_scores(net, an_list, act)]


def an_parameters(an_list) -> list[Tensor]:
    return [p for an in an_list for p in an.parameters()]


def an_lr_scales(net: Network, an_list) -> list[float]:
    """Per-parameter learning-rate multipliers ``1 / sensitivity`` of the owning layer."""
    out = []
    for u, an in zip(net.units, an_list):
        sens = sensitivity(u.bank.weights, an)
        out += [1.0 / sens if sens > 0 else 1.0] * len(an.parameters())
    return out


def _set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
        p.grad = None


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, scores=None, score_mode: str = "off",
             threshold: float = 0.5, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy on ``(x, y)``."""
    logits = cnn.predict(net, x, batch_size, scores=scores, score_mode=score_mode, threshold=threshold)
    with no_grad():
        loss = ops.cross_entropy(Tensor(logits), y).item()
    return loss, float(np.mean(logits.argmax(axis=1) == y))


def _check_finite(loss: Tensor, phase: SchedulePhase, scores, lrs: dict) -> None:
    if not np.isfinite(loss.data).all():
        stats = score_stats(scores) if scores else {}
        raise TrainingDivergence(
            f"non-finite loss {loss.item()} in phase {phase.value}; score stats {stats}; learning rates {lrs}"
        )


def _train_cnn_epoch(net, data: Dataset, opt: SGD, rng, cfg: PruningConfig, masks, phase, after_step=None) -> float:
    mode = "off" if masks is None else "binary"
    total, n = 0.0, 0
    for xb, yb in data.batches(cfg.batch_size, rng):
        opt.zero_grad()
        logits = cnn.forward(net, xb, masks, mode, train=True)
        loss = ops.cross_entropy(logits, yb)
        _check_finite(loss, phase, masks, {"cnn": opt.lr})
        loss.backward()
        opt.step()
        if after_step is not None:
            after_step()
        total += loss.item() * len(yb)
        n += len(yb)
    return total / max(n, 1)


def _train_an_epoch(net, an_list, data: Dataset, opt: Adam, rng, cfg: PruningConfig) -> float:
    total, n = 0.0, 0
    for xb, yb in data.batches(cfg.an_batch_size, rng):
        opt.zero_grad()
        scores = compute_scores(net, an_list, cfg.activation)
        logits = cnn.forward(net, xb, scores, "analog", train=False)
        loss = regularized_loss(logits, yb, scores, cfg, net)
        _check_finite(loss, SchedulePhase.TRAIN_AN, [s.values for s in scores], {"an": opt.lr})
        loss.backward()
        opt.step()
        total += loss.item() * len(yb)
        n += len(yb)
    return total / max(n, 1)


class Trainer:
    """Stateful driver of the alternating schedule on one network."""

    def __init__(self, net: Network, an_list, data: Dataset, cfg: PruningConfig, rng: np.random.Generator,
                 history: History | None = None):
        self.net = net
        self.an_list = list(an_list)
        self.data = data
        self.cfg = cfg
        self.rng = rng
        self.history = history if history is not None else History()
        self.epoch = 0
        self.masks: list[np.ndarray] | None = None
        self.threshold = cfg.theta if cfg.threshold_mode == "fixed" else float("nan")
        self.phase: SchedulePhase | None = None
        # One optimizer per parameter set for the whole run; moments carry across cycles.
        self.an_opt = Adam(an_parameters(self.an_list), cfg.an_lr, cfg.an_betas)
        self.cnn_opt = SGD(net.parameters(), cfg.warmup_lr, cfg.momentum, cfg.weight_decay)

    def _record(self, phase: SchedulePhase, cycle: int, loss: float, acc: float, scores, keep_ratio: float):
        row = {"epoch": self.epoch, "phase": phase.value, "cycle": cycle, "loss": loss, "accuracy": acc,
               "keep_ratio": keep_ratio, "threshold": self.threshold}
        row.update(score_stats(scores))
        self.history.rows.append(row)
        log.info("epoch %d %s cycle %d loss %.4f acc %.4f keep %.3f", self.epoch, phase.value, cycle, loss, acc,
                 keep_ratio)
        self.epoch += 1

    def _keep_ratio(self, scores) -> float:
        masks, _ = binarize(scores, self.cfg)
        return float(sum(m.sum() for m in masks) / sum(m.size for m in masks))

    def _enter(self, phase: SchedulePhase) -> None:
        self.phase = phase
        self.history.enter(phase)

    def warmup(self) -> None:
        cfg = self.cfg
        self._enter(SchedulePhase.WARMUP)
        if cfg.warmup_epochs == 0:
            return
        _set_trainable(an_parameters(self.an_list), False)
        _set_trainable(self.net.parameters(), True)
        opt = self.cnn_opt
        for e in range(cfg.warmup_epochs):
            opt.lr = cfg.warmup_lr * (cfg.lr_gamma if cfg.warmup_step and e >= cfg.warmup_step else 1.0)
            loss = _train_cnn_epoch(self.net, self.data, opt, self.rng, cfg, None, SchedulePhase.WARMUP)
            _, acc = evaluate(self.net, self.data.x_val, self.data.y_val)
            scores = analog_scores(self.net, self.an_list, cfg.activation)
            self._record(SchedulePhase.WARMUP, 0, loss, acc, scores, 1.0)

    def train_an(self, cycle: int) -> None:
        cfg = self.cfg
        self._enter(SchedulePhase.TRAIN_AN)
        _set_trainable(self.net.parameters(), False)
        _set_trainable(an_parameters(self.an_list), True)
        opt = self.an_opt
        if cfg.an_lr_scaling == "sensitivity":
            opt.scales = an_lr_scales(self.net, self.an_list)
        for _ in range(cfg.an_epochs):
            loss = _train_an_epoch(self.net, self.an_list, self.data, opt, self.rng, cfg)
            scores = analog_scores(self.net, self.an_list, cfg.activation)
            _, acc = evaluate(self.net, self.data.x_val, self.data.y_val, scores, "analog")
            self._record(SchedulePhase.TRAIN_AN, cycle, loss, acc, scores, self._keep_ratio(scores))
        _set_trainable(an_parameters(self.an_list), False)

    def train_cnn(self, cycle: int) -> None:
        cfg = self.cfg
        self._enter(SchedulePhase.TRAIN_CNN)
        scores = analog_scores(self.net, self.an_list, cfg.activation)
        self.masks, self.threshold = binarize(scores, cfg)
        keep = float(sum(m.sum() for m in self.masks) / sum(m.size for m in self.masks))
        _set_trainable(self.net.parameters(), True)
        opt = self.cnn_opt
        opt.lr = cfg.cnn_lr
        for _ in range(cfg.cnn_epochs):
            loss = _train_cnn_epoch(self.net, self.data, opt, self.rng, cfg, self.masks, SchedulePhase.TRAIN_CNN)
            _, acc = evaluate(self.net, self.data.x_val, self.data.y_val, self.masks, "binary")
            self._record(SchedulePhase.TRAIN_CNN, cycle, loss, acc, scores, keep)

    def run_cycles(self) -> None:
        phase = SchedulePhase.WARMUP
        self.warmup()
        done = 0
        while True:
            phase = next_phase(phase, done, self.cfg.cycles)
            if phase is SchedulePhase.FINETUNE:
                break
            if phase is SchedulePhase.TRAIN_AN:
                if self.cfg.cycles == 0:
                    break
                self.train_an(done + 1)
            else:
                self.train_cnn(done + 1)
                done += 1

    def final_masks(self, cfg: PruningConfig | None = None) -> tuple[list[np.ndarray], float, list[np.ndarray]]:
        cfg = cfg or self.cfg
        scores = analog_scores(self.net, self.an_list, cfg.activation)
        masks, threshold = binarize(scores, cfg)
        return masks, threshold, scores

    def finetune(self, masks, threshold: float, cfg: PruningConfig | None = None) -> tuple[Network, BudgetReport]:
        cfg = cfg or self.cfg
        self._enter(SchedulePhase.FINETUNE)
        self.threshold = threshold
        pruned = extract(self.net, masks)
        report = BudgetReport.build(self.net, masks, threshold, pruned)
        _set_trainable(pruned.parameters(), True)
        opt = SGD(pruned.parameters(), cfg.finetune_lr, cfg.momentum, cfg.weight_decay)
        # Filters masked inside a residual stream stay at zero while fine-tuning.
        frozen_zero = _stream_zero_masks(pruned, masks)
        scores = [np.asarray(m) for m in masks]
        for e in range(cfg.finetune_epochs):
            opt.lr = cfg.finetune_lr * (cfg.lr_gamma if cfg.finetune_step and e >= cfg.finetune_step else 1.0)
            loss = _train_cnn_epoch(pruned, self.data, opt, self.rng, cfg, None, SchedulePhase.FINETUNE,
                                    after_step=lambda: _apply_zero_masks(pruned, frozen_zero))
            _, acc = evaluate(pruned, self.data.x_val, self.data.y_val)
            self._record(SchedulePhase.FINETUNE, cfg.cycles, loss, acc, scores, report.keep_ratio)
        return pruned, report


def _stream_zero_masks(pruned: Network, masks) -> list[tuple[object, np.ndarray]]:
    return [(u, ~np.asarray(m, dtype=bool)) for u, m in zip(pruned.units, masks) if not u.structural]


def _apply_zero_masks(pruned: Network, zero_masks) -> None:
    for u, drop in zero_masks:
        if drop.any():
            u.bank.weights.data[drop] = 0.0
            u.norm.gamma.data[drop] = 0.0
            u.norm.beta.data[drop] = 0.0


def run_schedule(net: Network, an_list, data: Dataset, cfg: PruningConfig, rng: np.random.Generator,
                 history: History | None = None):
    """Warm-up, ``cfg.cycles`` AN/CNN cycles, extraction and fine-tuning.

    ``net`` and ``an_list`` are trained in place (``net`` ends as the dense,
    masked-trained network). Returns ``(pruned_net, an_list, report, history)``.
    """
    errs = cfg.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    trainer = Trainer(net, an_list, data, cfg, rng, history)
    trainer.run_cycles()
    masks, threshold, _ = trainer.final_masks()
    pruned, report = trainer.finetune(masks, threshold)
    return pruned, trainer.an_list, report, trainer.history
