"""YAML run configuration with field-level validation, plus builders.

Every section is optional; omitted fields take the defaults shown in
``docs/config.md``. Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import cnn, scoring
from .data import Dataset, DatasetSpec, load_dataset
from .pruning import ConfigError, PruningConfig
from .scoring import ActivationSpec

ATTENTION_VARIANTS = ("vanilla", "kq")
ALPHA_POLICIES = ("none", "block")


@dataclass
class AttentionConfig:
    variant: str = "vanilla"
    hidden_divisor: int = 1
    alpha: float = 1.0
    # "block": alpha of every layer = sqrt(F) of the last conv of its block.
    alpha_policy: str = "none"


@dataclass
class AnalysisConfig:
    histogram_bins: int = 20
    delta_min: float = 1e-3
    oracle_guard: int = 100_000
    probe_samples: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    precision: str = "float64"
    output_dir: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    architecture: dict = field(default_factory=lambda: {"kind": "resnet", "widths": [8, 16, 32],
                                                        "blocks_per_stage": 1, "shortcut": "pad"})
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "deterministic": self.deterministic,
            "precision": self.precision,
            "output_dir": self.output_dir,
            "dataset": dataclasses.asdict(self.dataset),
            "architecture": dict(self.architecture),
            "attention": dataclasses.asdict(self.attention),
            "analysis": dataclasses.asdict(self.analysis),
        }
        d["dataset"]["image_dims"] = list(self.dataset.image_dims)
        p = self.pruning.to_dict()
        d["activation"] = p.pop("activation")
        d["pruning"] = p
        return d

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def validate(self) -> list[str]:
        errs = []
        if self.precision not in ("float64", "float32"):
            errs.append(f"precision: must be float64 or float32, got {self.precision!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errs.append(f"seed: must be a non-negative integer, got {self.seed!r}")
        errs += self.dataset.validate()
        errs += _validate_arch(self.architecture, self.dataset)
        a = self.attention
        if a.variant not in ATTENTION_VARIANTS:
            errs.append(f"attention.variant: must be one of {ATTENTION_VARIANTS}, got {a.variant!r}")
        if a.hidden_divisor < 1:
            errs.append("attention.hidden_divisor: must be >= 1")
        if not a.alpha > 0:
            errs.append(f"attention.alpha: must be > 0, got {a.alpha}")
        if a.alpha_policy not in ALPHA_POLICIES:
            errs.append(f"attention.alpha_policy: must be one of {ALPHA_POLICIES}, got {a.alpha_policy!r}")
        errs += self.pruning.validate()
        if self.pruning.threshold_mode == "quantile" and 0 < self.pruning.p <= 1:
            total = sum(self.architecture_filter_counts())
            if self.pruning.p * total < 1:
                errs.append(f"pruning.p: budget p * sum(F) = {self.pruning.p} * {total} keeps no filter")
        an = self.analysis
        if an.histogram_bins < 2:
            errs.append("analysis.histogram_bins: must be >= 2")
        if not an.delta_min > 0:
            errs.append("analysis.delta_min: must be > 0")
        if an.oracle_guard < 1 or an.probe_samples < 1:
            errs.append("analysis.oracle_guard/probe_samples: must be >= 1")
        return errs

    def architecture_filter_counts(self) -> list[int]:
        try:
            net = cnn.build_network(self.architecture, self.dataset.image_dims, max(self.dataset.num_classes, 1),
                                    np.random.default_rng(0))
        except Exception:
            return []
        return [u.bank.F for u in net.units]


def _validate_arch(arch: dict, ds: DatasetSpec) -> list[str]:
    errs = []
    kind = arch.get("kind", "resnet")
    if kind not in ("resnet", "plain"):
        return [f"architecture.kind: must be 'resnet' or 'plain', got {kind!r}"]
    allowed = {"kind", "widths", "blocks_per_stage", "shortcut", "kernel", "norm_momentum"}
    for k in sorted(set(arch) - allowed):
        errs.append(f"architecture.{k}: unknown field")
    widths = arch.get("widths", [8, 16, 32])
    if not isinstance(widths, list) or not widths or not all(isinstance(w, int) and w >= 1 for w in widths):
        errs.append(f"architecture.widths: must be a non-empty list of positive ints, got {widths!r}")
    if kind == "resnet":
        if arch.get("shortcut", "pad") not in ("pad", "projection"):
            errs.append("architecture.shortcut: must be 'pad' or 'projection'")
        if int(arch.get("blocks_per_stage", 1)) < 1:
            errs.append("architecture.blocks_per_stage: must be >= 1")
    k = arch.get("kernel", 3)
    if not isinstance(k, int) or k < 1 or k % 2 == 0:
        errs.append("architecture.kernel: must be a positive odd int")
    elif len(ds.image_dims) == 3 and min(ds.image_dims[1:]) < 1:
        errs.append("dataset.image_dims: spatial dims must be >= 1")
    return errs


# ----------------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------------


def _fill(cls, data, section: str, errs: list[str], renames: dict | None = None):
    renames = renames or {}
    if data is None:
        return cls()
    if not isinstance(data, dict):
        errs.append(f"{section}: must be a mapping")
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        name = renames.get(key, key)
        if name not in names or name == "activation":
            errs.append(f"{section}.{key}: unknown field")
            continue
        default = getattr(cls(), name)
        val = _coerce(val, default, f"{section}.{key}", errs)
        kwargs[name] = val
    return cls(**kwargs)


def _coerce(val, default, where: str, errs: list[str]):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            errs.append(f"{where}: expected true/false, got {val!r}")
            return default
        return val
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(val, bool) or not isinstance(val, int):
            errs.append(f"{where}: expected an integer, got {val!r}")
            return default
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            errs.append(f"{where}: expected a number, got {val!r}")
            return default
        return float(val)
    if isinstance(default, tuple):
        if not isinstance(val, (list, tuple)) or len(val) != len(default):
            errs.append(f"{where}: expected a list of {len(default)} values, got {val!r}")
            return default
        return tuple(val)
    if isinstance(default, str) or default is None:
        if val is not None and not isinstance(val, str):
            errs.append(f"{where}: expected a string, got {val!r}")
            return default
        return val
    return val


TOP_LEVEL = {"seed", "deterministic", "precision", "output_dir", "dataset", "architecture", "attention",
             "activation", "pruning", "analysis"}


def parse_config(data: dict) -> RunConfig:
    """Build and validate a :class:`RunConfig`; raises ConfigError listing every bad field."""
    errs: list[str] = []
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    for k in sorted(set(data) - TOP_LEVEL):
        errs.append(f"{k}: unknown field")
    cfg = RunConfig()
    for key in ("seed", "deterministic", "precision", "output_dir"):
        if key in data:
            setattr(cfg, key, _coerce(data[key], getattr(cfg, key), key, errs))
    cfg.dataset = _fill(DatasetSpec, data.get("dataset"), "dataset", errs)
    if isinstance(cfg.dataset.image_dims, list):
        cfg.dataset.image_dims = tuple(cfg.dataset.image_dims)
    arch = data.get("architecture")
    if arch is not None:
        if isinstance(arch, dict):
            cfg.architecture = {**cfg.architecture, **arch}
            if arch.get("kind") == "plain":
                cfg.architecture = {k: v for k, v in cfg.architecture.items()
                                    if k not in ("blocks_per_stage", "shortcut")}
        else:
            errs.append("architecture: must be a mapping")
    cfg.attention = _fill(AttentionConfig, data.get("attention"), "attention", errs)
    cfg.analysis = _fill(AnalysisConfig, data.get("analysis"), "analysis", errs)
    cfg.pruning = _fill(PruningConfig, data.get("pruning"), "pruning", errs, {"lambda": "lam"})
    act = data.get("activation")
    if act is not None:
        if not isinstance(act, dict):
            errs.append("activation: must be a mapping")
        else:
            bad = set(act) - {"kind", "a", "b"}
            for k in sorted(bad):
                errs.append(f"activation.{k}: unknown field")
            try:
                cfg.pruning.activation = ActivationSpec(
                    str(act.get("kind", "leaky_expo")), float(act.get("a", 0.01)), float(act.get("b", 100.0)))
            except (TypeError, ValueError) as e:
                errs.append(f"activation: {e}")
    errs += cfg.validate()
    if errs:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errs))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# ----------------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------------


def build_attention(net: cnn.Network, att: AttentionConfig, rng: np.random.Generator) -> list:
    alphas = layer_alphas(net, att)
    return [
        scoring.init_attention(att.variant, u.bank.weights.shape, rng, u.layer_index, att.hidden_divisor, a)
        for u, a in zip(net.units, alphas)
    ]


def layer_alphas(net: cnn.Network, att: AttentionConfig) -> list[float]:
    if att.alpha_policy == "none":
        return [att.alpha] * net.L
    out = [scoring.block_alpha(u.bank.F) for u in [net.stem, *net.plain]]
    for b in net.blocks:
        a = scoring.block_alpha(b.conv2.bank.F)
        out += [a, a]
    return out


def build_run(cfg: RunConfig) -> tuple[Dataset, cnn.Network, list, np.random.Generator]:
    """Dataset, freshly initialized network and attention networks, and the run RNG.

    The RNG is seeded from ``cfg.seed`` and has already been used for the
    initialization, so passing it on to a Trainer reproduces a CLI run.
    """
    data = load_dataset(cfg.dataset)
    rng = np.random.default_rng(cfg.seed)
    net = cnn.build_network(cfg.architecture, cfg.dataset.image_dims, cfg.dataset.num_classes, rng)
    return data, net, build_attention(net, cfg.attention, rng), rng
