"""Command-line entry point.

Exit codes: 0 success, 1 runtime or I/O error, 2 invalid configuration or
arguments, 3 training divergence, 4 unsupported checkpoint format version.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, checkpoint, cnn, pruning
from ._kernels import BACKEND
from .checkpoint import Checkpoint, CheckpointError, CheckpointVersionError
from .config import RunConfig, build_attention, build_run, load_config
from .data import DataFormatError, load_dataset
from .pruning import ConfigError, TrainingDivergence
from .tensor import set_default_dtype

log = logging.getLogger("paam")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERSION = 0, 1, 2, 3, 4
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(out: Path, name: str, text: str, outputs: dict) -> None:
    analysis.atomic_write_text(out / name, text)
    outputs[name.split(".")[0]] = name


def _timestamp(deterministic: bool) -> str | None:
    # Deterministic runs take time from SOURCE_DATE_EPOCH (or omit it) so outputs stay byte-identical.
    if deterministic:
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        if epoch is None:
            return None
        return _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc).isoformat()
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


@contextlib.contextmanager
def _thread_limit(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _resolve(args) -> RunConfig:
    if args.config is None:
        raise UsageError("--config PATH is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    set_default_dtype(np.float32 if cfg.precision == "float32" else np.float64)
    return cfg


def _out_dir(args, cfg: RunConfig | None) -> Path:
    out = args.out or (cfg.output_dir if cfg is not None else None)
    if out is None:
        raise UsageError("--out DIR is required (or set output_dir in the config)")
    return Path(out)


def _load_checkpoint(args) -> Checkpoint:
    if args.checkpoint is None:
        raise UsageError("--checkpoint PATH is required for this command")
    return checkpoint.load(args.checkpoint)


def _manifest(command: str, cfg: RunConfig | None, outputs: dict, started: str | None, extra=None) -> dict:
    m = {
        "format_version": MANIFEST_VERSION,
        "checkpoint_format_version": checkpoint.FORMAT_VERSION,
        "package_version": __version__,
        "kernel_backend": BACKEND,
        "command": command,
        "config": cfg.to_dict() if cfg is not None else None,
        "config_sha256": cfg.content_hash() if cfg is not None else None,
        "seeds": {"seed": cfg.seed, "split_seed": cfg.dataset.split_seed} if cfg is not None else None,
        "deterministic": bool(cfg.deterministic) if cfg is not None else False,
        "started_at": started,
        "finished_at": _timestamp(bool(cfg and cfg.deterministic)),
        "outputs": dict(sorted(outputs.items())),
    }
    if extra:
        m.update(extra)
    return m


def _scores_of(ck: Checkpoint) -> list[np.ndarray]:
    if ck.attention is not None:
        return pruning.analog_scores(ck.net, ck.attention, ck.activation)
    if ck.scores is not None:
        return [np.asarray(s, dtype=np.float64) for s in ck.scores]
    raise UsageError("checkpoint holds neither attention networks nor scores")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_init(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    started = _timestamp(cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    net = cnn.build_network(cfg.architecture, cfg.dataset.image_dims, cfg.dataset.num_classes, rng)
    an = build_attention(net, cfg.attention, rng)
    scores = pruning.analog_scores(net, an, cfg.pruning.activation)
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    checkpoint.save(Checkpoint(net, an, scores, "Warmup", 0, cfg.pruning.activation, cfg.to_dict()),
                    out / "checkpoint.paam")
    outputs["checkpoint"] = "checkpoint.paam"
    _write(out, "manifest.json", _json(_manifest("init", cfg, outputs, started)), outputs)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    started = _timestamp(cfg.deterministic)
    data, net, an, rng = build_run(cfg)
    pc = cfg.pruning
    trainer = pruning.Trainer(net, an, data, pc, rng)
    with _thread_limit(cfg.deterministic):
        trainer.run_cycles()
        masks, threshold, scores = trainer.final_masks()
        pruned, report = trainer.finetune(masks, threshold)
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    act = pc.activation
    last = "TrainCNN" if pc.cycles else "Warmup"
    checkpoint.save(Checkpoint(net, an, scores, last, pc.cycles, act, cfg.to_dict()), out / "checkpoint.paam")
    outputs["checkpoint"] = "checkpoint.paam"
    checkpoint.save(Checkpoint(pruned, None, masks, "Finetune", pc.cycles, act, cfg.to_dict(),
                               {"threshold": threshold}), out / "pruned.paam")
    outputs["pruned"] = "pruned.paam"
    _write(out, "history.csv", trainer.history.to_csv(), outputs)
    _write(out, "budget.json", report.to_json() + "\n", outputs)
    analysis.emit_budget_data(report, out / "budget.csv")
    outputs["budget_csv"] = "budget.csv"
    hist = analysis.histogram(scores, cfg.analysis.histogram_bins)
    _write(out, "histogram.csv", hist.to_csv(), outputs)
    extra = {"phases": trainer.history.phases, "keep_ratio": report.keep_ratio, "bimodality": hist.bimodality}
    _write(out, "manifest.json", _json(_manifest("train", cfg, outputs, started, extra)), outputs)
    print(f"keep_ratio {report.keep_ratio:.4f} threshold {threshold:.4f} bimodality {hist.bimodality:.4f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _resolve(args)
    ck = _load_checkpoint(args)
    if ck.attention is None:
        raise UsageError(f"{args.checkpoint}: no attention networks to score filters with")
    out = _out_dir(args, cfg)
    started = _timestamp(cfg.deterministic)
    data = load_dataset(cfg.dataset)
    rng = np.random.default_rng(cfg.seed)
    pc = cfg.pruning
    pc.activation = ck.activation
    trainer = pruning.Trainer(ck.net, ck.attention, data, pc, rng)
    with _thread_limit(cfg.deterministic):
        masks, threshold, _ = trainer.final_masks()
        pruned, report = trainer.finetune(masks, threshold)
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    checkpoint.save(Checkpoint(pruned, None, masks, "Finetune", ck.cycle, ck.activation, cfg.to_dict(),
                               {"threshold": threshold}), out / "pruned.paam")
    outputs["pruned"] = "pruned.paam"
    _write(out, "budget.json", report.to_json() + "\n", outputs)
    analysis.emit_budget_data(report, out / "budget.csv")
    outputs["budget_csv"] = "budget.csv"
    if trainer.history.rows:
        _write(out, "history.csv", trainer.history.to_csv(), outputs)
    _write(out, "manifest.json", _json(_manifest("prune", cfg, outputs, started)), outputs)
    print(f"keep_ratio {report.keep_ratio:.4f} threshold {threshold:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ck = _load_checkpoint(args)
    data = load_dataset(cfg.dataset)
    out = Path(args.out) if args.out else None
    loss, acc = pruning.evaluate(ck.net, data.x_val, data.y_val)
    result = {"accuracy": acc, "loss": loss, "checkpoint": str(args.checkpoint), "samples": int(len(data.y_val))}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        analysis.atomic_write_text(out / "eval.json", _json(result))
    print(f"accuracy {acc:.6f} loss {loss:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    ck = _load_checkpoint(args)
    cfg = _resolve(args) if args.config else None
    out = _out_dir(args, cfg)
    bins = cfg.analysis.histogram_bins if cfg else 20
    delta_min = cfg.analysis.delta_min if cfg else 1e-3
    n_probe = cfg.analysis.probe_samples if cfg else 8
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    scores = _scores_of(ck)
    hist = analysis.histogram(scores, bins)
    probe = np.random.default_rng(seed).normal(size=(n_probe,) + tuple(ck.net.input_dims))
    bounds = []
    if ck.net.blocks:
        for m in analysis.check_network(ck.net, probe, scores, delta_min):
            bounds.append({
                "block_index": m.block_index, "ratio_unscored": m.ratio_unscored, "ratio_scored": m.ratio_scored,
                "delta": m.delta, "eps_bound": m.eps_bound, "below_delta_min": m.below_delta_min,
                "holds_stated": m.holds_stated, "holds_squared": m.holds_squared,
            })
    pooled = np.concatenate(scores) if scores else np.zeros(0)
    report = {
        "num_scores": int(pooled.size),
        "all_scores_one": bool(pooled.size and np.all(pooled == 1.0)),
        "min_score": float(pooled.min()) if pooled.size else None,
        "max_score": float(pooled.max()) if pooled.size else None,
        "bimodality": hist.bimodality,
        "near_one_mode": hist.near_one_mode,
        "refinement_bounds": bounds,
    }
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    _write(out, "histogram.csv", hist.to_csv(), outputs)
    _write(out, "analysis.json", _json(report), outputs)
    print(f"scores {report['num_scores']} all_one {report['all_scores_one']} bimodality {hist.bimodality:.4f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _resolve(args)
    ck = _load_checkpoint(args)
    if not args.keep:
        raise UsageError("--keep k1,k2,... is required for the oracle")
    try:
        keep = [int(k) for k in args.keep.split(",")]
    except ValueError:
        raise UsageError(f"--keep: expected comma-separated integers, got {args.keep!r}") from None
    sizes = [u.bank.F for u in ck.net.units]
    if len(keep) != len(sizes):
        raise UsageError(f"--keep: network has {len(sizes)} prunable layers, got {len(keep)} counts")
    total = analysis.combination_count(sizes, keep)
    if total > cfg.analysis.oracle_guard:
        raise UsageError(f"{total} mask combinations exceed the guard of {cfg.analysis.oracle_guard}")
    out = _out_dir(args, cfg)
    data = load_dataset(cfg.dataset)
    scores = _scores_of(ck)
    chosen = pruning.top_k_masks(scores, keep)
    _, table = analysis.brute_force_best_subnet(ck.net, data.x_val, data.y_val, keep, cfg.analysis.oracle_guard)
    mine = analysis.kept_indices(chosen)
    loss = table.loss_of(mine)
    best_kept, best_loss = min(table.rows, key=lambda r: (r[1], r[0]))
    report = {
        "keep_counts": keep,
        "combinations": len(table),
        "selected": [list(k) for k in mine],
        "selected_loss": loss,
        "percentile": table.percentile(loss),
        "best": [list(k) for k in best_kept],
        "best_loss": best_loss,
    }
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    _write(out, "oracle.csv", table.to_csv(), outputs)
    _write(out, "oracle.json", _json(report), outputs)
    print(f"combinations {len(table)} percentile {report['percentile']:.1f}")
    return EXIT_OK


COMMANDS = {
    "init": cmd_init, "train": cmd_train, "prune": cmd_prune, "eval": cmd_eval,
    "analyze": cmd_analyze, "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible outputs")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    ck = argparse.ArgumentParser(add_help=False)
    ck.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")

    p = argparse.ArgumentParser(prog="paam", description="Filter pruning with attention-learned scores.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("init", parents=[common], help="write a freshly initialized checkpoint")
    sub.add_parser("train", parents=[common], help="warm-up, alternating score/CNN training, prune, fine-tune")
    sub.add_parser("prune", parents=[common, ck], help="binarize a checkpoint's scores, extract and fine-tune")
    sub.add_parser("eval", parents=[common, ck], help="validation accuracy of a checkpoint")
    sub.add_parser("analyze", parents=[common, ck], help="score histogram and refinement-bound report")
    o = sub.add_parser("oracle", parents=[common, ck], help="exhaustive mask ranking on a tiny network")
    o.add_argument("--keep", metavar="K1,K2,...", help="filters to keep per prunable layer")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"paam {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as e:
        print(f"paam {args.command}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointVersionError as e:
        print(f"paam {args.command}: {e}", file=sys.stderr)
        return EXIT_VERSION
    except (CheckpointError, DataFormatError, analysis.OracleGuardError, OSError, ValueError) as e:
        print(f"paam {args.command}: {e}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        set_default_dtype(np.float64)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
