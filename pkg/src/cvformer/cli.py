"""Command-line entry point: ``cvformer <command> [flags]``.

Exit codes: 0 on success, 1 when a check fails (gradcheck), 2 on bad
input (config errors, missing or malformed files).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, write_run_config
from .gradcheck import run_suite
from .ingest import ConfigError, Dataset, gen_synth, load_dataset, read_manifest
from .model import CvFormer, ModelConfig, count_attention_macs
from .training import (
    evaluate, finetune, init_head, pretrain, write_finetune_log, write_pretrain_log,
)

# settings that fix tensor shapes; taken from the checkpoint when --init is given
ARCH_FIELDS = ("M", "P", "d_model", "num_heads", "r", "L", "num_classes", "fusion_every", "weighted_conn")
DEFAULT_COUNTS = "8,16,32,64"


def _add_run_flags(p: argparse.ArgumentParser, *, lam: bool = True, out: bool = True) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--manifest", help="dataset manifest path")
    if out:
        p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="training and initialisation seed")
    if lam:
        p.add_argument("--lambda", dest="lam", type=float, help="weight of the contrastive term")
    views = p.add_mutually_exclusive_group()
    views.add_argument("--no-cross-view", action="store_true", help="both views, no cross-view fusion")
    views.add_argument("--roi-only", action="store_true", help="RoI view alone")
    views.add_argument("--conn-only", action="store_true", help="connectivity view alone")
    p.add_argument("--init", help="checkpoint to initialise from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvformer", description="Cross-view transformer for brain networks")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic two-class dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=200)
    p.add_argument("--rois", type=int, default=90)
    p.add_argument("--timepoints", type=int, default=120)
    p.add_argument("--effect", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="contrastive pretraining; writes pretrain.ckpt")
    _add_run_flags(p, lam=False)

    p = sub.add_parser("finetune", help="supervised finetuning; writes best.ckpt")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="print accuracy and macro recall of a checkpoint")
    _add_run_flags(p, lam=False, out=False)
    p.add_argument("--checkpoint", dest="init", help="alias of --init")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    p.add_argument("--points", type=int, default=5, help="random inputs per op")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench-attn", help="attention MAC counts versus token count")
    p.add_argument("--config", help="INI config file (d_model, num_heads)")
    p.add_argument("--counts", default=DEFAULT_COUNTS, help="comma-separated token counts")
    p.add_argument("--out", help="directory for bench_attn.csv (stdout if omitted)")
    return parser


# ---------------------------------------------------------------------------
# shared plumbing

def _run_config(args) -> RunConfig:
    run_section = {}
    for key in ("manifest", "out"):
        if getattr(args, key, None) is not None:
            run_section[key] = getattr(args, key)
    if getattr(args, "init", None) is not None:
        run_section["pretrain_init"] = args.init
    if getattr(args, "no_cross_view", False):
        run_section["enable_cross_view"] = False
    if getattr(args, "roi_only", False):
        run_section |= {"enable_cross_view": False, "enable_conn_view": False}
    if getattr(args, "conn_only", False):
        run_section |= {"enable_cross_view": False, "enable_roi_view": False}
    train_section = {}
    if getattr(args, "seed", None) is not None:
        train_section["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        train_section["lam"] = args.lam
    return load_run_config(args.config, {"RunConfig": run_section, "TrainConfig": train_section})


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required (flag or config file)")
    return value


def _load_data(run: RunConfig) -> tuple[RunConfig, Dataset]:
    manifest_path = _require(run.manifest, "--manifest")
    manifest = read_manifest(manifest_path)
    # the dataset fixes the matrix size and class count
    run.model = dataclasses.replace(run.model, M=manifest.roi_count, num_classes=manifest.num_classes)
    return run, load_dataset(manifest_path)


def build_model(run: RunConfig):
    """Model and projection head, optionally restored from ``run.pretrain_init``."""
    tensors = {}
    if run.pretrain_init is not None:
        saved, tensors = load_checkpoint(run.pretrain_init)
        run.model = dataclasses.replace(run.model, **{k: getattr(saved, k) for k in ARCH_FIELDS})
    model = CvFormer(run.model, seed=run.train.seed)
    head = init_head(run.model.d_model, run.contrastive, np.random.default_rng([run.train.seed, 3]))
    if tensors:
        try:
            model.load_state(tensors)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{run.pretrain_init}: {exc}") from None
        for name, t in head.items():
            if name in tensors:
                if tensors[name].shape != t.shape:
                    raise CheckpointError(f"{run.pretrain_init}: {name} has shape {tensors[name].shape}, "
                                          f"expected {t.shape}")
                t.data = tensors[name].astype(t.dtype)
    return model, head


def _out_dir(run: RunConfig) -> Path:
    out = Path(_require(run.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}%"


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synth(args) -> int:
    path = gen_synth(args.out, args.subjects, args.rois, args.timepoints, args.effect, args.seed)
    print(path)
    return 0


def cmd_pretrain(args) -> int:
    run, data = _load_data(_run_config(args))
    model, head = build_model(run)
    out = _out_dir(run)
    write_run_config(run, out / "config.ini")
    result = pretrain(model, head, data, run.train, run.contrastive)
    write_pretrain_log(out / "pretrain_loss.csv", result)
    ckpt = save_checkpoint(out / "pretrain.ckpt", run.model, model.state() | {k: t.data for k, t in head.items()})
    print(f"final pretraining loss {result.losses[-1]:.6f}" if result.losses else "no pretraining epochs run")
    print(ckpt)
    return 0


def cmd_finetune(args) -> int:
    run, data = _load_data(_run_config(args))
    model, head = build_model(run)
    out = _out_dir(run)
    write_run_config(run, out / "config.ini")
    if run.train.epochs_finetune < 1:
        raise ConfigError("epochs_finetune must be >= 1")
    result = finetune(model, head, data, run.train, run.contrastive)
    write_finetune_log(out / "metrics.csv", result)
    ckpt = save_checkpoint(out / "best.ckpt", run.model, model.state() | {k: t.data for k, t in head.items()})
    print(f"best epoch {result.best_epoch}: val accuracy {_pct(result.val_accuracy)}, "
          f"val macro recall {_pct(result.val_recall)}")
    if result.test_accuracy is not None:
        print(f"test accuracy {_pct(result.test_accuracy)}, test macro recall {_pct(result.test_recall)}")
    print(ckpt)
    return 0


def cmd_eval(args) -> int:
    run, data = _load_data(_run_config(args))
    if run.pretrain_init is not None:
        # a checkpoint fully determines the model, views included
        saved, _ = load_checkpoint(run.pretrain_init)
        run.model = saved
    model, _ = build_model(run)
    if len(data.splits[args.split]) == 0:
        raise ConfigError(f"split {args.split!r} is empty in {run.manifest}")
    acc, recall = evaluate(model, data, args.split)
    print(f"{args.split} accuracy {_pct(acc)}")
    print(f"{args.split} macro recall {_pct(recall)}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(points=args.points, seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.worst:.3e}  tol {r.tolerance:.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0


def parse_counts(text: str) -> list[int]:
    try:
        counts = sorted({int(c) for c in text.split(",") if c.strip()})
    except ValueError:
        raise ConfigError(f"--counts must be comma-separated integers, got {text!r}") from None
    if len(counts) < 2:
        raise ConfigError(f"--counts needs at least two distinct values, got {text!r}")
    if counts[0] < 1:
        raise ConfigError("--counts values must be >= 1")
    return counts


def loglog_slope(counts, values) -> float:
    slope, _ = np.polyfit(np.log(counts), np.log(values), 1)
    return float(slope)


def cmd_bench_attn(args) -> int:
    counts = parse_counts(args.counts)
    config = load_run_config(args.config).model if args.config else ModelConfig()
    rows = [(n, count_attention_macs(n, config, "full"), count_attention_macs(n, config, "cls_query"))
            for n in counts]
    lines = ["count,full_macs,cls_query_macs"] + [f"{n},{full},{cls}" for n, full, cls in rows]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench_attn.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(out / "bench_attn.csv")
    else:
        print("\n".join(lines))
    print(f"slope full {loglog_slope(counts, [r[1] for r in rows]):.4f}")
    print(f"slope cls_query {loglog_slope(counts, [r[2] for r in rows]):.4f}")
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench-attn": cmd_bench_attn,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, ad.ContractError, OSError) as exc:
        print(f"cvformer {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
