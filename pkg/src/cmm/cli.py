"""Command-line interface over cache directories and checkpoints.

Subcommands: synth, train, eval, search-alpha, gap, flips, ablate-depth,
export-proj.  Every report is deterministic JSON/CSV; wall-clock timing
goes to a ``<out>.meta.json`` sidecar that determinism checks ignore.
``--config FILE`` supplies a JSON object whose keys mirror the long flag
names (dashes as underscores); explicit flags win over the file.  The
``CMM_THREADS`` environment variable caps worker parallelism where
subcommands fan out.

Exit status: 0 success, 1 flag/validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor


from . import evaluator, gap, store, trainer
from .errors import BadConfig, CmmError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:   # exit 1, not argparse's 2
        raise UsageError(message)


def _write_json(obj: dict, out: str | None) -> None:
    body = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if out is None:
        sys.stdout.write(body)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(body)


def _write_sidecar(out: str | None, started: float) -> None:
    if out is None:
        return
    meta = {"wall_clock_seconds": time.time() - started}
    with open(out + ".meta.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta) + "\n")


def _require(args: dict, key: str, flag: str):
    if args.get(key) is None:
        raise UsageError(f"missing required flag {flag}")
    return args[key]


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags."""
    merged = dict(defaults)
    explicit = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise UsageError("--config must hold a JSON object")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"--config has unknown keys: {sorted(unknown)}")
        merged.update(loaded)
    merged.update(explicit)
    return merged


_TRAIN_DEFAULTS = {
    "shots": 16,
    "seed": 0,
    "steps": 16000,
    "batch_size": 8,
    "depth": 0,
    "lr": 1e-4,
    "wd": 1e-4,
    "lr_min": 1e-5,
    "warmup": None,
    "alpha_train": 1.0,
    "margin": 1.0,
    "temperature": 0.01,
    "logit_scale": None,
    "no_flips": False,
}


def _train_config(a: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        shots=a["shots"],
        seed=a["seed"],
        batch_size=a["batch_size"],
        total_steps=a["steps"],
        alpha_train=a["alpha_train"],
        margin=a["margin"],
        temperature=a["temperature"],
        logit_scale=a["logit_scale"],
        depth=a["depth"],
        lr=a["lr"],
        weight_decay=a["wd"],
        lr_min=a["lr_min"],
        warmup_steps=a["warmup"],
    )


def _run_training(cache: store.EmbeddingCache, a: dict) -> trainer.Checkpoint:
    config = _train_config(a)
    task = store.sample_fewshot(
        cache, shots=a["shots"], seed=a["seed"], use_flip_rows=not a["no_flips"]
    )
    return trainer.train(cache, task, config)


def _resolve_alpha(
    ckpt: trainer.Checkpoint, cache: store.EmbeddingCache, alpha: float | None
) -> float:
    """Explicit alpha, or the default grid search on the val split."""
    if alpha is not None:
        return alpha
    return evaluator.grid_search_alpha(ckpt, cache).alpha_star


def cmd_synth(args: argparse.Namespace) -> int:
    defaults = {
        "out": None,
        "seed": 0,
        "classes": 8,
        "dim": 64,
        "templates": 4,
        "train_per_class": 32,
        "val_per_class": 50,
        "test_per_class": 50,
        "gap_shift": 0.0,
        "noise": 0.05,
        "class_spread": 1.0,
        "rotation_seed": None,
        "no_flips": False,
    }
    a = _merge_config(args, defaults)
    out = _require(a, "out", "--out")
    cache = store.synth_generate(
        store.SynthConfig(
            num_classes=a["classes"],
            dim=a["dim"],
            num_templates=a["templates"],
            train_per_class=a["train_per_class"],
            val_per_class=a["val_per_class"],
            test_per_class=a["test_per_class"],
            gap_shift=a["gap_shift"],
            rotation_seed=a["rotation_seed"],
            noise_sigma=a["noise"],
            class_spread=a["class_spread"],
            seed=a["seed"],
            with_flips=not a["no_flips"],
        )
    )
    store.write_cache(cache, out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    defaults = dict(_TRAIN_DEFAULTS, cache=None, out=None)
    a = _merge_config(args, defaults)
    cache = store.load_cache(_require(a, "cache", "--cache"))
    out = _require(a, "out", "--out")
    started = time.time()
    ckpt = _run_training(cache, a)
    trainer.save_checkpoint(ckpt, out)
    print(f"final training loss {ckpt.final_loss:.6f}", file=sys.stderr)
    _write_sidecar(os.path.join(out, "manifest.json"), started)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    defaults = {"checkpoint": None, "cache": None, "split": "test", "alpha": None, "out": None}
    a = _merge_config(args, defaults)
    started = time.time()
    ckpt = trainer.load_checkpoint(_require(a, "checkpoint", "--checkpoint"))
    cache = store.load_cache(_require(a, "cache", "--cache"))
    alpha = _resolve_alpha(ckpt, cache, a["alpha"])
    report = evaluator.evaluate(ckpt, cache, a["split"], alpha)
    _write_json(dict(report.to_json_dict(), split=a["split"]), a["out"])
    _write_sidecar(a["out"], started)
    return 0


def cmd_search_alpha(args: argparse.Namespace) -> int:
    defaults = {
        "checkpoint": None,
        "cache": None,
        "split": "val",
        "alpha_start": 0.1,
        "alpha_end": 1.0,
        "alpha_step": 0.1,
        "out": None,
    }
    a = _merge_config(args, defaults)
    started = time.time()
    ckpt = trainer.load_checkpoint(_require(a, "checkpoint", "--checkpoint"))
    cache = store.load_cache(_require(a, "cache", "--cache"))
    result = evaluator.grid_search_alpha(
        ckpt, cache, a["split"], a["alpha_start"], a["alpha_end"], a["alpha_step"]
    )
    _write_json(
        {
            "split": a["split"],
            "alpha_star": result.alpha_star,
            "accuracies": [{"alpha": al, "top1": acc} for al, acc in result.accuracies],
        },
        a["out"],
    )
    _write_sidecar(a["out"], started)
    return 0


def cmd_gap(args: argparse.Namespace) -> int:
    defaults = {
        "cache": None,
        "checkpoint": None,
        "split": "test",
        "seed": 0,
        "out": None,
        "proj_csv": None,
    }
    a = _merge_config(args, defaults)
    started = time.time()
    cache = store.load_cache(_require(a, "cache", "--cache"))
    ckpt = trainer.load_checkpoint(a["checkpoint"]) if a["checkpoint"] else None
    report = gap.compute_gap_report(cache, ckpt, a["split"], a["seed"])
    _write_json(report.to_json_dict(), a["out"])
    if a["proj_csv"]:
        _write_projection_csv(report, a["proj_csv"], cache)
    _write_sidecar(a["out"], started)
    return 0


def _write_projection_csv(report: gap.GapReport, path: str, cache: store.EmbeddingCache) -> None:
    labels = cache.split(report.split).labels
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "modality", "label", "x", "y"])
        phases = [("before", report.before)]
        if report.after is not None:
            phases.append(("after", report.after))
        for name, phase in phases:
            for i, row in enumerate(phase.projected_images):
                writer.writerow([name, "image", int(labels[i]), repr(row[0]), repr(row[1])])
            for k, row in enumerate(phase.projected_text):
                writer.writerow([name, "text", k, repr(row[0]), repr(row[1])])


def cmd_flips(args: argparse.Namespace) -> int:
    defaults = {"checkpoint": None, "cache": None, "split": "test", "alpha": None, "out": None}
    a = _merge_config(args, defaults)
    started = time.time()
    ckpt = trainer.load_checkpoint(_require(a, "checkpoint", "--checkpoint"))
    cache = store.load_cache(_require(a, "cache", "--cache"))
    alpha = _resolve_alpha(ckpt, cache, a["alpha"])
    scores = evaluator.score_split(ckpt, cache, a["split"])
    fused = evaluator.fuse_logits(scores.s_cmm, scores.s_clip, alpha)
    report = evaluator.flip_analysis(
        scores.s_clip.argmax(axis=1), fused.argmax(axis=1), scores.labels
    )
    _write_json(
        dict(report.to_json_dict(), split=a["split"], alpha_used=alpha), a["out"]
    )
    _write_sidecar(a["out"], started)
    return 0


def cmd_ablate_depth(args: argparse.Namespace) -> int:
    defaults = dict(
        _TRAIN_DEFAULTS, cache=None, out=None, split="test", alpha=None,
        depths="0,2,3,4,5",
    )
    a = _merge_config(args, defaults)
    cache = store.load_cache(_require(a, "cache", "--cache"))
    started = time.time()
    try:
        depths = [int(tok) for tok in str(a["depths"]).split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --depths value {a['depths']!r}") from exc

    def run(depth: int) -> dict:
        local = dict(a, depth=depth)
        ckpt = _run_training(cache, local)
        alpha = _resolve_alpha(ckpt, cache, a["alpha"])
        report = evaluator.evaluate(ckpt, cache, a["split"], alpha)
        return {
            "depth": depth,
            "top1": report.top1,
            "alpha_used": alpha,
            "final_loss": ckpt.final_loss,
        }

    workers = evaluator.max_workers_from_env(len(depths))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, depths))
    else:
        rows = [run(d) for d in depths]
    rows.sort(key=lambda r: r["depth"])
    _write_json({"split": a["split"], "results": rows}, a["out"])
    _write_sidecar(a["out"], started)
    return 0


def cmd_export_proj(args: argparse.Namespace) -> int:
    defaults = {"cache": None, "checkpoint": None, "split": "test", "seed": 0, "out": None}
    a = _merge_config(args, defaults)
    cache = store.load_cache(_require(a, "cache", "--cache"))
    out = _require(a, "out", "--out")
    ckpt = trainer.load_checkpoint(a["checkpoint"]) if a["checkpoint"] else None
    report = gap.compute_gap_report(cache, ckpt, a["split"], a["seed"])
    _write_projection_csv(report, out, cache)
    return 0


def _add_flag(parser: _Parser, name: str, **kwargs) -> None:
    parser.add_argument(name, default=argparse.SUPPRESS, **kwargs)


def _add_train_flags(p: _Parser) -> None:
    _add_flag(p, "--shots", type=int)
    _add_flag(p, "--seed", type=int)
    _add_flag(p, "--steps", type=int)
    _add_flag(p, "--batch-size", type=int)
    _add_flag(p, "--depth", type=int)
    _add_flag(p, "--lr", type=float)
    _add_flag(p, "--wd", type=float)
    _add_flag(p, "--lr-min", type=float)
    _add_flag(p, "--warmup", type=int)
    _add_flag(p, "--alpha-train", type=float)
    _add_flag(p, "--margin", type=float)
    _add_flag(p, "--temperature", type=float)
    _add_flag(p, "--logit-scale", type=float)
    _add_flag(p, "--no-flips", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="cmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func, help_text: str) -> _Parser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        _add_flag(p, "--config", type=str)
        return p

    p = command("synth", cmd_synth, "write a synthetic embedding cache")
    _add_flag(p, "--out", type=str)
    _add_flag(p, "--seed", type=int)
    _add_flag(p, "--classes", type=int)
    _add_flag(p, "--dim", type=int)
    _add_flag(p, "--templates", type=int)
    _add_flag(p, "--train-per-class", type=int)
    _add_flag(p, "--val-per-class", type=int)
    _add_flag(p, "--test-per-class", type=int)
    _add_flag(p, "--gap-shift", type=float)
    _add_flag(p, "--noise", type=float)
    _add_flag(p, "--class-spread", type=float)
    _add_flag(p, "--rotation-seed", type=int)
    _add_flag(p, "--no-flips", action="store_true")

    p = command("train", cmd_train, "train a checkpoint from a cache")
    _add_flag(p, "--cache", type=str)
    _add_flag(p, "--out", type=str)
    _add_train_flags(p)

    p = command("eval", cmd_eval, "evaluate a checkpoint (alpha from val search unless given)")
    _add_flag(p, "--checkpoint", type=str)
    _add_flag(p, "--cache", type=str)
    _add_flag(p, "--split", type=str)
    _add_flag(p, "--alpha", type=float)
    _add_flag(p, "--out", type=str)

    p = command("search-alpha", cmd_search_alpha, "grid-search the fusion coefficient")
    _add_flag(p, "--checkpoint", type=str)
    _add_flag(p, "--cache", type=str)
    _add_flag(p, "--split", type=str)
    _add_flag(p, "--alpha-start", type=float)
    _add_flag(p, "--alpha-end", type=float)
    _add_flag(p, "--alpha-step", type=float)
    _add_flag(p, "--out", type=str)

    p = command("gap", cmd_gap, "modality-gap diagnostics before/after a checkpoint")
    _add_flag(p, "--cache", type=str)
    _add_flag(p, "--checkpoint", type=str)
    _add_flag(p, "--split", type=str)
    _add_flag(p, "--seed", type=int)
    _add_flag(p, "--out", type=str)
    _add_flag(p, "--proj-csv", type=str)

    p = command("flips", cmd_flips, "correct-flip and error-inconsistency rates")
    _add_flag(p, "--checkpoint", type=str)
    _add_flag(p, "--cache", type=str)
    _add_flag(p, "--split", type=str)
    _add_flag(p, "--alpha", type=float)
    _add_flag(p, "--out", type=str)

    p = command("ablate-depth", cmd_ablate_depth, "train/evaluate several mapper depths")
    _add_flag(p, "--cache", type=str)
    _add_flag(p, "--out", type=str)
    _add_flag(p, "--depths", type=str)
    _add_flag(p, "--split", type=str)
    _add_flag(p, "--alpha", type=float)
    _add_train_flags(p)

    p = command("export-proj", cmd_export_proj, "export PCA-2D projections as CSV")
    _add_flag(p, "--cache", type=str)
    _add_flag(p, "--checkpoint", type=str)
    _add_flag(p, "--split", type=str)
    _add_flag(p, "--seed", type=int)
    _add_flag(p, "--out", type=str)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, BadConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CmmError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
