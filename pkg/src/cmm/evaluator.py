"""Zero-shot scores, fusion, top-1 accuracy, alpha search, flip analysis.

Prediction conventions, also echoed in every emitted report:

* argmax ties break toward the lowest class index;
* ``clip`` predictions come from the frozen prototypes, ``cmm`` predictions
  from the fused logits at the evaluation alpha;
* correct-flip rate   = |clip wrong and cmm correct| / |clip wrong|;
* error-inconsistency = |both wrong with different predictions| /
  |clip wrong or cmm wrong|.

Rates with an empty denominator are reported as absent (null), never 0.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import BadConfig, DimMismatch, EmptyBatch, EmptyValSplit
from .losses import cmm_scores
from .mapper import map_forward
from .store import EmbeddingCache
from .trainer import Checkpoint

CONVENTIONS = {
    "tie_break": "lowest class index",
    "correct_flip_rate": "count(clip wrong and cmm correct) / count(clip wrong)",
    "error_inconsistency_rate": (
        "count(both wrong and clip_pred != cmm_pred) / count(clip wrong or cmm wrong)"
    ),
    "undefined_rates": "reported as null when the denominator is empty",
}


def clip_scores(
    v_hat: np.ndarray, t_init: np.ndarray, logit_scale: float
) -> np.ndarray:
    """Zero-shot logits: logit_scale * (v @ t_init)."""
    v = np.asarray(v_hat, dtype=np.float64)
    t = np.asarray(t_init, dtype=np.float64)
    if v.ndim != 2 or t.ndim != 2 or v.shape[1] != t.shape[0]:
        raise DimMismatch(f"shapes {v.shape} x {t.shape}")
    if logit_scale <= 0:
        raise BadConfig("logit_scale must be > 0")
    return logit_scale * (v @ t)


def fuse_logits(s_cmm: np.ndarray, s_clip: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * s_cmm + s_clip."""
    a = np.asarray(s_cmm, dtype=np.float64)
    b = np.asarray(s_clip, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"shapes {a.shape} vs {b.shape}")
    if alpha < 0:
        raise BadConfig("alpha must be >= 0")
    return alpha * a + b


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of rows whose argmax matches the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise EmptyBatch("no rows to evaluate")
    if labels.shape != (logits.shape[0],):
        raise DimMismatch("labels length must match logits rows")
    preds = logits.argmax(axis=1)
    return float(np.mean(preds == labels) * 100.0)


@dataclass
class EvalReport:
    top1: float
    per_class_accuracy: list[float | None]   # None for classes absent from the split
    alpha_used: float
    n: int
    counts: dict[str, int]

    def to_json_dict(self) -> dict:
        return {
            "conventions": CONVENTIONS,
            "top1": self.top1,
            "alpha_used": self.alpha_used,
            "n": self.n,
            "per_class_accuracy": self.per_class_accuracy,
            "counts": self.counts,
        }


@dataclass
class SplitScores:
    """Scores of one split under a checkpoint; reused across alphas."""

    s_cmm: np.ndarray
    s_clip: np.ndarray
    labels: np.ndarray


def score_split(ckpt: Checkpoint, cache: EmbeddingCache, split: str) -> SplitScores:
    data = cache.split(split)
    if data.count == 0:
        raise EmptyBatch(f"split {split!r} is empty")
    scale = ckpt.config.loss_config.scale
    v_hat = data.features.astype(np.float64)
    v_prime, _ = map_forward(ckpt.mapper(), v_hat)
    s_cmm = scale * cmm_scores(v_prime, ckpt.t_ft)
    s_clip = clip_scores(v_hat, ckpt.t_init, scale)
    return SplitScores(s_cmm=s_cmm, s_clip=s_clip, labels=data.labels.astype(np.int64))


def report_from_scores(
    scores: SplitScores, alpha: float, num_classes: int
) -> EvalReport:
    fused = fuse_logits(scores.s_cmm, scores.s_clip, alpha)
    labels = scores.labels
    cmm_preds = fused.argmax(axis=1)
    clip_preds = scores.s_clip.argmax(axis=1)
    n = labels.shape[0]
    per_class: list[float | None] = []
    for k in range(num_classes):
        mask = labels == k
        per_class.append(
            float(np.mean(cmm_preds[mask] == k) * 100.0) if mask.any() else None
        )
    clip_ok = clip_preds == labels
    cmm_ok = cmm_preds == labels
    counts = {
        "both_correct": int(np.sum(clip_ok & cmm_ok)),
        "clip_only": int(np.sum(clip_ok & ~cmm_ok)),
        "cmm_only": int(np.sum(~clip_ok & cmm_ok)),
        "both_wrong_same": int(np.sum(~clip_ok & ~cmm_ok & (clip_preds == cmm_preds))),
        "both_wrong_diff": int(np.sum(~clip_ok & ~cmm_ok & (clip_preds != cmm_preds))),
    }
    return EvalReport(
        top1=float(np.mean(cmm_ok) * 100.0),
        per_class_accuracy=per_class,
        alpha_used=alpha,
        n=n,
        counts=counts,
    )


def evaluate(
    ckpt: Checkpoint, cache: EmbeddingCache, split: str, alpha: float
) -> EvalReport:
    return report_from_scores(score_split(ckpt, cache, split), alpha, cache.num_classes)


def alpha_candidates(start: float, end: float, step: float) -> list[float]:
    """Inclusive grid, robust to float stepping (values rounded to 1e-10)."""
    if step <= 0 or end < start:
        raise BadConfig("need step > 0 and end >= start")
    out = []
    i = 0
    while True:
        a = round(start + i * step, 10)
        if a > end + 1e-9:
            break
        out.append(a)
        i += 1
    return out


def max_workers_from_env(n_tasks: int) -> int:
    env = os.environ.get("CMM_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError as exc:
            raise BadConfig(f"CMM_THREADS={env!r} is not an integer") from exc
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


@dataclass
class GridSearchResult:
    alpha_star: float
    accuracies: list[tuple[float, float]]   # (alpha, val top-1), in grid order


def grid_search_alpha(
    ckpt: Checkpoint,
    cache: EmbeddingCache,
    split: str = "val",
    start: float = 0.1,
    end: float = 1.0,
    step: float = 0.1,
) -> GridSearchResult:
    """Evaluate every alpha in the inclusive grid; ties pick the smallest."""
    if cache.split(split).count == 0:
        raise EmptyValSplit(f"split {split!r} is empty")
    scores = score_split(ckpt, cache, split)
    candidates = alpha_candidates(start, end, step)

    def acc(alpha: float) -> float:
        return top1(fuse_logits(scores.s_cmm, scores.s_clip, alpha), scores.labels)

    workers = max_workers_from_env(len(candidates))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(acc, candidates))
    else:
        accs = [acc(a) for a in candidates]
    best = int(np.argmax(accs))   # first maximum = smallest alpha
    return GridSearchResult(
        alpha_star=candidates[best],
        accuracies=list(zip(candidates, accs)),
    )


@dataclass
class FlipReport:
    correct_flip_rate: float | None
    error_inconsistency_rate: float | None
    clip_errors: int
    cmm_errors: int
    n: int

    def to_json_dict(self) -> dict:
        return {
            "conventions": CONVENTIONS,
            "correct_flip_rate": self.correct_flip_rate,
            "error_inconsistency_rate": self.error_inconsistency_rate,
            "clip_errors": self.clip_errors,
            "cmm_errors": self.cmm_errors,
            "n": self.n,
        }


def flip_analysis(
    clip_preds: np.ndarray, cmm_preds: np.ndarray, labels: np.ndarray
) -> FlipReport:
    clip_preds = np.asarray(clip_preds)
    cmm_preds = np.asarray(cmm_preds)
    labels = np.asarray(labels)
    if not (clip_preds.shape == cmm_preds.shape == labels.shape):
        raise DimMismatch("prediction and label vectors must share a length")
    clip_wrong = clip_preds != labels
    cmm_wrong = cmm_preds != labels
    n_clip_wrong = int(clip_wrong.sum())
    flip_rate = (
        float(np.sum(clip_wrong & ~cmm_wrong) / n_clip_wrong) if n_clip_wrong else None
    )
    any_wrong = int(np.sum(clip_wrong | cmm_wrong))
    inconsistency = (
        float(np.sum(clip_wrong & cmm_wrong & (clip_preds != cmm_preds)) / any_wrong)
        if any_wrong
        else None
    )
    return FlipReport(
        correct_flip_rate=flip_rate,
        error_inconsistency_rate=inconsistency,
        clip_errors=n_clip_wrong,
        cmm_errors=int(cmm_wrong.sum()),
        n=int(labels.shape[0]),
    )
