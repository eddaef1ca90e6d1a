"""Similarity scores, training losses, and their analytic gradients.

Scores are the plain product of mapped unit rows with the trainable
prototype matrix.  Training minimizes cross-entropy on the fused, scaled
logits plus a hardest-negative triplet loss under cosine distance; the
in-batch contrastive term is a diagnostic only and is never trained on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadConfig, DimMismatch, SingleClass


@dataclass(frozen=True)
class LossConfig:
    """Temperature, triplet margin, and the scale applied to fused logits."""

    temperature: float = 0.01
    margin: float = 1.0
    logit_scale: float | None = None   # None = 1 / temperature

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise BadConfig("temperature must be > 0")
        if self.margin <= 0:
            raise BadConfig("margin must be > 0")
        if self.logit_scale is not None and self.logit_scale <= 0:
            raise BadConfig("logit_scale must be > 0")

    @property
    def scale(self) -> float:
        return 1.0 / self.temperature if self.logit_scale is None else self.logit_scale


def cmm_scores(v_prime_hat: np.ndarray, t_ft: np.ndarray) -> np.ndarray:
    """Similarity of mapped rows against prototype columns: v' @ T."""
    v = np.asarray(v_prime_hat, dtype=np.float64)
    t = np.asarray(t_ft, dtype=np.float64)
    if v.ndim != 2 or t.ndim != 2 or v.shape[1] != t.shape[0]:
        raise DimMismatch(f"shapes {v.shape} x {t.shape}")
    return v @ t


def softmax_probs(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax of scores / temperature with max-subtraction."""
    if temperature <= 0:
        raise BadConfig("temperature must be > 0")
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class TripletResult:
    loss: float
    grad_anchors: np.ndarray       # [B, d]
    grad_prototypes: np.ndarray    # [d, N], nonzero only at touched columns
    hardest_negative: np.ndarray   # [B] selected k != y_i per sample
    per_sample: np.ndarray         # [B] hinge values
    active: np.ndarray             # [B] bool, hinge strictly positive


def triplet_loss(
    anchors: np.ndarray,
    t_hat: np.ndarray,
    labels: np.ndarray,
    margin: float,
) -> TripletResult:
    """Batch-mean hinge on cosine distance with hardest-negative mining.

    Per sample: max(0, d(a, t_pos) - min_{k != y} d(a, t_k) + margin) with
    d(a, t) = 1 - a.t.  Gradients touch the anchor, its positive column and
    the selected hardest-negative column only; inactive hinges contribute
    exactly zero.  Ties in the negative argmin resolve to the lowest index.
    """
    a = np.asarray(anchors, dtype=np.float64)
    t = np.asarray(t_hat, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or t.ndim != 2 or a.shape[1] != t.shape[0]:
        raise DimMismatch(f"shapes {a.shape} x {t.shape}")
    b, n = a.shape[0], t.shape[1]
    if n < 2:
        raise SingleClass("triplet loss needs at least 2 prototype columns")
    if labels.shape != (b,):
        raise DimMismatch("labels length must match batch")

    dist = 1.0 - a @ t
    rows = np.arange(b)
    d_pos = dist[rows, labels]
    masked = dist.copy()
    masked[rows, labels] = np.inf
    neg_idx = masked.argmin(axis=1)
    d_neg = masked[rows, neg_idx]
    hinge = d_pos - d_neg + margin
    per_sample = np.maximum(hinge, 0.0)
    active = hinge > 0.0
    loss = float(per_sample.mean())

    grad_a = np.zeros_like(a)
    grad_t = np.zeros_like(t)
    if active.any():
        act = np.flatnonzero(active)
        w = 1.0 / b
        # d(1 - a.t)/da = -t ; picked columns get -/+ anchor.
        grad_a[act] = w * (t[:, neg_idx[act]].T - t[:, labels[act]].T)
        np.add.at(grad_t.T, labels[act], -w * a[act])
        np.add.at(grad_t.T, neg_idx[act], w * a[act])
    return TripletResult(
        loss=loss,
        grad_anchors=grad_a,
        grad_prototypes=grad_t,
        hardest_negative=neg_idx,
        per_sample=per_sample,
        active=active,
    )


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax at the label; gradient (softmax - onehot)/B."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimMismatch(f"logits {z.shape} vs labels {labels.shape}")
    b = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = np.log(e.sum(axis=1)) + zmax[:, 0]
    rows = np.arange(b)
    loss = float(np.mean(lse - z[rows, labels]))
    grad = e / e.sum(axis=1, keepdims=True)
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


def total_loss(ce: float, triplet: float) -> float:
    """Unweighted sum of the two objectives."""
    if not (np.isfinite(ce) and np.isfinite(triplet)):
        raise BadConfig("loss terms must be finite")
    return ce + triplet


def contrastive_diagnostic(
    v_hat: np.ndarray, t_hat: np.ndarray, temperature: float
) -> float:
    """Mean in-batch InfoNCE over paired rows; diagnostic only.

    mean_i -log( exp(s_ii/T) / sum_j exp(s_ij/T) ) with s = v @ t^T.
    """
    if temperature <= 0:
        raise BadConfig("temperature must be > 0")
    v = np.asarray(v_hat, dtype=np.float64)
    t = np.asarray(t_hat, dtype=np.float64)
    if v.shape != t.shape or v.ndim != 2:
        raise DimMismatch(f"paired shapes {v.shape} vs {t.shape}")
    s = (v @ t.T) / temperature
    smax = s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s - smax).sum(axis=1)) + smax[:, 0]
    return float(np.mean(lse - np.diag(s)))
