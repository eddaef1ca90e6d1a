"""Modality-gap diagnostics: Gaussian fits, KL, Wasserstein-2, similarity.

The image and text populations are each fit with a Gaussian (MLE mean and
covariance plus a small trace-scaled ridge).  KL divergence is evaluated on
a shared PCA-2D projection, the Wasserstein-2 distance on the original
dimension.  "Before" compares raw image features with the frozen
prototypes; "after" compares mapped image features with the re-normalized
fine-tuned prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingleClass, SingularCovariance, TooFewSamples
from .losses import contrastive_diagnostic
from .mapper import map_forward
from .numerics import eigh_sym, normalize_columns, pca_project, psd_sqrt
from .prototypes import build_text_prototypes
from .rng import SplitMix64
from .store import EmbeddingCache
from .trainer import Checkpoint

RIDGE_FACTOR = 1e-6
MAX_PAIRS = 1_000_000


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray       # [d']
    cov: np.ndarray        # [d', d'] symmetric PSD after ridge
    n: int
    ridge: float


def gaussian_mle(points: np.ndarray) -> GaussianStats:
    """MLE fit with ridge = 1e-6 * trace(cov)/d added to the diagonal."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise TooFewSamples("need at least 2 rows")
    n, d = points.shape
    mean = points.mean(axis=0)
    centered = points - mean
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    ridge = RIDGE_FACTOR * float(np.trace(cov)) / d
    cov = cov + ridge * np.eye(d)
    return GaussianStats(mean=mean, cov=cov, n=n, ridge=ridge)


def _inv_and_logdet(cov: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    eig = eigh_sym(cov)
    if float(eig.eigenvalues[-1]) <= 0.0:
        raise SingularCovariance(f"{what} has eigenvalue {eig.eigenvalues[-1]:.3e}")
    inv = (eig.eigenvectors / eig.eigenvalues) @ eig.eigenvectors.T
    return inv, float(np.sum(np.log(eig.eigenvalues)))


def kl_gaussian(p: GaussianStats, q: GaussianStats) -> float:
    """Closed-form KL(p || q) between Gaussian fits."""
    if p.mean.shape != q.mean.shape:
        raise SingularCovariance("dimension mismatch")
    d = p.mean.shape[0]
    q_inv, q_logdet = _inv_and_logdet(q.cov, "q covariance")
    _, p_logdet = _inv_and_logdet(p.cov, "p covariance")
    diff = q.mean - p.mean
    kl = 0.5 * (
        float(np.trace(q_inv @ p.cov))
        + float(diff @ q_inv @ diff)
        - d
        + q_logdet
        - p_logdet
    )
    return max(kl, 0.0)


def wasserstein2_gaussian(p: GaussianStats, q: GaussianStats) -> float:
    """Quadratic optimal-transport distance between Gaussian fits."""
    if p.mean.shape != q.mean.shape:
        raise SingularCovariance("dimension mismatch")
    diff = p.mean - q.mean
    sq = psd_sqrt(q.cov)
    cross = sq @ p.cov @ sq
    cross = 0.5 * (cross + cross.T)
    cross_tr = float(np.trace(psd_sqrt(cross)))
    total = float(diff @ diff) + float(np.trace(p.cov) + np.trace(q.cov)) - 2.0 * cross_tr
    return float(np.sqrt(max(total, 0.0)))


@dataclass
class SimilarityStats:
    matched_mean: float
    mismatched_mean: float
    intra_modal_interclass_mean: float

    def to_json_dict(self) -> dict:
        return {
            "matched_mean": self.matched_mean,
            "mismatched_mean": self.mismatched_mean,
            "intra_modal_interclass_mean": self.intra_modal_interclass_mean,
        }


def similarity_stats(
    image_feats: np.ndarray,
    text_protos: np.ndarray,
    labels: np.ndarray,
    max_pairs: int = MAX_PAIRS,
    seed: int = 0,
) -> SimilarityStats:
    """Mean cosines: matched image/prototype, mismatched, and image pairs
    across classes (exact up to ``max_pairs`` pairs, then seeded sampling
    with replacement)."""
    v = np.asarray(image_feats, dtype=np.float64)
    t = np.asarray(text_protos, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, _ = v.shape
    n_classes = t.shape[1]
    if n_classes < 2 or np.unique(labels).size < 2:
        raise SingleClass("need at least two classes present")
    sims = v @ t
    rows = np.arange(n)
    matched = float(sims[rows, labels].mean())
    mismatched = float(
        (sims.sum() - sims[rows, labels].sum()) / (n * (n_classes - 1))
    )

    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    total_pairs = int((n * n - np.sum(counts * counts)) // 2)
    if total_pairs <= max_pairs:
        # Exact via sums: sum over cross-class pairs of v_i.v_j equals
        # (|sum_all|^2 - sum_k |sum_class_k|^2) / 2.
        s_all = v.sum(axis=0)
        per_class = np.zeros((n_classes, v.shape[1]))
        np.add.at(per_class, labels, v)
        cross_sum = 0.5 * (s_all @ s_all - np.einsum("kj,kj->", per_class, per_class))
        intra = float(cross_sum / total_pairs)
    else:
        rng = SplitMix64(seed).derive(0x9A1)
        acc = 0.0
        got = 0
        while got < max_pairs:
            draw = max_pairs - got
            i = (rng.raw(draw) % np.uint64(n)).astype(np.int64)
            j = (rng.raw(draw) % np.uint64(n)).astype(np.int64)
            keep = labels[i] != labels[j]
            if keep.any():
                acc += float(np.einsum("ij,ij->", v[i[keep]], v[j[keep]]))
                got += int(keep.sum())
        intra = acc / max_pairs
    return SimilarityStats(
        matched_mean=matched,
        mismatched_mean=mismatched,
        intra_modal_interclass_mean=intra,
    )


@dataclass
class PhaseResult:
    kl_image_to_text: float
    kl_text_to_image: float
    w2: float
    similarity: SimilarityStats
    contrastive: float
    ridges: dict[str, float]
    projected_images: np.ndarray   # [n, 2]
    projected_text: np.ndarray     # [N, 2]


@dataclass
class GapReport:
    split: str
    n_images: int
    n_text: int
    before: PhaseResult
    after: PhaseResult | None

    def to_json_dict(self) -> dict:
        def phase(p: PhaseResult) -> dict:
            return {
                "kl_2d_image_to_text": p.kl_image_to_text,
                "kl_2d_text_to_image": p.kl_text_to_image,
                "wasserstein2": p.w2,
                "similarity": p.similarity.to_json_dict(),
                "contrastive_diagnostic": p.contrastive,
                "covariance_ridges": p.ridges,
            }

        out = {
            "split": self.split,
            "n_images": self.n_images,
            "n_text": self.n_text,
            "before": phase(self.before),
        }
        if self.after is not None:
            out["after"] = phase(self.after)
        return out


def _phase(
    images: np.ndarray,
    text: np.ndarray,
    labels: np.ndarray,
    temperature: float,
    seed: int,
) -> PhaseResult:
    stats_img = gaussian_mle(images)
    stats_txt = gaussian_mle(text)
    w2 = wasserstein2_gaussian(stats_img, stats_txt)

    both = np.concatenate([images, text], axis=0)
    projected, _, _ = pca_project(both, 2)
    proj_img, proj_txt = projected[: images.shape[0]], projected[images.shape[0] :]
    g_img = gaussian_mle(proj_img)
    g_txt = gaussian_mle(proj_txt)

    sim = similarity_stats(images, text.T, labels, seed=seed)
    sub = min(images.shape[0], 512)
    rng = SplitMix64(seed).derive(0xC0)
    idx = rng.sample_without_replacement(images.shape[0], sub)
    contrastive = contrastive_diagnostic(
        images[idx], text[labels[idx]], temperature
    )
    return PhaseResult(
        kl_image_to_text=kl_gaussian(g_img, g_txt),
        kl_text_to_image=kl_gaussian(g_txt, g_img),
        w2=w2,
        similarity=sim,
        contrastive=contrastive,
        ridges={
            "images_full": stats_img.ridge,
            "text_full": stats_txt.ridge,
            "images_2d": g_img.ridge,
            "text_2d": g_txt.ridge,
        },
        projected_images=proj_img,
        projected_text=proj_txt,
    )


def compute_gap_report(
    cache: EmbeddingCache,
    ckpt: Checkpoint | None,
    split: str = "test",
    seed: int = 0,
    temperature: float = 0.01,
) -> GapReport:
    """Gap diagnostics before (raw images vs frozen prototypes) and, when a
    checkpoint is given, after (mapped images vs fine-tuned prototypes)."""
    data = cache.split(split)
    if data.count < 2:
        raise TooFewSamples(f"split {split!r} has {data.count} rows")
    images = data.features.astype(np.float64)
    labels = data.labels.astype(np.int64)
    protos = build_text_prototypes(cache)
    text_before = protos.t_init.T.copy()
    before = _phase(images, text_before, labels, temperature, seed)
    after = None
    if ckpt is not None:
        mapped, _ = map_forward(ckpt.mapper(), images)
        t_hat, _ = normalize_columns(ckpt.t_ft)
        after = _phase(
            mapped, t_hat.T.copy(), labels, ckpt.config.temperature, seed
        )
    return GapReport(
        split=split,
        n_images=int(images.shape[0]),
        n_text=int(text_before.shape[0]),
        before=before,
        after=after,
    )
