"""Class prototypes built from per-template text embeddings.

Each class's templates are averaged with uniform weights and normalized;
the resulting unit columns form the frozen matrix ``t_init``.  The
trainable copy ``t_ft`` starts equal to ``t_init`` and is deliberately NOT
re-normalized after optimizer updates: scores use the raw columns while the
triplet distance re-normalizes on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ZeroNorm
from .numerics import ZERO_NORM_EPS
from .store import EmbeddingCache


@dataclass
class TextPrototypes:
    t_init: np.ndarray   # [d, N] float64, unit columns, read-only
    t_ft: np.ndarray     # [d, N] float64, trainable
    grad_t: np.ndarray   # [d, N] float64 gradient buffer

    @property
    def num_classes(self) -> int:
        return int(self.t_init.shape[1])


def build_text_prototypes(cache: EmbeddingCache) -> TextPrototypes:
    """Average each class's template rows, normalize, stack as columns."""
    n, l, d = cache.num_classes, cache.num_templates, cache.dim
    rows = cache.text_features.astype(np.float64).reshape(n, l, d)
    means = rows.mean(axis=1)
    norms = np.sqrt(np.einsum("ij,ij->i", means, means))
    bad = np.flatnonzero(norms < ZERO_NORM_EPS)
    if bad.size:
        raise ZeroNorm(f"class {int(bad[0])} template mean has zero norm")
    # C-contiguous so checkpoint reloads reproduce BLAS results bitwise
    t_init = np.ascontiguousarray((means / norms[:, None]).T)
    t_init.setflags(write=False)
    return TextPrototypes(
        t_init=t_init,
        t_ft=t_init.copy(),
        grad_t=np.zeros((d, n)),
    )
