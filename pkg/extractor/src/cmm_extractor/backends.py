"""Encoder backends: a pretrained vision-language model, or a content-hash
stub for offline pipeline tests.

A backend maps PIL images and text strings to raw (unnormalized) feature
rows; the extraction pipeline handles normalization and layout.
"""

from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np
from PIL import Image

from .errors import BackendError

CLIP_DIMS = {"RN50": 1024, "RN101": 512, "ViT-B/16": 512, "ViT-B/32": 512}
VARIANT_ALIASES = {"V-B/16": "ViT-B/16", "V-B/32": "ViT-B/32"}


class EncoderBackend(Protocol):
    name: str
    dim: int

    def encode_images(self, images: list[Image.Image]) -> np.ndarray: ...

    def encode_texts(self, texts: list[str]) -> np.ndarray: ...


class HashEncoder:
    """Deterministic stand-in encoder keyed on content bytes.

    Each input hashes to a seed that draws a fixed Gaussian vector, so
    identical inputs give identical rows, any change (e.g. a horizontal
    flip) gives an unrelated row, and no model weights are needed.  Only
    for tests and format validation, it carries no semantics.
    """

    def __init__(self, dim: int = 64):
        self.name = f"hash-{dim}"
        self.dim = dim

    def _row(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(payload).digest()
        seed = int.from_bytes(digest[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dim)

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        rows = []
        for image in images:
            small = image.convert("RGB").resize((16, 16), Image.BILINEAR)
            rows.append(self._row(b"img" + small.tobytes()))
        return np.stack(rows) if rows else np.zeros((0, self.dim))

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        rows = [self._row(b"txt" + t.encode("utf-8")) for t in texts]
        return np.stack(rows) if rows else np.zeros((0, self.dim))


class ClipEncoder:
    """Frozen pretrained CLIP encoders via open_clip (preferred) or clip."""

    def __init__(self, variant: str = "RN50", device: str = "cpu"):
        variant = VARIANT_ALIASES.get(variant, variant)
        if variant not in CLIP_DIMS:
            raise BackendError(f"unknown model variant {variant!r}")
        self.name = variant
        self.dim = CLIP_DIMS[variant]
        self.device = device
        try:
            import torch
        except ImportError as exc:
            raise BackendError("torch is not installed") from exc
        self._torch = torch
        try:
            import open_clip

            model_name = variant.replace("/", "-")
            model, _, preprocess = open_clip.create_model_and_transforms(
                model_name, pretrained="openai"
            )
            self._tokenize = open_clip.get_tokenizer(model_name)
        except Exception:
            try:
                import clip

                model, preprocess = clip.load(variant, device=device)
                self._tokenize = clip.tokenize
            except Exception as exc:
                raise BackendError(
                    f"could not load pretrained weights for {variant}: {exc}"
                ) from exc
        self._model = model.to(device).eval()
        self._preprocess = preprocess

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        torch = self._torch
        batch = torch.stack([self._preprocess(img.convert("RGB")) for img in images])
        with torch.no_grad():
            feats = self._model.encode_image(batch.to(self.device))
        return feats.float().cpu().numpy()

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        tokens = self._tokenize(texts)
        with torch.no_grad():
            feats = self._model.encode_text(tokens.to(self.device))
        return feats.float().cpu().numpy()


def make_backend(model: str, device: str = "cpu") -> EncoderBackend:
    if model.startswith("hash"):
        dim = int(model.split("-")[1]) if "-" in model else 64
        return HashEncoder(dim=dim)
    return ClipEncoder(model, device)
