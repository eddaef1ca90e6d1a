"""Extraction pipeline: encode a dataset and write an embedding cache.

The output directory follows the consumer's documented layout exactly:
``manifest.json`` (format "CMME", version 1) plus little-endian row-major
blobs -- ``<split>.f32`` float32 features, ``<split>.lab`` uint32 labels,
``<split>.flp`` int32 flip-source indices, and ``text.f32`` holding
``num_classes * num_templates`` class-major rows.

Every train image contributes two rows: the original and its horizontal
flip (applied before the model's preprocessing), linked through flip_of;
originals carry -1.  Val and test images contribute one row each.  Rows
are L2-normalized.  Ordering follows the dataset index, so re-running a
job reproduces the output byte for byte.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .backends import EncoderBackend, make_backend
from .datasets import ExtractJob, build_index, cap_per_class
from .errors import DatasetLayoutError
from .templates import fill, load_builtin_templates, load_template_file

MAGIC = "CMME"
VERSION = 1


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms < 1e-12):
        raise DatasetLayoutError("encoder produced a zero feature row")
    return (x / norms[:, None]).astype(np.float32)


def _load_image(path: str) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except OSError as exc:
        raise DatasetLayoutError(f"cannot read image {path}: {exc}") from exc


def _encode_paths(
    backend: EncoderBackend,
    rows: list[tuple[str, int]],
    batch_size: int,
    flipped: bool,
) -> np.ndarray:
    feats = []
    for start in range(0, len(rows), batch_size):
        batch = []
        for path, _ in rows[start : start + batch_size]:
            image = _load_image(path)
            if flipped:
                image = image.transpose(Image.FLIP_LEFT_RIGHT)
            batch.append(image)
        feats.append(backend.encode_images(batch))
    if not feats:
        return np.zeros((0, backend.dim), dtype=np.float32)
    return np.concatenate(feats, axis=0)


def extract_texts(
    backend: EncoderBackend, class_names: list[str], templates: list[str],
    batch_size: int = 256,
) -> np.ndarray:
    """[N * L, dim] class-major normalized rows."""
    prompts = [fill(t, name) for name in class_names for t in templates]
    rows = []
    for start in range(0, len(prompts), batch_size):
        rows.append(backend.encode_texts(prompts[start : start + batch_size]))
    return _normalize_rows(np.concatenate(rows, axis=0))


def extract_images(
    backend: EncoderBackend,
    rows: list[tuple[str, int]],
    batch_size: int,
    with_flips: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Returns (features, labels, flip_of); flips double the rows."""
    labels = np.asarray([label for _, label in rows], dtype=np.uint32)
    feats = _encode_paths(backend, rows, batch_size, flipped=False)
    if feats.shape[0]:
        feats = _normalize_rows(feats)
    else:
        feats = feats.astype(np.float32)
    if not with_flips:
        return feats, labels, None
    flipped = _encode_paths(backend, rows, batch_size, flipped=True)
    if flipped.shape[0]:
        flipped = _normalize_rows(flipped)
    else:
        flipped = flipped.astype(np.float32)
    n = feats.shape[0]
    flip_of = np.concatenate(
        [np.full(n, -1, dtype=np.int32), np.arange(n, dtype=np.int32)]
    )
    return (
        np.concatenate([feats, flipped], axis=0),
        np.concatenate([labels, labels]),
        flip_of,
    )


def load_templates_for_job(job: ExtractJob) -> list[str]:
    if os.path.sep in job.templates or job.templates.endswith(".txt"):
        return load_template_file(job.templates)
    return load_builtin_templates(job.templates)


def write_cache_dir(
    out: str,
    class_names: list[str],
    num_templates: int,
    text: np.ndarray,
    split_arrays: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray | None]],
) -> None:
    os.makedirs(out, exist_ok=True)
    dim = int(text.shape[1])
    split_entries = {}
    for name, (feats, labels, flip_of) in split_arrays.items():
        entry = {
            "count": int(feats.shape[0]),
            "features": f"{name}.f32",
            "labels": f"{name}.lab",
            "flip_of": f"{name}.flp" if flip_of is not None else None,
        }
        split_entries[name] = entry
        if entry["count"] == 0:
            continue
        feats.astype("<f4").tofile(os.path.join(out, entry["features"]))
        labels.astype("<u4").tofile(os.path.join(out, entry["labels"]))
        if flip_of is not None:
            flip_of.astype("<i4").tofile(os.path.join(out, entry["flip_of"]))
    text.astype("<f4").tofile(os.path.join(out, "text.f32"))
    manifest = {
        "format": MAGIC,
        "version": VERSION,
        "dim": dim,
        "num_classes": len(class_names),
        "num_templates": num_templates,
        "class_names": class_names,
        "text_features": "text.f32",
        "splits": split_entries,
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def run_job(job: ExtractJob, backend: EncoderBackend | None = None) -> str:
    """Execute the full extraction; returns the output directory."""
    index = build_index(job)
    backend = backend or make_backend(job.model, job.device)
    templates = load_templates_for_job(job)
    text = extract_texts(backend, index.class_names, templates)
    split_arrays = {}
    for split in ("train", "val", "test"):
        rows = index.items[split]
        if split == "val":
            rows = cap_per_class(rows, job.val_cap)
        split_arrays[split] = extract_images(
            backend, rows, job.batch_size, with_flips=(split == "train")
        )
    write_cache_dir(
        job.out, index.class_names, len(templates), text, split_arrays
    )
    return job.out
