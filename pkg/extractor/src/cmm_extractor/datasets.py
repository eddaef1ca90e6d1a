"""Dataset enumeration: image-folder trees and CoOp-style split files.

Two layouts are supported:

* ``imagefolder`` -- ``root/<split>/<class_name>/<image>`` with splits
  ``train``, ``val``, ``test``.  Classes are the sorted union of class
  directories; files sort lexicographically inside a class.
* ``coop`` -- a JSON split file mapping each split to a list of
  ``[relative_path, label, class_name]`` rows, the convention shared by the
  standard few-shot benchmark splits.  Paths resolve against ``root``.

Both yield deterministic orderings, which the cache contract requires.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .errors import DatasetLayoutError

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".webp")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetIndex:
    class_names: list[str]
    # per split: list of (absolute image path, label)
    items: dict[str, list[tuple[str, int]]]


@dataclass(frozen=True)
class ExtractJob:
    dataset: str
    root: str
    out: str
    model: str = "RN50"
    splits: str = "imagefolder"        # or "coop"
    split_file: str | None = None      # required for coop
    templates: str = "generic"         # builtin set name or a file path
    device: str = "cpu"
    batch_size: int = 64
    val_cap: int | None = None         # optional per-class cap on val rows


def index_imagefolder(root: str) -> DatasetIndex:
    class_set: set[str] = set()
    for split in SPLITS:
        split_dir = os.path.join(root, split)
        if not os.path.isdir(split_dir):
            raise DatasetLayoutError(f"missing split directory {split_dir}")
        for entry in os.listdir(split_dir):
            if os.path.isdir(os.path.join(split_dir, entry)):
                class_set.add(entry)
    if len(class_set) < 2:
        raise DatasetLayoutError("need at least 2 class directories")
    class_names = sorted(class_set)
    label_of = {name: i for i, name in enumerate(class_names)}
    items: dict[str, list[tuple[str, int]]] = {}
    for split in SPLITS:
        rows: list[tuple[str, int]] = []
        split_dir = os.path.join(root, split)
        for name in class_names:
            class_dir = os.path.join(split_dir, name)
            if not os.path.isdir(class_dir):
                continue
            for fname in sorted(os.listdir(class_dir)):
                if fname.lower().endswith(IMAGE_EXTENSIONS):
                    rows.append((os.path.join(class_dir, fname), label_of[name]))
        items[split] = rows
    return DatasetIndex(class_names=class_names, items=items)


def index_coop_split(root: str, split_file: str) -> DatasetIndex:
    path = split_file if os.path.isabs(split_file) else os.path.join(root, split_file)
    if not os.path.isfile(path):
        raise DatasetLayoutError(f"split file {path} not found")
    with open(path, "r", encoding="utf-8") as fh:
        listing = json.load(fh)
    names: dict[int, str] = {}
    items: dict[str, list[tuple[str, int]]] = {}
    for split in SPLITS:
        if split not in listing:
            raise DatasetLayoutError(f"split file lacks {split!r}")
        rows: list[tuple[str, int]] = []
        for entry in listing[split]:
            rel, label, class_name = entry[0], int(entry[1]), str(entry[2])
            known = names.setdefault(label, class_name)
            if known != class_name:
                raise DatasetLayoutError(
                    f"label {label} maps to both {known!r} and {class_name!r}"
                )
            rows.append((os.path.join(root, rel), label))
        items[split] = rows
    if len(names) < 2:
        raise DatasetLayoutError("need at least 2 classes")
    expected = set(range(len(names)))
    if set(names) != expected:
        raise DatasetLayoutError(f"labels {sorted(names)} are not contiguous from 0")
    return DatasetIndex(
        class_names=[names[i] for i in range(len(names))], items=items
    )


def build_index(job: ExtractJob) -> DatasetIndex:
    if job.splits == "imagefolder":
        return index_imagefolder(job.root)
    if job.splits == "coop":
        if not job.split_file:
            raise DatasetLayoutError("coop layout needs --split-file")
        return index_coop_split(job.root, job.split_file)
    raise DatasetLayoutError(f"unknown split layout {job.splits!r}")


def cap_per_class(
    rows: list[tuple[str, int]], cap: int | None
) -> list[tuple[str, int]]:
    if cap is None:
        return rows
    seen: dict[int, int] = {}
    kept = []
    for path, label in rows:
        seen[label] = seen.get(label, 0) + 1
        if seen[label] <= cap:
            kept.append((path, label))
    return kept
