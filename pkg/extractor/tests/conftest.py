import json

import numpy as np
import pytest
from PIL import Image


def _write_image(path: str, seed: int) -> None:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(path)


@pytest.fixture(scope="session")
def tiny_imagefolder(tmp_path_factory):
    """root/<split>/<class>/<img>.png with deterministic pixel content."""
    root = tmp_path_factory.mktemp("dataset")
    counts = {"train": 6, "val": 3, "test": 4}
    seed = 0
    for split, per_class in counts.items():
        for class_name in ("forest", "lake", "road"):
            class_dir = root / split / class_name
            class_dir.mkdir(parents=True)
            for i in range(per_class):
                _write_image(str(class_dir / f"{i:03d}.png"), seed)
                seed += 1
    return str(root)


@pytest.fixture(scope="session")
def tiny_coop_dataset(tmp_path_factory):
    """Flat image dir plus a CoOp-style split json."""
    root = tmp_path_factory.mktemp("coop_ds")
    images = root / "images"
    images.mkdir()
    listing = {"train": [], "val": [], "test": []}
    seed = 1000
    for split, per_class in (("train", 4), ("val", 2), ("test", 3)):
        for label, class_name in enumerate(["cat", "dog"]):
            for i in range(per_class):
                rel = f"images/{split}_{class_name}_{i}.png"
                _write_image(str(root / rel), seed)
                seed += 1
                listing[split].append([rel, label, class_name])
    with open(root / "split.json", "w") as fh:
        json.dump(listing, fh)
    return str(root)
