"""Dataset providers: CIFAR-100 via torchvision, plus a synthetic fixture.

Names: ``cifar100`` or ``synthetic:<classes>x<per_class>`` (fixture with
class-correlated intensity patterns, used by tests and smoke runs).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass
class DatasetBundle:
    train_images: np.ndarray  # (N, H, W[, C]) uint8
    train_labels: np.ndarray  # (N,) int64
    test_images: np.ndarray
    test_labels: np.ndarray
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def synthetic_bundle(classes: int, per_class: int, test_per_class: int = 10,
                     hw: int = 16, seed: int = 0) -> DatasetBundle:
    rng = np.random.default_rng(seed)
    patterns = rng.integers(0, 200, size=(classes, hw, hw)).astype(np.float64)

    def _draw(count):
        images, labels = [], []
        for k in range(classes):
            noise = rng.normal(0.0, 12.0, size=(count, hw, hw))
            block = np.clip(patterns[k] + noise, 0, 255).astype(np.uint8)
            images.append(block)
            labels.extend([k] * count)
        return np.concatenate(images), np.array(labels, dtype=np.int64)

    train_x, train_y = _draw(per_class)
    test_x, test_y = _draw(test_per_class)
    names = [f"pattern {k}" for k in range(classes)]
    return DatasetBundle(train_x, train_y, test_x, test_y, names)


def cifar100_bundle(root: str) -> DatasetBundle:
    try:
        from torchvision.datasets import CIFAR100
    except ImportError as exc:
        raise RuntimeError("cifar100 requires torchvision") from exc
    train = CIFAR100(root=root, train=True, download=True)
    test = CIFAR100(root=root, train=False, download=True)
    return DatasetBundle(
        train_images=np.asarray(train.data, dtype=np.uint8),
        train_labels=np.asarray(train.targets, dtype=np.int64),
        test_images=np.asarray(test.data, dtype=np.uint8),
        test_labels=np.asarray(test.targets, dtype=np.int64),
        class_names=list(train.classes),
    )


def load_dataset(name: str, root: str = "data") -> DatasetBundle:
    if name == "cifar100":
        return cifar100_bundle(root)
    if name.startswith("synthetic:"):
        spec = name.split(":", 1)[1]
        classes, per_class = (int(v) for v in spec.split("x"))
        return synthetic_bundle(classes, per_class)
    raise ValueError(f"unknown dataset {name!r}")


def bundle_sha256(bundle: DatasetBundle) -> str:
    h = hashlib.sha256()
    for arr in (bundle.train_images, bundle.train_labels,
                bundle.test_images, bundle.test_labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update("|".join(bundle.class_names).encode("utf-8"))
    return h.hexdigest()
