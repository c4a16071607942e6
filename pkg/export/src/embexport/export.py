"""Export pipeline: encode a dataset, pick a seeded labeled split, write EMB1.

The labeled split is chosen per class by ordering sample indices under a
seeded hash, so the same (dataset, seed, labeled_per_class) always yields the
same mask regardless of platform or library versions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import DatasetBundle, bundle_sha256, load_dataset
from .emb1 import l2_normalize, write_emb1
from .encoders import resolve_encoder

DEFAULT_TEMPLATES = ("a photo of a {}",)


@dataclass
class ExportSpec:
    dataset: str
    encoder: str
    labeled_per_class: int
    seed: int
    out: str
    test_out: Optional[str] = None
    prototypes: bool = False
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    data_root: str = "data"

    def validate(self) -> None:
        if self.labeled_per_class < 1:
            raise ValueError("labeled_per_class must be >= 1")


def labeled_split_mask(labels: np.ndarray, per_class: int, seed: int) -> np.ndarray:
    """Boolean mask keeping ``per_class`` samples of each class, hash-seeded."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.zeros(labels.shape[0], dtype=bool)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        if idx.size < per_class:
            raise ValueError(
                f"class {int(k)} has {idx.size} samples, fewer than "
                f"labeled_per_class={per_class}"
            )
        keys = [
            hashlib.sha256(f"{seed}:{int(i)}".encode()).hexdigest() for i in idx
        ]
        chosen = idx[np.argsort(keys)][:per_class]
        mask[chosen] = True
    return mask


def export_prototypes(encoder, class_names, templates=DEFAULT_TEMPLATES) -> np.ndarray:
    """Mean-pooled normalized text embeddings of the class-name templates."""
    rows = []
    for name in class_names:
        texts = [tpl.format(name) for tpl in templates]
        embedded = encoder.encode_texts(texts)
        rows.append(np.mean(embedded, axis=0))
    return l2_normalize(np.stack(rows))


def export_embeddings(
    spec: ExportSpec,
    encoder=None,
    bundle: Optional[DatasetBundle] = None,
) -> dict:
    """Encode train/test splits and write EMB1 files plus a JSON manifest.

    Train labels are -1 outside the seeded per-class labeled split; the test
    file keeps every label. Returns the manifest dictionary.
    """
    spec.validate()
    if encoder is None:
        encoder = resolve_encoder(spec.encoder)
    if bundle is None:
        bundle = load_dataset(spec.dataset, spec.data_root)
    c = bundle.num_classes

    features = l2_normalize(encoder.encode_images(bundle.train_images))
    mask = labeled_split_mask(bundle.train_labels, spec.labeled_per_class, spec.seed)
    labels = np.where(mask, bundle.train_labels, -1).astype(np.int32)

    prototypes = None
    if spec.prototypes:
        prototypes = export_prototypes(encoder, bundle.class_names, spec.templates)

    write_emb1(
        spec.out, features, labels, num_classes=c,
        prototypes=prototypes, normalized=True,
    )

    test_path = None
    if spec.test_out:
        test_features = l2_normalize(encoder.encode_images(bundle.test_images))
        write_emb1(
            spec.test_out, test_features,
            bundle.test_labels.astype(np.int32), num_classes=c,
            prototypes=prototypes, normalized=True,
        )
        test_path = str(spec.test_out)

    manifest = {
        "encoder": encoder.identifier,
        "dataset": spec.dataset,
        "dataset_sha256": bundle_sha256(bundle),
        "split_seed": spec.seed,
        "labeled_per_class": spec.labeled_per_class,
        "num_classes": c,
        "dim": int(features.shape[1]),
        "train_file": str(spec.out),
        "test_file": test_path,
        "prototypes": bool(spec.prototypes),
    }
    with open(str(spec.out) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
