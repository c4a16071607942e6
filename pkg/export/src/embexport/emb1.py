"""EMB1 writer (little-endian, no padding).

Layout: magic "EMB1" | u32 version=1 | u32 N | u32 D | u32 C | u32 flags |
N x i32 labels | N*D x f32 features | [bit0] C*D f32 prototypes |
[bit1] N u8 ood flags. Bit2 of flags marks features as pre-normalized.

This is an independent implementation of the wire format; the consuming
engine's reader is the compatibility oracle in the test suite.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Optional

import numpy as np

MAGIC = b"EMB1"
VERSION = 1
FLAG_PROTOTYPES = 1
FLAG_OOD_MASK = 2
FLAG_NORMALIZED = 4

_HEADER = struct.Struct("<4sIIIII")


def write_emb1(
    path,
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    prototypes: Optional[np.ndarray] = None,
    ood_mask: Optional[np.ndarray] = None,
    normalized: bool = True,
) -> None:
    """Atomically write one EMB1 file (temp file in place, then rename)."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    labs = np.ascontiguousarray(labels, dtype="<i4")
    n, d = feats.shape
    if labs.shape != (n,):
        raise ValueError("labels must have one entry per feature row")
    if np.any((labs < -1) | (labs >= num_classes)):
        raise ValueError("labels must be -1 or in [0, num_classes)")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    flags = 0
    if prototypes is not None:
        prototypes = np.ascontiguousarray(prototypes, dtype="<f4")
        if prototypes.shape != (num_classes, d):
            raise ValueError("prototypes must be C x D")
        flags |= FLAG_PROTOTYPES
    if ood_mask is not None:
        ood_mask = np.ascontiguousarray(ood_mask, dtype=np.uint8)
        if ood_mask.shape != (n,):
            raise ValueError("ood_mask must have one entry per feature row")
        flags |= FLAG_OOD_MASK
    if normalized:
        flags |= FLAG_NORMALIZED

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".emb1.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n, d, num_classes, flags))
            fh.write(labs.tobytes())
            fh.write(feats.tobytes())
            if prototypes is not None:
                fh.write(prototypes.tobytes())
            if ood_mask is not None:
                fh.write(ood_mask.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def l2_normalize(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return (rows / norms).astype(np.float32)
