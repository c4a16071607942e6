"""Encoder registry: deterministic stub for offline use, CLIP via open_clip.

Identifiers: ``stub:<dim>`` or ``openclip:<model>:<pretrained>``. Every
encoder returns L2-normalized float32 rows.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .emb1 import l2_normalize


class StubEncoder:
    """Content-sensitive deterministic encoder, no ML dependencies.

    Images are average-pooled to an 8x8 grayscale patch and pushed through a
    fixed seeded projection, so images that differ systematically (e.g. by
    class-correlated intensity patterns) land in separable regions.
    """

    def __init__(self, dim: int = 64):
        self.dim = int(dim)
        self.identifier = f"stub:{self.dim}"
        rng = np.random.default_rng(20240301)
        self._proj = rng.standard_normal((64, self.dim)) / 8.0

    @staticmethod
    def _pool(image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        h, w = arr.shape
        ys = np.linspace(0, h, 9).astype(int)
        xs = np.linspace(0, w, 9).astype(int)
        out = np.empty((8, 8))
        for i in range(8):
            for j in range(8):
                block = arr[ys[i]:max(ys[i + 1], ys[i] + 1),
                            xs[j]:max(xs[j + 1], xs[j] + 1)]
                out[i, j] = block.mean()
        return out.ravel() / 255.0

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        pooled = np.stack([self._pool(img) for img in images])
        return l2_normalize(pooled @ self._proj)

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.default_rng(seed)
            rows.append(rng.standard_normal(self.dim))
        return l2_normalize(np.stack(rows))


class OpenClipEncoder:
    """CLIP image/text encoder via open_clip; constructed lazily."""

    def __init__(self, model_name: str, pretrained: str, device: str = "cpu",
                 batch_size: int = 256):
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise RuntimeError(
                "openclip encoder requires torch and open_clip_torch "
                "(pip install 'emb-export[clip]')"
            ) from exc
        self._torch = torch
        self._open_clip = open_clip
        self.identifier = f"openclip:{model_name}:{pretrained}"
        self.batch_size = batch_size
        self.device = device
        model, _, preprocess = open_clip.create_model_and_transforms(
            model_name, pretrained=pretrained
        )
        self.model = model.eval().to(device)
        self.preprocess = preprocess
        self.tokenizer = open_clip.get_tokenizer(model_name)
        with torch.no_grad():
            probe = torch.zeros(1, 3, 224, 224).to(device)
            self.dim = int(self.model.encode_image(probe).shape[1])

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        from PIL import Image

        torch = self._torch
        out = []
        with torch.no_grad():
            for start in range(0, len(images), self.batch_size):
                chunk = images[start:start + self.batch_size]
                tensors = torch.stack(
                    [self.preprocess(Image.fromarray(np.asarray(img))) for img in chunk]
                ).to(self.device)
                feats = self.model.encode_image(tensors)
                out.append(feats.cpu().numpy())
        return l2_normalize(np.concatenate(out))

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            tokens = self.tokenizer(list(texts)).to(self.device)
            feats = self.model.encode_text(tokens).cpu().numpy()
        return l2_normalize(feats)


def resolve_encoder(identifier: str):
    parts = identifier.split(":")
    if parts[0] == "stub":
        dim = int(parts[1]) if len(parts) > 1 else 64
        return StubEncoder(dim)
    if parts[0] == "openclip":
        if len(parts) != 3:
            raise ValueError("openclip id must be openclip:<model>:<pretrained>")
        return OpenClipEncoder(parts[1], parts[2])
    raise ValueError(f"unknown encoder identifier {identifier!r}")
