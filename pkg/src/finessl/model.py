"""Trainable classifier state: main head, auxiliary head, optional relu adapter.

The backbone is a file of frozen embeddings, so the only parameters live here.
The auxiliary head shares the adapter's output at forward time but its losses
never push gradient into the adapter (see objective.grad).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .numkit import RandomStream

HDS_MAGIC = b"HDS1"
HDS_VERSION = 1
_HDS_HEADER = struct.Struct("<4sIIIIB")

FIELD_ORDER = ("adapter_w", "adapter_b", "main_w", "main_b", "aux_w", "aux_b")


@dataclass
class Heads:
    main_w: np.ndarray  # C x D'
    main_b: np.ndarray  # C
    aux_w: np.ndarray  # C x D'
    aux_b: np.ndarray  # C
    adapter_w: Optional[np.ndarray] = None  # D' x D
    adapter_b: Optional[np.ndarray] = None  # D'

    @property
    def has_adapter(self) -> bool:
        return self.adapter_w is not None

    @property
    def num_classes(self) -> int:
        return self.main_w.shape[0]

    @property
    def feature_dim(self) -> int:
        """Input dimension D (adapter input when present, else head input)."""
        return self.adapter_w.shape[1] if self.has_adapter else self.main_w.shape[1]

    @property
    def inner_dim(self) -> int:
        return self.main_w.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        """Parameter blocks in declaration order, adapter blocks omitted when off."""
        out = {}
        for name in FIELD_ORDER:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def copy(self) -> "Heads":
        return Heads(
            main_w=self.main_w.copy(),
            main_b=self.main_b.copy(),
            aux_w=self.aux_w.copy(),
            aux_b=self.aux_b.copy(),
            adapter_w=None if self.adapter_w is None else self.adapter_w.copy(),
            adapter_b=None if self.adapter_b is None else self.adapter_b.copy(),
        )

    def check_finite(self) -> None:
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in {name}")


def _check_input(heads: Heads, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != heads.feature_dim:
        raise ValueError(
            f"feature dim mismatch: got {x.shape[-1]}, heads expect {heads.feature_dim}"
        )
    return x


def forward_features(heads: Heads, x: np.ndarray) -> np.ndarray:
    """Adapter pass: identity when disabled, relu(Wx + b) when enabled."""
    x = _check_input(heads, x)
    if not heads.has_adapter:
        return x
    pre = x @ heads.adapter_w.T + heads.adapter_b
    return np.maximum(pre, 0.0)


def forward_main(heads: Heads, x: np.ndarray) -> np.ndarray:
    h = forward_features(heads, x)
    return h @ heads.main_w.T + heads.main_b


def forward_aux(heads: Heads, x: np.ndarray) -> np.ndarray:
    h = forward_features(heads, x)
    return h @ heads.aux_w.T + heads.aux_b


def init_heads(
    c: int,
    d: int,
    mode: str = "zeros",
    rng: Optional[RandomStream] = None,
    prototypes: Optional[np.ndarray] = None,
    sd: float = 0.01,
    scale: float = 1.0,
    adapter: bool = False,
    adapter_dim: Optional[int] = None,
) -> Heads:
    """Build heads per init mode: "zeros", "gaussian" (sd), or "prototypes" (scale).

    Zero init keeps linear-probe training convex from a symmetric start; the
    adapter, when enabled, always gets a small Gaussian init so relu units
    differentiate.
    """
    dp = d if adapter_dim is None else int(adapter_dim)
    if not adapter and dp != d:
        raise ConfigError("adapter_dim requires adapter=True")

    adapter_w = adapter_b = None
    if adapter:
        if rng is None:
            raise ConfigError("adapter init requires an rng")
        adapter_w = rng.normal((dp, d), sd=0.01)
        adapter_b = np.zeros(dp)

    if mode == "zeros":
        main_w = np.zeros((c, dp))
        aux_w = np.zeros((c, dp))
    elif mode == "gaussian":
        if rng is None:
            raise ConfigError("gaussian init requires an rng")
        main_w = rng.normal((c, dp), sd=sd)
        aux_w = rng.normal((c, dp), sd=sd)
        if adapter:
            adapter_w = rng.normal((dp, d), sd=sd)
    elif mode == "prototypes":
        if prototypes is None:
            raise ConfigError("prototypes init requested but no prototypes present")
        protos = np.asarray(prototypes, dtype=np.float64)
        if protos.shape != (c, dp):
            raise ConfigError(
                f"prototypes shape {protos.shape} incompatible with heads ({c}, {dp})"
            )
        norms = np.linalg.norm(protos, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        main_w = scale * protos / norms
        aux_w = main_w.copy()
    else:
        raise ConfigError(f"unknown init mode {mode!r}")

    return Heads(
        main_w=main_w,
        main_b=np.zeros(c),
        aux_w=aux_w,
        aux_b=np.zeros(c),
        adapter_w=adapter_w,
        adapter_b=adapter_b,
    )


# ---------------------------------------------------------------------------
# HDS1 checkpoint format
# ---------------------------------------------------------------------------


def save_heads(heads: Heads, path) -> None:
    c = heads.num_classes
    d = heads.feature_dim
    dp = heads.inner_dim
    with open(path, "wb") as fh:
        fh.write(_HDS_HEADER.pack(HDS_MAGIC, HDS_VERSION, c, d, dp, int(heads.has_adapter)))
        for arr in heads.arrays().values():
            fh.write(arr.astype("<f4").tobytes())


def load_heads(path) -> Heads:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HDS_HEADER.size:
        raise FormatError(f"truncated header: offset {len(data)}")
    magic, version, c, d, dp, adapter_flag = _HDS_HEADER.unpack(data[: _HDS_HEADER.size])
    if magic != HDS_MAGIC:
        raise FormatError("bad magic at offset 0")
    if version != HDS_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    shapes = []
    if adapter_flag:
        shapes += [("adapter_w", (dp, d)), ("adapter_b", (dp,))]
    shapes += [("main_w", (c, dp)), ("main_b", (c,)), ("aux_w", (c, dp)), ("aux_b", (c,))]
    offset = _HDS_HEADER.size
    blocks: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise FormatError(f"truncated {name}: need {nbytes} bytes at offset {offset}")
        blocks[name] = (
            np.frombuffer(data[offset : offset + nbytes], dtype="<f4")
            .astype(np.float64)
            .reshape(shape)
        )
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"trailing bytes at offset {offset}")
    return Heads(
        main_w=blocks["main_w"],
        main_b=blocks["main_b"],
        aux_w=blocks["aux_w"],
        aux_b=blocks["aux_b"],
        adapter_w=blocks.get("adapter_w"),
        adapter_b=blocks.get("adapter_b"),
    )
