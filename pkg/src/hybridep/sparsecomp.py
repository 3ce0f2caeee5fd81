"""Shared + residual expert compression.

Each expert is sent as its difference from the layer's shared (mean) expert,
keeping only the ``k`` largest-magnitude residual entries in value-index
form. Both weight matrices share one flat index space (``w_up`` first).

Wire format, little-endian::

    magic       4s   b"SRC1"
    index_width u8   bytes per index (4 or 8)
    value_width u8   bytes per value (4 or 8)
    n_shapes    u8   number of matrices (2)
    reserved    u8
    shapes      n_shapes x (u32 rows, u32 cols)
    k           u64
    records     k x (index, value), sorted by index

A full-``k`` round trip is bit-exact when values are stored wider than the
expert dtype (e.g. 8-byte values for float32 experts). Narrower values round
the residual.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hybridep.errors import CorruptionError, DomainError

MAGIC = b"SRC1"
_HEADER = struct.Struct("<4sBBBx")
_SHAPE = struct.Struct("<II")
_K = struct.Struct("<Q")
_INDEX_DTYPES = {4: "<u4", 8: "<u8"}
_VALUE_DTYPES = {4: "<f4", 8: "<f8"}


@dataclass(frozen=True)
class ExpertWeights:
    w_up: np.ndarray
    w_down: np.ndarray

    def __post_init__(self):
        if self.w_up.ndim != 2 or self.w_down.ndim != 2:
            raise DomainError("expert matrices must be 2-D")
        if self.w_up.shape[::-1] != self.w_down.shape:
            raise DomainError(f"w_up {self.w_up.shape} and w_down {self.w_down.shape} are not H x M / M x H")
        if not (np.isfinite(self.w_up).all() and np.isfinite(self.w_down).all()):
            raise DomainError("expert weights must be finite")

    @property
    def shapes(self) -> Tuple[Tuple[int, int], ...]:
        return (self.w_up.shape, self.w_down.shape)

    @property
    def size(self) -> int:
        return self.w_up.size + self.w_down.size

    @property
    def nbytes(self) -> int:
        return self.w_up.nbytes + self.w_down.nbytes

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w_up.ravel(), self.w_down.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes) -> "ExpertWeights":
        (r0, c0), (r1, c1) = shapes
        split = r0 * c0
        return cls(flat[:split].reshape(r0, c0), flat[split:].reshape(r1, c1))


class SharedExpert(ExpertWeights):
    """Element-wise mean of a layer's experts."""


@dataclass(frozen=True)
class CompressionConfig:
    ratio: Optional[float] = None
    k: Optional[int] = None
    index_width: int = 4
    value_width: int = 4
    per_matrix: bool = False

    def __post_init__(self):
        if (self.ratio is None) == (self.k is None):
            raise DomainError("give exactly one of ratio or k")
        if self.ratio is not None and self.ratio < 1:
            raise DomainError(f"compression ratio must be >= 1, got {self.ratio}")
        if self.k is not None and self.k < 0:
            raise DomainError(f"k must be >= 0, got {self.k}")
        if self.index_width not in _INDEX_DTYPES or self.value_width not in _VALUE_DTYPES:
            raise DomainError("index and value widths must be 4 or 8 bytes")

    @property
    def entry_width(self) -> int:
        return self.index_width + self.value_width

    def budget(self, total_elements: int, element_width: int) -> int:
        if self.k is not None:
            return min(self.k, total_elements)
        k = math.floor(total_elements * element_width / (self.ratio * self.entry_width))
        return min(k, total_elements)


@dataclass(frozen=True)
class CompressedResidual:
    shapes: Tuple[Tuple[int, int], ...]
    indices: np.ndarray
    values: np.ndarray
    index_width: int = 4
    value_width: int = 4

    @property
    def k(self) -> int:
        return int(self.indices.size)

    @property
    def total_elements(self) -> int:
        return sum(r * c for r, c in self.shapes)

    def header_bytes(self) -> int:
        return _HEADER.size + _SHAPE.size * len(self.shapes) + _K.size

    def payload_bytes(self) -> int:
        return self.header_bytes() + self.k * (self.index_width + self.value_width)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.index_width, self.value_width, len(self.shapes))
        shapes = b"".join(_SHAPE.pack(r, c) for r, c in self.shapes)
        records = np.empty(
            self.k, dtype=[("i", _INDEX_DTYPES[self.index_width]), ("v", _VALUE_DTYPES[self.value_width])]
        )
        records["i"] = self.indices
        records["v"] = self.values
        return head + shapes + _K.pack(self.k) + records.tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "CompressedResidual":
        if len(payload) < _HEADER.size:
            raise CorruptionError("payload shorter than header")
        magic, iw, vw, n_shapes = _HEADER.unpack_from(payload, 0)
        if magic != MAGIC:
            raise CorruptionError(f"bad magic {magic!r}")
        if iw not in _INDEX_DTYPES or vw not in _VALUE_DTYPES:
            raise CorruptionError(f"unsupported widths index={iw} value={vw}")
        offset = _HEADER.size
        shapes = []
        for _ in range(n_shapes):
            shapes.append(_SHAPE.unpack_from(payload, offset))
            offset += _SHAPE.size
        (k,) = _K.unpack_from(payload, offset)
        offset += _K.size
        dtype = np.dtype([("i", _INDEX_DTYPES[iw]), ("v", _VALUE_DTYPES[vw])])
        if len(payload) - offset != k * dtype.itemsize:
            raise CorruptionError(f"expected {k} records, payload has {len(payload) - offset} bytes")
        records = np.frombuffer(payload, dtype=dtype, count=k, offset=offset)
        return cls(tuple(map(tuple, shapes)), records["i"].astype(np.int64), records["v"].copy(), iw, vw)


def _check_uniform(experts: Sequence[ExpertWeights]) -> None:
    if not experts:
        raise DomainError("need at least one expert")
    shapes = experts[0].shapes
    for i, e in enumerate(experts):
        if e.shapes != shapes:
            raise DomainError(f"expert {i} has shapes {e.shapes}, expected {shapes}")


def init_shared(experts: Sequence[ExpertWeights]) -> SharedExpert:
    _check_uniform(experts)
    dtype = experts[0].w_up.dtype
    up = np.zeros(experts[0].w_up.shape, dtype=np.float64)
    down = np.zeros(experts[0].w_down.shape, dtype=np.float64)
    # fixed summation order keeps the mean reproducible
    for e in experts:
        up += e.w_up
        down += e.w_down
    count = len(experts)
    return SharedExpert((up / count).astype(dtype), (down / count).astype(dtype))


def update_shared(experts: Sequence[ExpertWeights]) -> SharedExpert:
    """Recompute the shared expert; stands in for the backward-pass All-Reduce."""
    return init_shared(experts)


def _top_k(residual: np.ndarray, k: int) -> np.ndarray:
    # stable sort: equal magnitudes keep ascending index order
    order = np.argsort(-np.abs(residual), kind="stable")
    return np.sort(order[:k])


def sr_encode(expert: ExpertWeights, shared: ExpertWeights, config: CompressionConfig) -> CompressedResidual:
    if expert.shapes != shared.shapes:
        raise DomainError(f"expert shapes {expert.shapes} != shared {shared.shapes}")
    residual = expert.flat().astype(np.float64) - shared.flat().astype(np.float64)
    total = residual.size
    k = config.budget(total, expert.w_up.dtype.itemsize)
    if config.per_matrix:
        split = expert.w_up.size
        k_up = round(k * split / total)
        idx = np.concatenate([_top_k(residual[:split], k_up), split + _top_k(residual[split:], k - k_up)])
    else:
        idx = _top_k(residual, k)
    values = residual[idx].astype(_VALUE_DTYPES[config.value_width])
    return CompressedResidual(expert.shapes, idx.astype(np.int64), values, config.index_width, config.value_width)


def sr_decode(compressed: CompressedResidual, shared: ExpertWeights) -> ExpertWeights:
    """Scatter-add the residual straight into a copy of the shared expert."""
    if tuple(map(tuple, compressed.shapes)) != shared.shapes:
        raise CorruptionError(f"payload shapes {compressed.shapes} != shared {shared.shapes}")
    idx = compressed.indices
    if idx.size:
        if idx.min() < 0 or idx.max() >= shared.size:
            raise CorruptionError("residual index out of bounds")
        if np.any(np.diff(idx) <= 0):
            raise CorruptionError("residual indices must be strictly increasing")
    out = shared.flat().astype(np.float64)
    out[idx] += compressed.values
    return ExpertWeights.from_flat(out.astype(shared.w_up.dtype), shared.shapes)


def reconstruction_error(original: ExpertWeights, decoded: ExpertWeights) -> Tuple[float, float]:
    if original.shapes != decoded.shapes:
        raise DomainError("shape mismatch")
    diff = original.flat().astype(np.float64) - decoded.flat().astype(np.float64)
    if diff.size == 0:
        return 0.0, 0.0
    return float(np.max(np.abs(diff))), float(np.linalg.norm(diff))


def compression_ratio(compressed: CompressedResidual, dense_bytes: int, header: bool = True) -> float:
    sent = compressed.payload_bytes() if header else compressed.k * (compressed.index_width + compressed.value_width)
    return dense_bytes / sent if sent else math.inf


def residual_concentration(experts: Sequence[ExpertWeights]) -> dict:
    """Per matrix, std of residual entries over std of the original entries.

    Values well below 1 mean the experts share most of their weights. A
    population with zero spread yields ``None``.
    """
    if len(experts) < 2:
        raise DomainError("need at least two experts")
    shared = init_shared(experts)
    out = {}
    for name in ("w_up", "w_down"):
        original = np.stack([getattr(e, name) for e in experts]).astype(np.float64)
        residual = original - getattr(shared, name).astype(np.float64)
        spread = original.std()
        out[name] = None if spread == 0 else float(residual.std() / spread)
    return out


def synthetic_experts(
    count: int, hidden: int, inner: int, noise: float, seed: int = 0, dtype=np.float32
) -> List[ExpertWeights]:
    """Experts drawn as one shared base plus independent noise of scale ``noise``."""
    rng = np.random.default_rng(seed)
    base_up = rng.standard_normal((hidden, inner))
    base_down = rng.standard_normal((inner, hidden))
    return [
        ExpertWeights(
            (base_up + noise * rng.standard_normal((hidden, inner))).astype(dtype),
            (base_down + noise * rng.standard_normal((inner, hidden))).astype(dtype),
        )
        for _ in range(count)
    ]
