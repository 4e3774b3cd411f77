"""Model containers and exact linear algebra on raw fixed-point values.

A model is a named tuple of tensors flattened into one int64 raw vector;
the layout (layer names and shapes) travels with it so aggregation can
refuse mismatched operands. All reductions here are exact: products and
sums are accumulated as integers and any rescaling is a single floor
division whose remainder can be handed to a verifier as a witness.

The aggregation rule is the exact rational mean

    agg[j] = floor( sum_i s_i * m_i[j] / sum_i s_i )

with integer weights s_i. Scaling all weights by a common factor leaves
the result unchanged, so dataset sizes can be used verbatim, and equal
weights reduce to the plain (floored) mean exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from pocmarket import _kernels, fxp
from pocmarket.errors import (
    DomainError,
    EmptyInput,
    LayoutMismatch,
    Overflow,
    ShapeMismatch,
    ZeroVector,
)

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def _layout_size(layout: Layout) -> int:
    total = 0
    for _, shape in layout:
        count = 1
        for dim in shape:
            count *= int(dim)
        total += count
    return total


@dataclass(eq=False)
class ModelWeights:
    """Flattened fixed-point model with a named layer layout."""

    layout: Layout
    raws: np.ndarray

    def __post_init__(self):
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        names = [n for n, _ in layout]
        if len(set(names)) != len(names):
            raise LayoutMismatch("duplicate layer names")
        arr = np.ascontiguousarray(self.raws, dtype=np.int64)
        if arr.ndim != 1:
            raise ShapeMismatch("raws must be flat")
        if arr.size != _layout_size(layout):
            raise ShapeMismatch(
                f"layout wants {_layout_size(layout)} params, got {arr.size}"
            )
        if arr.size:
            lo, hi = int(arr.min()), int(arr.max())
            if lo <= -fxp.RAW_LIMIT or hi >= fxp.RAW_LIMIT:
                raise Overflow("weight raw outside representable range")
        arr.setflags(write=False)
        self.layout = layout
        self.raws = arr

    @property
    def n_params(self) -> int:
        return int(self.raws.size)

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.raws, other.raws)

    def get(self, name: str) -> np.ndarray:
        """Raw tensor view for one layer."""
        off = 0
        for lname, shape in self.layout:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if lname == name:
                return self.raws[off:off + count].reshape(shape)
            off += count
        raise KeyError(name)

    @classmethod
    def zeros(cls, layout: Layout) -> "ModelWeights":
        return cls(layout, np.zeros(_layout_size(tuple(layout)), dtype=np.int64))

    @classmethod
    def from_real(cls, layout: Layout, tensors: dict[str, np.ndarray]) -> "ModelWeights":
        parts = []
        for name, shape in layout:
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name}: non-finite value")
            parts.append(np.rint(arr.reshape(-1) * fxp.SCALE).astype(np.int64))
        return cls(tuple(layout), np.concatenate(parts) if parts else np.zeros(0, np.int64))

    def to_real(self) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in self.layout:
            out[name] = self.get(name).astype(np.float64) / fxp.SCALE
        return out

    def serialize(self) -> bytes:
        head = [struct.pack("<I", len(self.layout))]
        for name, shape in self.layout:
            nb = name.encode("utf-8")
            head.append(struct.pack("<H", len(nb)))
            head.append(nb)
            head.append(struct.pack("<B", len(shape)))
            for dim in shape:
                head.append(struct.pack("<I", dim))
        return b"".join(head) + self.raws.astype("<i8").tobytes()

    @classmethod
    def deserialize(cls, data: bytes) -> "ModelWeights":
        try:
            (n_layers,) = struct.unpack_from("<I", data, 0)
            off = 4
            layout = []
            for _ in range(n_layers):
                (nlen,) = struct.unpack_from("<H", data, off)
                off += 2
                name = data[off:off + nlen].decode("utf-8")
                off += nlen
                (ndim,) = struct.unpack_from("<B", data, off)
                off += 1
                dims = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
                off += 4 * ndim
                layout.append((name, tuple(dims)))
            layout = tuple(layout)
            count = _layout_size(layout)
            if len(data) != off + 8 * count:
                raise DomainError("model byte length mismatch")
            raws = np.frombuffer(data, dtype="<i8", offset=off).astype(np.int64)
        except (struct.error, UnicodeDecodeError) as exc:
            raise DomainError(f"malformed model bytes: {exc}") from exc
        return cls(layout, raws)


@dataclass(eq=False)
class Matrix:
    """Dense fixed-point matrix (raw int64 entries)."""

    raws: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.raws, dtype=np.int64)
        if arr.ndim != 2:
            raise ShapeMismatch("matrix must be 2-d")
        arr.setflags(write=False)
        self.raws = arr

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.raws.shape[0]), int(self.raws.shape[1]))

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return np.array_equal(self.raws, other.raws)

    @classmethod
    def from_real(cls, values) -> "Matrix":
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("non-finite matrix entry")
        return cls(np.rint(arr * fxp.SCALE).astype(np.int64))

    def to_real(self) -> np.ndarray:
        return self.raws.astype(np.float64) / fxp.SCALE

    def serialize(self) -> bytes:
        return fxp.pack_i64_mat(self.raws)

    @classmethod
    def deserialize(cls, data: bytes) -> "Matrix":
        return cls(fxp.unpack_i64_mat(data))


def _same_layout(models) -> Layout:
    layout = models[0].layout
    for m in models[1:]:
        if m.layout != layout:
            raise LayoutMismatch("models disagree on layout")
    return layout


def stack_raws(models) -> np.ndarray:
    """(L, n) int64 matrix of the models' raw vectors."""
    _same_layout(models)
    return np.stack([m.raws for m in models])


# -- similarity ----------------------------------------------------------------

def sq_dist(u: ModelWeights, v: ModelWeights) -> int:
    """Exact squared L2 distance at raw scale (units of 2**-32)."""
    _same_layout([u, v])
    d = u.raws - v.raws
    return _kernels.sq_norm_rows(d[np.newaxis, :])[0]


def l2_distance(u: ModelWeights, v: ModelWeights) -> float:
    import math

    return math.sqrt(sq_dist(u, v)) / fxp.SCALE


def cosine_similarity(u: ModelWeights, v: ModelWeights) -> float:
    import math

    _same_layout([u, v])
    nu = _kernels.dot_exact(u.raws, u.raws)
    nv = _kernels.dot_exact(v.raws, v.raws)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine of zero vector")
    p = _kernels.dot_exact(u.raws, v.raws)
    return p / (math.sqrt(nu) * math.sqrt(nv))


def cosine_below(u_raws: np.ndarray, v_raws: np.ndarray, gamma_raw: int) -> bool:
    """Exact test for cos(u, v) < gamma_raw / 2**16 on raw vectors.

    Square-root free: the comparison is squared after the sign cases are
    split, so the verdict is an integer identity a verifier can replay.
    """
    nu = _kernels.dot_exact(u_raws, u_raws)
    nv = _kernels.dot_exact(v_raws, v_raws)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine of zero vector")
    p = _kernels.dot_exact(u_raws, v_raws)
    rhs = gamma_raw * gamma_raw * nu * nv
    lhs = p * p * (fxp.SCALE * fxp.SCALE)
    if gamma_raw >= 0:
        return p < 0 or lhs < rhs
    return p < 0 and lhs > rhs


# -- aggregation ---------------------------------------------------------------

def _int_weights(weights) -> list[int]:
    out = []
    for w in weights:
        if isinstance(w, (int, np.integer)):
            s = int(w)
        elif isinstance(w, float):
            if not np.isfinite(w):
                raise DomainError("non-finite weight")
            s = round(w * fxp.SCALE)
        else:
            raise DomainError(f"unsupported weight type {type(w)!r}")
        if s < 0:
            raise DomainError("negative weight")
        out.append(s)
    return out


def aggregate_witness(models, weights):
    """Exact weighted mean with verifier witnesses.

    Returns (aggregate, remainders, int_weights, divisor) satisfying
    sum_i s_i*m_i[j] == divisor*agg[j] + rem[j], 0 <= rem[j] < divisor.
    """
    models = list(models)
    if not models:
        raise EmptyInput("no models to aggregate")
    if len(weights) != len(models):
        raise ShapeMismatch("one weight per model required")
    layout = _same_layout(models)
    s = _int_weights(weights)
    divisor = sum(s)
    if divisor <= 0:
        raise DomainError("weights must sum to a positive value")
    stacked = stack_raws(models)
    agg, rem = _kernels.weighted_sum_floor(
        stacked, np.asarray(s, dtype=np.int64), divisor
    )
    return ModelWeights(layout, agg), rem, s, divisor


def weighted_aggregate(models, weights) -> ModelWeights:
    agg, _, _, _ = aggregate_witness(models, weights)
    return agg


def matmul_witness(a: Matrix, b: Matrix):
    """Fixed-point matrix product with per-entry remainder witnesses."""
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dims {a.shape[1]} != {b.shape[0]}")
    c, r = _kernels.matmul_floor(a.raws, b.raws)
    return Matrix(c), r


def matmul(a: Matrix, b: Matrix) -> Matrix:
    c, _ = matmul_witness(a, b)
    return c
