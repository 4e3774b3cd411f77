"""Fixed-point arithmetic and the integer gadgets used by verification.

All protocol arithmetic runs on signed two's-complement integers scaled
by 2**16 ("raw" values). A raw value is legal while |raw| < 2**62, which
leaves headroom for 128-bit exact intermediates. For modular checks the
raws embed into the prime field Z_p with p = 2**61 - 1; the embedding
round-trips only for |raw| < p/2, so verified pipelines keep every
committed value inside that window and reject anything outside it.

The gadgets mirror how an arithmetic-circuit verifier would check the
nonlinear steps:

* sqrt: x is accepted as sqrt(y) when x^2 <= y << f and (x+1)^2 >= y << f,
  i.e. correctness up to one least-significant bit.
* div: c with remainder witness r is accepted as a/b when
  a << f == b*c + r with 0 <= r < b.

Both checks are exact integer comparisons; no floats are involved.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from pocmarket.errors import DomainError, Overflow

FRACTION_BITS = 16
SCALE = 1 << FRACTION_BITS
RAW_LIMIT = 1 << 62
PRIME = (1 << 61) - 1
_HALF_PRIME = PRIME // 2


def _check_raw(raw: int) -> int:
    if not -RAW_LIMIT < raw < RAW_LIMIT:
        raise Overflow(f"raw value {raw} outside (+-2^62)")
    return raw


@dataclass(frozen=True)
class FixedPoint:
    """A real number stored as raw = round(value * 2**16)."""

    raw: int

    def __post_init__(self):
        _check_raw(self.raw)

    @classmethod
    def from_real(cls, value: float) -> "FixedPoint":
        if not math.isfinite(value):
            raise DomainError(f"cannot encode {value!r}")
        return cls(_check_raw(round(value * SCALE)))

    def to_real(self) -> float:
        return self.raw / SCALE

    def __add__(self, other: "FixedPoint") -> "FixedPoint":
        return FixedPoint(_check_raw(self.raw + other.raw))

    def __sub__(self, other: "FixedPoint") -> "FixedPoint":
        return FixedPoint(_check_raw(self.raw - other.raw))

    def __neg__(self) -> "FixedPoint":
        return FixedPoint(-self.raw)

    def __repr__(self):
        return f"FixedPoint({self.raw} ~ {self.to_real():.6f})"


ZERO = FixedPoint(0)
ONE = FixedPoint(SCALE)


def fxp_mul(a: FixedPoint, b: FixedPoint) -> FixedPoint:
    """Multiply, rounding the exact product toward zero."""
    prod = a.raw * b.raw
    if prod >= 0:
        raw = prod >> FRACTION_BITS
    else:
        raw = -((-prod) >> FRACTION_BITS)
    return FixedPoint(_check_raw(raw))


# -- sqrt gadget --------------------------------------------------------------

def prove_sqrt(y: FixedPoint) -> FixedPoint:
    """Honest witness: the floor square root of y at raw scale."""
    if y.raw < 0:
        raise DomainError("sqrt of negative value")
    return FixedPoint(math.isqrt(y.raw << FRACTION_BITS))


def check_sqrt(y: FixedPoint, x: FixedPoint) -> bool:
    """Accept x as sqrt(y) up to one LSB: x^2 <= y<<f <= (x+1)^2."""
    if y.raw < 0 or x.raw < 0:
        raise DomainError("sqrt check needs nonnegative operands")
    target = y.raw << FRACTION_BITS
    return x.raw * x.raw <= target <= (x.raw + 1) * (x.raw + 1)


def isqrt_check(target: int, x: int) -> bool:
    """Raw-integer form of the sqrt gadget: x == isqrt(target) up to slack."""
    if target < 0 or x < 0:
        return False
    return x * x <= target <= (x + 1) * (x + 1)


# -- division gadget ----------------------------------------------------------

def div_witness(a: FixedPoint, b: FixedPoint) -> tuple[FixedPoint, int]:
    """Honest witness for a/b: quotient at raw scale plus integer remainder."""
    if b.raw <= 0:
        raise DomainError("division witness needs b > 0")
    num = a.raw << FRACTION_BITS
    c, r = divmod(num, b.raw)
    return FixedPoint(_check_raw(c)), r


def check_div(a: FixedPoint, b: FixedPoint, c: FixedPoint, r: int) -> bool:
    """Accept c as a/b when a<<f == b*c + r with 0 <= r < b."""
    if b.raw <= 0:
        raise DomainError("division check needs b > 0")
    if not 0 <= r < b.raw:
        return False
    return (a.raw << FRACTION_BITS) == b.raw * c.raw + r


def divmod_witness(num: int, den: int) -> tuple[int, int]:
    """Raw-integer floor division with remainder witness (den > 0)."""
    if den <= 0:
        raise DomainError("divisor must be positive")
    q, r = divmod(num, den)
    return q, r


# -- prime field --------------------------------------------------------------

def encode(x: FixedPoint) -> int:
    """Embed a raw value into Z_p. Injective only for |raw| < p/2."""
    if not -_HALF_PRIME < x.raw < _HALF_PRIME:
        raise Overflow(f"raw {x.raw} outside field embedding range")
    return x.raw % PRIME

def decode(e: int) -> FixedPoint:
    if not 0 <= e < PRIME:
        raise DomainError(f"{e} is not a canonical field element")
    raw = e if e <= _HALF_PRIME else e - PRIME
    return FixedPoint(raw)


def encode_vec(raws: np.ndarray) -> np.ndarray:
    """Embed an int64 raw vector into Z_p (int64, values in [0, p))."""
    arr = np.ascontiguousarray(raws, dtype=np.int64)
    if arr.size:
        lo = int(arr.min())
        hi = int(arr.max())
        if lo <= -_HALF_PRIME or hi >= _HALF_PRIME:
            raise Overflow("vector entry outside field embedding range")
    return arr % PRIME


def decode_vec(elems: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(elems, dtype=np.int64)
    if arr.size and (int(arr.min()) < 0 or int(arr.max()) >= PRIME):
        raise DomainError("non-canonical field element in vector")
    out = arr.copy()
    out[out > _HALF_PRIME] -= PRIME
    return out


def f_add(a: int, b: int) -> int:
    return (a + b) % PRIME


def f_sub(a: int, b: int) -> int:
    return (a - b) % PRIME


def f_mul(a: int, b: int) -> int:
    return (a * b) % PRIME


# -- wire format --------------------------------------------------------------
#
# Raw values travel as 8-byte little-endian signed integers; vectors are
# length-prefixed with a u32 count. These byte strings are what gets
# hashed for commitments, so the format is frozen.

def pack_i64_vec(values) -> bytes:
    arr = np.ascontiguousarray(values, dtype=np.int64)
    if arr.ndim != 1:
        raise DomainError("pack_i64_vec expects a flat vector")
    return struct.pack("<I", arr.size) + arr.astype("<i8").tobytes()


def unpack_i64_vec(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise DomainError("truncated vector")
    (count,) = struct.unpack_from("<I", data, 0)
    need = 4 + 8 * count
    if len(data) != need:
        raise DomainError("vector length mismatch")
    return np.frombuffer(data, dtype="<i8", offset=4).astype(np.int64)


def pack_i64_mat(mat) -> bytes:
    arr = np.ascontiguousarray(mat, dtype=np.int64)
    if arr.ndim != 2:
        raise DomainError("pack_i64_mat expects a 2-d array")
    head = struct.pack("<II", arr.shape[0], arr.shape[1])
    return head + arr.astype("<i8").tobytes()


def unpack_i64_mat(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise DomainError("truncated matrix")
    rows, cols = struct.unpack_from("<II", data, 0)
    need = 8 + 8 * rows * cols
    if len(data) != need:
        raise DomainError("matrix length mismatch")
    flat = np.frombuffer(data, dtype="<i8", offset=8).astype(np.int64)
    return flat.reshape(rows, cols)


def pack_i128_mat(rows: list[list[int]]) -> bytes:
    """Gram matrices carry exact products that can exceed int64."""
    n = len(rows)
    m = len(rows[0]) if n else 0
    out = [struct.pack("<II", n, m)]
    lim = 1 << 127
    for row in rows:
        if len(row) != m:
            raise DomainError("ragged matrix")
        for v in row:
            if not -lim <= v < lim:
                raise Overflow("entry outside 128-bit range")
            out.append(int(v).to_bytes(16, "little", signed=True))
    return b"".join(out)


def unpack_i128_mat(data: bytes) -> list[list[int]]:
    if len(data) < 8:
        raise DomainError("truncated matrix")
    n, m = struct.unpack_from("<II", data, 0)
    need = 8 + 16 * n * m
    if len(data) != need:
        raise DomainError("matrix length mismatch")
    rows = []
    off = 8
    for _ in range(n):
        row = []
        for _ in range(m):
            row.append(int.from_bytes(data[off:off + 16], "little", signed=True))
            off += 16
        rows.append(row)
    return rows
