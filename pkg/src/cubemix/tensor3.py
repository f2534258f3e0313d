"""Rank-3 feature cubes (sequence x modality x channel) and axis-wise mixing.

Storage is a C-contiguous numpy array with axis order (l, m, d). A cube is
read-only once built; every operation returns a new cube and rejects
non-finite results instead of propagating them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

_INDEX_MAX = np.iinfo(np.intp).max

# Precision modes: 64-bit for gradient checking, 32-bit for training.
FLOAT64 = np.float64
FLOAT32 = np.float32


class Axis(enum.IntEnum):
    SEQUENCE = 0
    MODALITY = 1
    CHANNEL = 2

    @property
    def letter(self) -> str:
        return "LMD"[self]

    @classmethod
    def parse(cls, value) -> "Axis":
        if isinstance(value, Axis):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().upper().rstrip("'")
        aliases = {"L": 0, "SEQUENCE": 0, "M": 1, "MODALITY": 1, "D": 2, "CHANNEL": 2}
        if key not in aliases:
            raise ValueError(f"unknown axis {value!r}")
        return cls(aliases[key])


@dataclass(frozen=True)
class Shape3:
    l: int
    m: int
    d: int

    def __post_init__(self):
        for name in ("l", "m", "d"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeError(f"extent {name}={v!r} must be a positive integer")
            object.__setattr__(self, name, int(v))
        if self.l * self.m * self.d > _INDEX_MAX:
            raise ShapeError(f"shape {self.as_tuple()} overflows the index range")

    @classmethod
    def of(cls, value) -> "Shape3":
        if isinstance(value, Shape3):
            return value
        l, m, d = value
        return cls(l, m, d)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.l, self.m, self.d)

    def size(self) -> int:
        return self.l * self.m * self.d

    def __getitem__(self, axis) -> int:
        return self.as_tuple()[int(axis)]

    def replace(self, axis, extent: int) -> "Shape3":
        dims = list(self.as_tuple())
        dims[int(axis)] = extent
        return Shape3(*dims)


def check_finite(arr: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


class Tensor3:
    """Immutable (l, m, d) cube of 32- or 64-bit floats."""

    __slots__ = ("_data", "_shape")

    def __init__(self, data, dtype=FLOAT64):
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(FLOAT32), np.dtype(FLOAT64)):
            raise TypeError(f"unsupported precision {dtype}")
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.ndim != 3:
            raise ShapeError(f"expected a rank-3 array, got ndim={arr.ndim}")
        self._shape = Shape3(*arr.shape)
        check_finite(arr, "tensor data")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> Shape3:
        return self._shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def array(self) -> np.ndarray:
        """Read-only view of the underlying (l, m, d) array."""
        return self._data

    def __getitem__(self, idx):
        return self._data[idx]

    def __eq__(self, other):
        if not isinstance(other, Tensor3):
            return NotImplemented
        return self._shape == other._shape and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"Tensor3(shape={self._shape.as_tuple()}, dtype={self.dtype.name})"


def zeros(shape, dtype=FLOAT64) -> Tensor3:
    shape = Shape3.of(shape)
    return Tensor3(np.zeros(shape.as_tuple(), dtype=dtype), dtype=dtype)


def from_slices(slices: Sequence, dtype=FLOAT64) -> Tensor3:
    """Stack per-modality L x D matrices along a new middle axis."""
    if len(slices) == 0:
        raise ShapeError("from_slices needs at least one modality")
    mats = [np.asarray(s, dtype=dtype) for s in slices]
    first = mats[0].shape
    for i, mat in enumerate(mats):
        if mat.ndim != 2:
            raise ShapeError(f"slice {i} is not a matrix (ndim={mat.ndim})")
        if mat.shape != first:
            raise ShapeError(f"slice {i} has shape {mat.shape}, expected {first}")
    return Tensor3(np.stack(mats, axis=1), dtype=dtype)


def mix_array(x: np.ndarray, w: np.ndarray, b: np.ndarray, axis: int) -> np.ndarray:
    """Apply ``w.T @ fiber + b`` to every fiber of ``x`` along array axis ``axis``."""
    moved = np.moveaxis(x, axis, -1)
    with np.errstate(over="ignore", invalid="ignore"):
        out = moved @ w + b
    return np.moveaxis(out, -1, axis)


def axis_matmul(x: Tensor3, w, b, axis) -> Tensor3:
    axis = Axis.parse(axis)
    w = np.asarray(w, dtype=x.dtype)
    b = np.asarray(b, dtype=x.dtype)
    if w.ndim != 2 or b.ndim != 1:
        raise ShapeError("weight must be a matrix and bias a vector")
    a_in, a_out = w.shape
    if x.shape[axis] != a_in:
        raise ShapeError(
            f"extent {x.shape[axis]} along {axis.name} does not match weight rows {a_in}"
        )
    if b.shape[0] != a_out:
        raise ShapeError(f"bias length {b.shape[0]} != weight columns {a_out}")
    out = mix_array(x.array, w, b, int(axis))
    check_finite(out, "axis_matmul")
    return Tensor3(out, dtype=x.dtype)


def add(x: Tensor3, y: Tensor3) -> Tensor3:
    if x.shape != y.shape:
        raise ShapeError(f"cannot add {x.shape.as_tuple()} and {y.shape.as_tuple()}")
    out = x.array + y.array
    check_finite(out, "add")
    return Tensor3(out, dtype=x.dtype)


def map(x: Tensor3, f: Callable) -> Tensor3:  # noqa: A001 - mirrors the elementwise op name
    # numpy ufuncs and array lambdas apply directly; plain scalar callables get vectorized
    try:
        out = np.asarray(f(x.array), dtype=x.dtype)
    except (TypeError, ValueError):
        out = None
    if out is None or out.shape != x.array.shape:
        out = np.vectorize(f, otypes=[x.dtype])(x.array)
    check_finite(out, "map")
    return Tensor3(out, dtype=x.dtype)


def flatten(x: Tensor3) -> np.ndarray:
    """Row-major (l, m, d) vector; index (l*M + m)*D + d."""
    return x.array.reshape(-1).copy()
