"""Dense row-major tensors and the ".ebt" tensor container."""

import enum
import struct
from math import prod
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from bioslim.errors import BadMagic, LengthMismatch, ModelFileError, OutOfBounds, ShapeMismatch

TENSOR_MAGIC = b"EBT1"

I8_QMAX = 127
I32_MIN = -(2**31)
I32_MAX = 2**31 - 1


class DType(enum.Enum):
    F32 = 0
    I8 = 1
    I32 = 2

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY_DTYPES[self]

    @property
    def itemsize(self) -> int:
        return self.numpy.itemsize

    @classmethod
    def of(cls, array: np.ndarray) -> "DType":
        for dtype, np_dtype in _NUMPY_DTYPES.items():
            if array.dtype == np_dtype:
                return dtype
        raise TypeError(f"unsupported element type {array.dtype}")


_NUMPY_DTYPES = {
    DType.F32: np.dtype("<f4"),
    DType.I8: np.dtype("i1"),
    DType.I32: np.dtype("<i4"),
}


class Tensor:
    """Immutable by convention; only ``accumulate_patch`` writes into a tensor."""

    __slots__ = ("_array",)

    def __init__(self, array: np.ndarray):
        array = np.ascontiguousarray(array)
        DType.of(array)
        if array.ndim < 1 or any(extent < 1 for extent in array.shape):
            raise ShapeMismatch(f"tensor extents must be >= 1 with rank >= 1, got {array.shape}")
        self._array = array

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def dtype(self) -> DType:
        return DType.of(self._array)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self._array.shape)

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def numel(self) -> int:
        return int(self._array.size)

    @property
    def nbytes(self) -> int:
        return int(self._array.nbytes)

    def data(self) -> list:
        return self._array.reshape(-1).tolist()

    def __getitem__(self, index):
        value = self._array[index]
        return value.item() if np.ndim(value) == 0 else value

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self._array.tobytes() == other._array.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor({self.dtype.name}, shape={list(self.shape)})"


def create(shape: Sequence[int], dtype: DType, data: Iterable) -> Tensor:
    shape = tuple(int(extent) for extent in shape)
    values = np.asarray(list(data) if not isinstance(data, np.ndarray) else data)
    if values.size != prod(shape):
        raise LengthMismatch(f"{values.size} elements given for shape {list(shape)}")
    return Tensor(np.array(values, dtype=dtype.numpy).reshape(shape))


def as_array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    return value.array if isinstance(value, Tensor) else np.asarray(value)


def round_half_even(values: np.ndarray) -> np.ndarray:
    # np.rint rounds ties to even on every platform
    return np.rint(values)


def saturate(values: np.ndarray, to: DType) -> np.ndarray:
    if to is DType.F32:
        return values.astype(np.float32)
    if to is DType.I8:
        low, high = -I8_QMAX, I8_QMAX
    else:
        low, high = I32_MIN, I32_MAX
    if np.issubdtype(values.dtype, np.floating):
        values = round_half_even(values.astype(np.float64))
    return np.clip(values, low, high).astype(to.numpy)


def cast_saturating(t: Tensor, to: DType) -> Tensor:
    return Tensor(saturate(t.array, to))


def _check_window(shape: Sequence[int], start: Sequence[int], size: Sequence[int]):
    if len(start) != len(shape) or len(size) != len(shape):
        raise OutOfBounds(f"window rank {len(start)} does not match tensor rank {len(shape)}")
    for axis, (extent, first, length) in enumerate(zip(shape, start, size)):
        if first < 0 or length < 1 or first + length > extent:
            raise OutOfBounds(
                f"axis {axis}: window [{first}, {first + length}) outside extent {extent}"
            )


def _window(start: Sequence[int], size: Sequence[int]) -> Tuple[slice, ...]:
    return tuple(slice(first, first + length) for first, length in zip(start, size))


def extract_patch(t: Tensor, start: Sequence[int], size: Sequence[int]) -> Tensor:
    _check_window(t.shape, start, size)
    return Tensor(t.array[_window(start, size)].copy())


def accumulate_patch(canvas: Union[Tensor, np.ndarray], counts: Union[Tensor, np.ndarray], patch: Tensor, start: Sequence[int]):
    """Add ``patch`` into ``canvas`` at ``start`` and bump ``counts`` there.

    Plain float64 arrays are accepted for the canvas so long blends stay exact.
    """
    target, seen = as_array(canvas), as_array(counts)
    if target.shape != seen.shape:
        raise ShapeMismatch(f"counts {list(seen.shape)} do not match canvas {list(target.shape)}")
    _check_window(target.shape, start, patch.shape)
    region = _window(start, patch.shape)
    target[region] += patch.array.astype(target.dtype)
    seen[region] += 1
    return canvas, counts


def zeros(shape: Sequence[int], dtype: DType = DType.F32) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype.numpy))


def save_tensor(path: Union[str, Path], t: Tensor) -> None:
    header = TENSOR_MAGIC + struct.pack("<BB", t.dtype.value, t.rank)
    header += struct.pack(f"<{t.rank}Q", *t.shape)
    Path(path).write_bytes(header + t.array.astype(t.dtype.numpy).tobytes(order="C"))


def load_tensor(path: Union[str, Path]) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise BadMagic(f"{path}: not a tensor container")
    try:
        dtype_code, rank = struct.unpack_from("<BB", raw, 4)
        dtype = DType(dtype_code)
        shape = struct.unpack_from(f"<{rank}Q", raw, 6)
    except (struct.error, ValueError) as e:
        raise ModelFileError(f"{path}: malformed tensor header ({e})") from e
    payload = raw[6 + 8 * rank:]
    expected = prod(shape) * dtype.itemsize
    if len(payload) != expected:
        raise LengthMismatch(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return Tensor(np.frombuffer(payload, dtype=dtype.numpy).reshape(shape).copy())
