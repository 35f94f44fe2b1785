import os
import struct
from typing import IO, TYPE_CHECKING, cast

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import NDArray

UINT8 = struct.Struct('<B')
UINT16LE = struct.Struct('<H')
UINT32LE = struct.Struct('<I')

FLOAT32LE = np.dtype('<f4')
FLOAT64LE = np.dtype('<f8')

FilePath = str | os.PathLike[str]


class TruncatedStreamError(ValueError):
    def __init__(self, expected: int, actual: int) -> None:
        super().__init__(f'expected {expected} bytes but stream ended after {actual}')
        self.expected = expected
        self.actual = actual


def read_exact(stream: IO[bytes], size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise TruncatedStreamError(size, len(data))
    return data


def read_uint8(stream: IO[bytes]) -> int:
    return cast(int, UINT8.unpack(read_exact(stream, UINT8.size))[0])


def read_uint16le(stream: IO[bytes]) -> int:
    return cast(int, UINT16LE.unpack(read_exact(stream, UINT16LE.size))[0])


def read_uint32le(stream: IO[bytes]) -> int:
    return cast(int, UINT32LE.unpack(read_exact(stream, UINT32LE.size))[0])


def write_uint8(num: int) -> bytes:
    return UINT8.pack(num)


def write_uint16le(num: int) -> bytes:
    return UINT16LE.pack(num)


def write_uint32le(num: int) -> bytes:
    return UINT32LE.pack(num)


def read_f64le(stream: IO[bytes], count: int) -> 'NDArray[np.float64]':
    raw = read_exact(stream, count * FLOAT64LE.itemsize)
    return np.frombuffer(raw, dtype=FLOAT64LE).astype(np.float64)


def write_f64le(values: 'NDArray[np.floating]') -> bytes:
    return np.ascontiguousarray(values, dtype=FLOAT64LE).tobytes()


def read_f32le_matrix(raw: bytes, rows: int, cols: int) -> 'NDArray[np.float32]':
    return np.frombuffer(raw, dtype=FLOAT32LE).astype(np.float32).reshape(rows, cols)


def write_f32le_matrix(matrix: 'NDArray[np.floating]') -> bytes:
    return np.ascontiguousarray(matrix, dtype=FLOAT32LE).tobytes()


def create_directory(name: FilePath) -> None:
    os.makedirs(name, exist_ok=True)
