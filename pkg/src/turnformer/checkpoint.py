import io
import logging
from pathlib import Path
from typing import IO, TYPE_CHECKING

import numpy as np

from turnformer.stream import (
    read_exact,
    read_f64le,
    read_uint8,
    read_uint16le,
    read_uint32le,
    write_f64le,
    write_uint8,
    write_uint16le,
    write_uint32le,
)
from turnformer.tensor import Tensor

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping

    from turnformer.stream import FilePath

logger = logging.getLogger(__name__)

MAGIC = b'TFCK'
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, path: 'FilePath', message: str) -> None:
        super().__init__(f'checkpoint {path}: {message}')
        self.path = path


def encode_checkpoint(params: 'Mapping[str, Tensor]', digest: str) -> bytes:
    out = bytearray(MAGIC)
    out += write_uint16le(FORMAT_VERSION)
    encoded_digest = digest.encode('ascii')
    out += write_uint16le(len(encoded_digest)) + encoded_digest
    out += write_uint32le(len(params))
    for name, param in params.items():
        encoded_name = name.encode('utf-8')
        out += write_uint16le(len(encoded_name)) + encoded_name
        out += write_uint8(param.ndim)
        out += b''.join(write_uint32le(extent) for extent in param.shape)
        out += write_f64le(param.data.reshape(-1))
    return bytes(out)


def read_header(stream: IO[bytes]) -> tuple[int, str]:
    magic = read_exact(stream, len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f'bad magic {magic!r}')
    version = read_uint16le(stream)
    digest = read_exact(stream, read_uint16le(stream)).decode('ascii')
    return version, digest


def read_parameters(stream: IO[bytes]) -> 'Iterator[tuple[str, Tensor]]':
    for _ in range(read_uint32le(stream)):
        name = read_exact(stream, read_uint16le(stream)).decode('utf-8')
        shape = tuple(read_uint32le(stream) for _ in range(read_uint8(stream)))
        values = read_f64le(stream, int(np.prod(shape, dtype=np.int64)))
        yield name, Tensor(values.reshape(shape), requires_grad=True)


def save_checkpoint(
    params: 'Mapping[str, Tensor]',
    digest: str,
    path: 'FilePath',
) -> None:
    path = Path(path)
    path.write_bytes(encode_checkpoint(params, digest))
    logger.info('saved %d parameters to %s', len(params), path)


def load_checkpoint(
    path: 'FilePath',
    expected_digest: str | None = None,
) -> dict[str, Tensor]:
    path = Path(path)
    with io.BytesIO(path.read_bytes()) as stream:
        try:
            version, digest = read_header(stream)
            if version != FORMAT_VERSION:
                raise CheckpointError(path, f'unsupported format version {version}')
            if expected_digest is not None and digest != expected_digest:
                raise CheckpointError(
                    path,
                    f'model config digest {digest} does not match {expected_digest}',
                )
            params = dict(read_parameters(stream))
        except CheckpointError:
            raise
        except ValueError as exc:
            raise CheckpointError(path, str(exc)) from exc
        rest = stream.read()
    if rest:
        raise CheckpointError(path, f'{len(rest)} trailing bytes')
    return params
