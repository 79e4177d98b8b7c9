"""Binary checkpoint container for :class:`EsimParams` plus its vocabulary.

Layout (all integers little-endian)::

    magic        8 bytes   b"ESIMCKPT"
    version      u32
    d, r, d_h    u32 x 3
    vocab_size   u32
    seed         u64
    n_tokens     u32, then n_tokens x (u32 byte length, UTF-8 bytes)
    n_arrays     u32, then per array:
        name     u32 byte length, UTF-8 bytes
        ndim     u32, dims u32 x ndim
        data     float32 little-endian, row-major

The whole file is parsed and validated before anything is returned, so a
failed load never yields partially populated parameters.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .corpus import Vocab
from .esim import EsimParams, param_shapes

MAGIC = b"ESIMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def dumps(params: EsimParams, vocab: Vocab) -> bytes:
    if len(vocab) != params.vocab_size:
        raise ValueError(f"vocab has {len(vocab)} entries, params expect {params.vocab_size}")
    out = [MAGIC, struct.pack("<5IQ", VERSION, params.d, params.r, params.d_h, params.vocab_size,
                              params.seed)]
    out.append(struct.pack("<I", len(vocab)))
    for tok in vocab.itos:
        raw = tok.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    out.append(struct.pack("<I", len(params.arrays)))
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"truncated while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes):
    """Parse checkpoint bytes into ``(EsimParams, Vocab)``."""
    if buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic: not an ESIM checkpoint")
    rd = _Reader(buf)
    rd.take(len(MAGIC), "magic")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")
    d, r, d_h, vocab_size, seed = rd.unpack("<4IQ", "header")
    (n_tokens,) = rd.unpack("<I", "vocab size")
    tokens = []
    for k in range(n_tokens):
        (length,) = rd.unpack("<I", f"token {k}")
        tokens.append(rd.take(length, f"token {k}").decode("utf-8"))
    expected = param_shapes(d, r, d_h, vocab_size)
    (n_arrays,) = rd.unpack("<I", "array count")
    arrays = {}
    for k in range(n_arrays):
        (length,) = rd.unpack("<I", f"array {k} name")
        name = rd.take(length, f"array {k} name").decode("utf-8")
        (ndim,) = rd.unpack("<I", f"{name} rank")
        shape = rd.unpack(f"<{ndim}I", f"{name} shape")
        if expected.get(name) != tuple(shape):
            raise CheckpointError(f"unexpected array {name} with shape {shape}")
        count = int(np.prod(shape))
        data = np.frombuffer(rd.take(4 * count, f"{name} data"), dtype="<f4")
        arrays[name] = data.astype(np.float64).reshape(shape)
    if list(arrays) != list(expected):
        raise CheckpointError("parameter arrays missing or out of order")
    if rd.pos != len(buf):
        raise CheckpointError(f"{len(buf) - rd.pos} trailing bytes")
    if len(tokens) != vocab_size or tokens[:2] != Vocab().itos:
        raise CheckpointError("vocabulary does not match header")
    vocab = Vocab(tokens[2:])
    return EsimParams(d, r, d_h, vocab_size, seed, arrays), vocab


def atomic_write(path, data: bytes):
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: EsimParams, vocab: Vocab, path):
    atomic_write(path, dumps(params, vocab))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
