"""Binary weight files: magic "ERDE", version, then named little-endian tensors.

Layout (all integers little-endian):
    magic        4 bytes  b"ERDE"
    version      u32
    tensor count u32
    per tensor:  name length u16, UTF-8 name, dtype code u8, rank u8,
                 dims as u32 each, raw element bytes (C order, little-endian)

dtype codes: 1 = float32, 2 = float64, 3 = uint8.  The network architecture
travels inside the container as a uint8 JSON tensor named "__arch__", which is
what lets load_network rebuild a model from the file alone.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .nn import ArchConfig, build_network

MAGIC = b"ERDE"
FORMAT_VERSION = 1
ARCH_KEY = "__arch__"

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODE_FOR_KIND = {("f", 4): 1, ("f", 8): 2, ("u", 1): 3}


class WeightFormatError(ValueError):
    """Base class for weight-file format violations."""


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class DuplicateNameError(WeightFormatError):
    pass


def _dtype_code(arr):
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_FOR_KIND:
        raise WeightFormatError(f"unsupported dtype {arr.dtype} for weight files")
    return _CODE_FOR_KIND[key]


def write_tensor_store(path, arrays):
    """Write an ordered mapping of name -> ndarray in the container format."""
    names = list(arrays)
    if len(set(names)) != len(names):
        raise DuplicateNameError("duplicate tensor name in store")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(arrays[name])
            code = _dtype_code(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"truncated file while reading {what}")
    return data


def read_tensor_store(path):
    """Read a container back into an ordered dict of name -> ndarray."""
    out = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"format version {version} unsupported (expected {FORMAT_VERSION})")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            if name in out:
                raise DuplicateNameError(f"duplicate tensor name {name!r}")
            code, rank = struct.unpack("<BB", _read_exact(f, 2, "dtype/rank"))
            if code not in _DTYPE_CODES:
                raise WeightFormatError(f"unknown dtype code {code} for {name!r}")
            dims = struct.unpack(
                f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name!r}"))
            dtype = _DTYPE_CODES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            payload = _read_exact(f, nbytes, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        trailing = f.read(1)
        if trailing:
            raise WeightFormatError("trailing bytes after last tensor")
    return out


def save_weights(net, path):
    """Persist a network's parameters, BN statistics, and architecture."""
    arrays = dict(net.state_arrays())
    if ARCH_KEY in arrays:
        raise DuplicateNameError(f"{ARCH_KEY!r} is reserved")
    blob = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    arrays[ARCH_KEY] = np.frombuffer(blob, dtype=np.uint8)
    write_tensor_store(path, arrays)


def load_network(path):
    """Rebuild a network from a weight file; round trip is bit-exact."""
    arrays = read_tensor_store(path)
    if ARCH_KEY not in arrays:
        raise WeightFormatError(f"weight file lacks the {ARCH_KEY!r} architecture record")
    config = ArchConfig.from_dict(json.loads(arrays.pop(ARCH_KEY).tobytes().decode("utf-8")))
    dtypes = {a.dtype for a in arrays.values()}
    dtype = np.float64 if np.dtype(np.float64) in dtypes else np.float32
    net = build_network(config, seed=0, dtype=dtype)
    net.load_state(arrays)
    return net


load_weights = load_network
