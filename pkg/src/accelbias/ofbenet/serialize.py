"""Model file format.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"OFBENET1"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header (sorted keys)
    then                 tensors as little-endian float64, C order,
                         in the order listed by header["tensors"]

The header carries ``schema_version``, the network configuration (channel
plan, kernel size, pool, hidden width, keep probability, batch-norm epsilon
and momentum, LeakyReLU slope, window length, input scale), the
initialisation ``seed`` and ``tensors``: a list of ``{"name", "shape"}``.
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import ParseError
from .network import NetworkConfig, check_params, param_shapes

MAGIC = b"OFBENET1"
SCHEMA_VERSION = 1


def to_bytes(params, config: NetworkConfig, seed=None, extra=None) -> bytes:
    check_params(params, config)
    names = list(param_shapes(config))
    header = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "seed": seed,
        "dtype": "float64",
        "byteorder": "little",
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(blob)), blob]
    for n in names:
        parts.append(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes):
    if data[:8] != MAGIC:
        raise ParseError("not an OFBENet model file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt model header: {exc}") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported model schema {header.get('schema_version')!r}")
    config = NetworkConfig(**header["config"])
    offset = 16 + hlen
    params = OrderedDict()
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ParseError(f"model file truncated inside tensor {t['name']}")
        params[t["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise ParseError(f"{len(data) - offset} trailing bytes after the last tensor")
    check_params(params, config)
    return params, config, header


def save_model(path, params, config, seed=None, extra=None):
    Path(path).write_bytes(to_bytes(params, config, seed, extra))


def load_model(path):
    """Return ``(params, config, header)``."""
    return from_bytes(Path(path).read_bytes())
