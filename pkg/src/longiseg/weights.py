"""Binary weight files.

Layout (all integers little-endian)::

    bytes 0..7    magic b"LSGW0001"
    bytes 8..11   uint32 manifest length M
    next M bytes  UTF-8 JSON manifest
    rest          payload: float32 little-endian tensors, C order, back to back

The manifest is ``{"format": "longiseg-weights", "version": 1, "tensors": [...]}``
where each tensor entry has ``name``, ``shape``, ``offset`` (bytes from the
start of the payload), ``nbytes`` and ``crc32`` of its payload bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .network import Network, NetworkConfig, build

MAGIC = b"LSGW0001"
FORMAT = "longiseg-weights"
VERSION = 1


class WeightFileError(Exception):
    pass


class ChecksumError(WeightFileError):
    pass


class CompletenessError(WeightFileError):
    pass


class WeightMismatchError(WeightFileError):
    pass


def encode_state(state: Dict[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(np.shape(arr)),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format": FORMAT, "version": VERSION, "tensors": entries}).encode()
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)


def decode_state(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise WeightFileError("not a longiseg weight file (bad magic)")
    (mlen,) = struct.unpack("<I", blob[8:12])
    if 12 + mlen > len(blob):
        raise ChecksumError("file truncated inside the manifest")
    try:
        manifest = json.loads(blob[12: 12 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise WeightFileError("unsupported weight file format/version")
    payload = blob[12 + mlen:]
    state, seen = {}, set()
    for e in manifest["tensors"]:
        name = e["name"]
        if name in seen:
            raise WeightFileError(f"duplicate tensor {name!r} in manifest")
        seen.add(name)
        start, n = int(e["offset"]), int(e["nbytes"])
        raw = payload[start: start + n]
        if len(raw) != n:
            raise ChecksumError(f"tensor {name!r}: payload truncated")
        if zlib.crc32(raw) != int(e["crc32"]):
            raise ChecksumError(f"tensor {name!r}: checksum mismatch")
        shape = tuple(int(s) for s in e["shape"])
        if int(np.prod(shape)) * 4 != n:
            raise WeightFileError(f"tensor {name!r}: shape {shape} disagrees with {n} bytes")
        state[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return state


def save_weights(net: Network, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_state(net.state_dict()))


def load_state(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_state(Path(path).read_bytes())


def load_weights(path: Union[str, Path], config: NetworkConfig, dtype=np.float32) -> Network:
    """Build a network for ``config`` and fill it from ``path``.

    Every parameter the config implies must be present exactly once with
    the right shape; the error names the first offending parameter.
    """
    state = load_state(path)
    net = build(config, 0, dtype)
    expected = net.state_dict()
    for name, arr in expected.items():
        if name not in state:
            raise CompletenessError(f"parameter {name!r} missing from weight file")
        if state[name].shape != arr.shape:
            raise WeightMismatchError(
                f"parameter {name!r}: file has shape {state[name].shape}, config implies {arr.shape}"
            )
    extra = [n for n in state if n not in expected]
    if extra:
        raise WeightMismatchError(f"parameter {extra[0]!r} is not part of this configuration")
    net.load_state_dict(state)
    return net
