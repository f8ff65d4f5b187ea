"""Binary checkpoint container shared by float and 4-bit weights.

Layout (all integers little-endian)::

    magic    8 bytes  b"TVLMCKPT"
    version  u32
    meta_len u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count    u32, then per tensor:
        name_len u16, name (UTF-8)
        tag      u8    0 = f64, 1 = q4
        ndim     u8, then ndim × u32 shape
        offset   u64   from the start of the payload section
        nbytes   u64
    payload section

An f64 payload is the row-major array as ``<f8``. A q4 payload is
``group_size u32`` followed by scales ``<f8[m·k/G]``, zeros ``u8[m·k/G]`` and
the packed nibbles ``u8[ceil(m·k/2)]``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .quant import QuantizedTensor
from .tensor import Tensor

MAGIC = b"TVLMCKPT"
VERSION = 1
TAG_F64 = 0
TAG_Q4 = 1


def _q4_payload(q: QuantizedTensor) -> bytes:
    return (struct.pack("<I", q.group_size) + q.scales.astype("<f8").tobytes()
            + q.zeros.astype(np.uint8).tobytes() + q.packed.astype(np.uint8).tobytes())


def _q4_from(buf: bytes, shape) -> QuantizedTensor:
    m, k = shape
    (G,) = struct.unpack_from("<I", buf, 0)
    if G < 1 or k % G:
        raise ContractError(f"bad q4 group size {G} for shape {shape}")
    ng = m * (k // G)
    o = 4
    scales = np.frombuffer(buf, "<f8", ng, o).astype(np.float64).reshape(m, k // G)
    o += 8 * ng
    zeros = np.frombuffer(buf, np.uint8, ng, o).copy().reshape(m, k // G)
    o += ng
    packed = np.frombuffer(buf, np.uint8, (m * k + 1) // 2, o).copy()
    return QuantizedTensor((m, k), G, packed, scales, zeros)


def encode(state: dict, meta: dict | None = None) -> bytes:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(state):
        value = state[name]
        if isinstance(value, QuantizedTensor):
            tag, shape, blob = TAG_Q4, value.shape, _q4_payload(value)
        else:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            tag, shape, blob = TAG_F64, arr.shape, np.ascontiguousarray(arr, dtype="<f8").tobytes()
        raw = name.encode()
        entries.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, len(shape))
                       + struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<QQ", offset, len(blob)))
        payloads.append(blob)
        offset += len(blob)
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    head = MAGIC + struct.pack("<II", VERSION, len(meta_raw)) + meta_raw + struct.pack("<I", len(entries))
    return head + b"".join(entries) + b"".join(payloads)


def decode(buf: bytes) -> tuple[dict, dict]:
    """Returns ``(state, meta)``; f64 entries come back as numpy arrays."""
    if buf[:8] != MAGIC:
        raise ContractError("not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        o = 16
        meta = json.loads(buf[o:o + meta_len].decode())
        o += meta_len
        (count,) = struct.unpack_from("<I", buf, o)
        o += 4
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, o)
            o += 2
            name = buf[o:o + nlen].decode()
            o += nlen
            tag, ndim = struct.unpack_from("<BB", buf, o)
            o += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, o)
            o += 4 * ndim
            off, nbytes = struct.unpack_from("<QQ", buf, o)
            o += 16
            table.append((name, tag, shape, off, nbytes))
        base = o
        state = {}
        for name, tag, shape, off, nbytes in table:
            blob = buf[base + off:base + off + nbytes]
            if len(blob) != nbytes:
                raise ContractError(f"checkpoint truncated in tensor {name!r}")
            if tag == TAG_F64:
                state[name] = np.frombuffer(blob, "<f8").astype(np.float64).reshape(shape)
            elif tag == TAG_Q4:
                state[name] = _q4_from(blob, shape)
            else:
                raise ContractError(f"tensor {name!r}: unknown dtype tag {tag}")
    except struct.error as exc:
        raise ContractError(f"checkpoint truncated: {exc}") from None
    return state, meta


def save(path, state: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(state, meta))


def load(path) -> tuple[dict, dict]:
    return decode(Path(path).read_bytes())
