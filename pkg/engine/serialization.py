"""
Binary codecs for networks (PRWD) and masks (PRWM).

PRWD: b"PRWD" | u32 version | u32 layer count | u32 ndim | u32 dims...
      | per layer: u8 kind code + 10 x u32 geometry | u64 d | d x f32
PRWM: b"PRWM" | u32 version | u64 d | packed bitmap (LSB-first per byte)
All integers and floats little-endian.
"""

import os
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from engine.layers import LAYER_KINDS, LayerSpec
from engine.mask import Mask
from engine.network import Architecture, Network
from errors import FormatError

NETWORK_MAGIC = b"PRWD"
MASK_MAGIC = b"PRWM"
FORMAT_VERSION = 1

KIND_CODES = {kind: code for code, kind in enumerate(LAYER_KINDS, start=1)}
CODE_KINDS = {code: kind for kind, code in KIND_CODES.items()}
GEOMETRY_FIELDS = (
    "in_features",
    "out_features",
    "in_channels",
    "out_channels",
    "kernel_h",
    "kernel_w",
    "stride",
    "padding",
    "window",
    "has_bias",
)
LAYER_RECORD = struct.Struct("<B" + "I" * len(GEOMETRY_FIELDS))

PathLike = Union[str, Path]


class _Reader:
    """Cursor over a byte buffer that reports truncation as FormatError."""

    def __init__(self, data: bytes, label: str):
        self.data = data
        self.offset = 0
        self.label = label

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise FormatError(f"{self.label} truncated at byte {self.offset} (needed {size} more bytes).")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_header(reader: _Reader, magic: bytes) -> None:
    found = reader.take(4)
    if found != magic:
        raise FormatError(f"Expected magic {magic!r}, found {found!r}.")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported {magic.decode()} version {version}.")


def write_atomic(path: PathLike, payload: bytes) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    temp = target.with_suffix(target.suffix + ".tmp")
    with open(temp, "wb") as handle:
        handle.write(payload)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(temp, target)


# ── networks ─────────────────────────────────────────────────────────


def encode_network(net: Network) -> bytes:
    parts = [NETWORK_MAGIC, struct.pack("<II", FORMAT_VERSION, len(net.layers))]
    shape = net.arch.input_shape
    parts.append(struct.pack("<I" + "I" * len(shape), len(shape), *shape))
    for layer in net.layers:
        values = [int(getattr(layer, name)) for name in GEOMETRY_FIELDS]
        parts.append(LAYER_RECORD.pack(KIND_CODES[layer.kind], *values))
    parts.append(struct.pack("<Q", net.d))
    parts.append(net.weights.astype("<f4").tobytes())
    return b"".join(parts)


def decode_network(data: bytes) -> Network:
    reader = _Reader(data, "Network file")
    _read_header(reader, NETWORK_MAGIC)
    (layer_count,) = reader.unpack("<I")
    (ndim,) = reader.unpack("<I")
    input_shape = reader.unpack("<" + "I" * ndim)
    layers = []
    for _ in range(layer_count):
        record = LAYER_RECORD.unpack(reader.take(LAYER_RECORD.size))
        kind = CODE_KINDS.get(record[0])
        if kind is None:
            raise FormatError(f"Unknown layer kind code {record[0]}.")
        fields = dict(zip(GEOMETRY_FIELDS, record[1:]))
        fields["has_bias"] = bool(fields["has_bias"])
        layers.append(LayerSpec(kind, **fields))
    (d,) = reader.unpack("<Q")
    weights = np.frombuffer(reader.take(4 * d), dtype="<f4").astype(np.float32)
    if reader.offset != len(data):
        raise FormatError(f"Network file has {len(data) - reader.offset} trailing bytes.")
    return Network(Architecture(input_shape, tuple(layers)), weights)


def save_network(net: Network, path: PathLike) -> None:
    write_atomic(path, encode_network(net))


def load_network(path: PathLike) -> Network:
    return decode_network(Path(path).read_bytes())


# ── masks ────────────────────────────────────────────────────────────


def encode_mask(mask: Mask) -> bytes:
    bitmap = np.packbits(mask.bits, bitorder="little")
    return MASK_MAGIC + struct.pack("<IQ", FORMAT_VERSION, mask.d) + bitmap.tobytes()


def decode_mask(data: bytes) -> Mask:
    reader = _Reader(data, "Mask file")
    _read_header(reader, MASK_MAGIC)
    (d,) = reader.unpack("<Q")
    packed = np.frombuffer(reader.take((d + 7) // 8), dtype=np.uint8)
    bits = np.unpackbits(packed, count=d, bitorder="little")
    return Mask(bits)


def save_mask(mask: Mask, path: PathLike) -> None:
    write_atomic(path, encode_mask(mask))


def load_mask(path: PathLike) -> Mask:
    return decode_mask(Path(path).read_bytes())
