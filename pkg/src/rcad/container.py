"""Little-endian block container shared by class memories and checkpoints.

Layout::

    magic (8 bytes) | u32 version | u32 ident | u32 n_blocks
    n_blocks x [u16 name_len | name utf-8 | u64 offset | u64 length | u32 crc32]
    block payloads, contiguous, in table order

Offsets are absolute.  Every block carries its own CRC32 so corruption is
reported against the block it hit.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

from .errors import ContainerError

_HEAD = struct.Struct("<8sIII")
_ENTRY_TAIL = struct.Struct("<QQI")


def header_size(names: Iterable[str]) -> int:
    return _HEAD.size + sum(2 + len(n.encode()) + _ENTRY_TAIL.size for n in names)


def pack(magic: bytes, version: int, ident: int, blocks: List[Tuple[str, bytes]]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    names = [n for n, _ in blocks]
    if len(set(names)) != len(names):
        raise ValueError("duplicate block names")
    offset = header_size(names)
    table = []
    for name, payload in blocks:
        raw = name.encode()
        table.append(struct.pack("<H", len(raw)) + raw + _ENTRY_TAIL.pack(offset, len(payload), zlib.crc32(payload)))
        offset += len(payload)
    return b"".join([_HEAD.pack(magic, version, ident, len(blocks)), *table, *(p for _, p in blocks)])


def unpack(data: bytes, magic: bytes, versions: Iterable[int] = (1,)) -> Tuple[int, int, "OrderedDict[str, bytes]"]:
    """Parse a container; returns (version, ident, blocks)."""
    if len(data) < _HEAD.size:
        raise ContainerError("file shorter than the container header", block="header")
    got_magic, version, ident, n_blocks = _HEAD.unpack_from(data, 0)
    if got_magic != magic:
        raise ContainerError(f"bad magic {got_magic!r}, expected {magic!r}", block="header")
    if version not in tuple(versions):
        raise ContainerError(f"unsupported format version {version}", block="header")
    pos = _HEAD.size
    entries = []
    for i in range(n_blocks):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + name_len].decode()
            pos += 2 + name_len
            off, length, crc = _ENTRY_TAIL.unpack_from(data, pos)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ContainerError(f"block table truncated at entry {i}", block="header") from exc
        pos += _ENTRY_TAIL.size
        entries.append((name, off, length, crc))
    blocks: "OrderedDict[str, bytes]" = OrderedDict()
    for name, off, length, crc in entries:
        payload = data[off : off + length]
        if len(payload) != length:
            raise ContainerError(f"block {name!r} truncated ({len(payload)} of {length} bytes)", block=name)
        if zlib.crc32(payload) != crc:
            raise ContainerError(f"checksum mismatch in block {name!r}", block=name)
        blocks[name] = payload
    return version, ident, blocks


def write(path: Union[str, Path], data: bytes) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return len(data)


def block_sizes(blocks: List[Tuple[str, bytes]]) -> Dict[str, int]:
    sizes = {"header": header_size(n for n, _ in blocks)}
    sizes.update({n: len(p) for n, p in blocks})
    return sizes
