# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Binary checkpoint codec. Byte layout documented in docs/checkpoint-format.md.

    magic  b"TCCK" | version u16 | config_len u32 | config JSON (UTF-8)
    count u32 | per parameter:
        name_len u16 | name | group u8 | rank u8 | extents u32 * rank | float64 * prod(extents)

All integers and floats little-endian. Writing the same store twice yields the
same bytes.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from shared.errors import DataError
from shared.tensor_engine import GROUPS, ParamStore

logger = logging.getLogger(__name__)

MAGIC = b'TCCK'
FORMAT_VERSION = 1
GROUP_TAGS = {group: tag for tag, group in enumerate(GROUPS)}


class CheckpointIOError(DataError):
    category = 'io'


class VersionMismatch(DataError):
    category = 'version_mismatch'


class CorruptCheckpoint(DataError):
    category = 'corrupt_checkpoint'

    def __init__(self, offset: int, reason: str):
        super().__init__(f"Corrupt checkpoint at byte {offset}: {reason}")
        self.offset = offset


class ConfigConflict(DataError):
    category = 'config_conflict'


def encode(config: Dict[str, Any], store: ParamStore) -> bytes:
    config_bytes = json.dumps(config, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts = [MAGIC, struct.pack('<HI', FORMAT_VERSION, len(config_bytes)), config_bytes,
             struct.pack('<I', len(store))]
    for param in store:
        name = param.name.encode('utf-8')
        shape = param.value.shape
        parts.append(struct.pack('<H', len(name)))
        parts.append(name)
        parts.append(struct.pack('<BB', GROUP_TAGS[param.group], len(shape)))
        parts.append(struct.pack(f'<{len(shape)}I', *shape))
        parts.append(param.value.astype('<f8').tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CorruptCheckpoint(self.offset, f"truncated while reading {what}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Tuple[Dict[str, Any], ParamStore]:
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CorruptCheckpoint(0, "not a checkpoint file (bad magic)")
    version, config_len = reader.unpack('<HI', "header")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"Checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    config_start = reader.offset
    try:
        config = json.loads(reader.take(config_len, "config").decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(config_start, f"unreadable config block: {e}") from e

    store = ParamStore()
    (count,) = reader.unpack('<I', "parameter count")
    for _ in range(count):
        (name_len,) = reader.unpack('<H', "name length")
        name_start = reader.offset
        try:
            name = reader.take(name_len, "name").decode('utf-8')
        except UnicodeDecodeError as e:
            raise CorruptCheckpoint(name_start, "parameter name is not UTF-8") from e
        tag_offset = reader.offset
        tag, rank = reader.unpack('<BB', "group/rank")
        if tag >= len(GROUPS):
            raise CorruptCheckpoint(tag_offset, f"unknown group tag {tag}")
        shape = reader.unpack(f'<{rank}I', "extents")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * size, f"values of {name}"), dtype='<f8')
        try:
            store.add(name, values.reshape(shape), GROUPS[tag])
        except ValueError as e:
            raise CorruptCheckpoint(name_start, str(e)) from e
    if reader.offset != len(data):
        raise CorruptCheckpoint(reader.offset, "trailing bytes after last parameter")
    return config, store


def write_checkpoint(path: Path, config: Dict[str, Any], store: ParamStore) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(config, store))
    except OSError as e:
        raise CheckpointIOError(f"Cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Wrote checkpoint {path} ({store.size()} parameters)")


def read_checkpoint(path: Path) -> Tuple[Dict[str, Any], ParamStore]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointIOError(f"Cannot read checkpoint {path}: {e}") from e
    return decode(data)
