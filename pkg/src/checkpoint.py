#!/usr/bin/env python3
"""
Checkpoint IO for Harborsight
Named parameter tables in the HSCK binary layout, with a YAML metadata block.

Layout (little-endian):
    b"HSCK" | u16 version | u32 count
    count × ( u16 name_len | name utf-8 | u8 ndim | ndim × u32 extent | float64 values )
    u32 meta_len | YAML metadata utf-8
"""

import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import yaml

from numerics import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HSCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base exception for checkpoint IO"""
    pass


class CheckpointFormatError(CheckpointError):
    """Exception for malformed or truncated checkpoint files"""
    pass


def save_checkpoint(params: Dict[str, Tensor], path: Path,
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write parameters in sorted-name order so identical models give identical bytes

    Args:
        params: Name → tensor table
        path: Output file
        metadata: Plain YAML-serializable model description
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        data = np.asarray(params[name].data, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data).tobytes(order="C"))
    meta_text = yaml.safe_dump(metadata or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_text)))
    parts.append(meta_text)
    path.write_bytes(b"".join(parts))
    logger.info(f"Saved checkpoint with {len(params)} tensors → {path}")
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, Tensor], Dict[str, Any]]:
    """
    Read an HSCK file

    Returns:
        (params, metadata); every tensor is a requires_grad leaf

    Raises:
        CheckpointError: If the file is missing
        CheckpointFormatError: On bad magic, version or truncation
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found → {path}")
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Not a checkpoint file → {path}")
    params: Dict[str, Tensor] = {}
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"Unsupported checkpoint version {version} → {path}")
        offset = 4 + struct.calcsize("<HI")
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if offset + 8 * size > len(blob):
                raise CheckpointFormatError(f"Truncated values for {name} → {path}")
            values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            params[name] = Tensor(values.reshape(shape).astype(np.float64), requires_grad=True, name=name)
        (meta_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        meta_text = blob[offset:offset + meta_len].decode("utf-8")
    except struct.error as e:
        raise CheckpointFormatError(f"Truncated checkpoint → {path}: {e}")
    metadata = yaml.safe_load(meta_text) or {}
    return params, metadata
