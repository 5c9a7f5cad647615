#!/usr/bin/env python3
"""
Checkpoint store for trained CQural models
Flat list of named parameter arrays: 8-byte little-endian header length, a JSON header
of {name, shape, offset} records, then little-endian float64 payload
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Union

import numpy as np

from lab_errors import DimensionError, FormatError
from report_writer import write_atomic
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

HEADER_LENGTH = struct.Struct("<Q")
PAYLOAD_DTYPE = np.dtype("<f8")

ArrayMapping = Mapping[str, Union[Tensor, np.ndarray]]


def _as_array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def encode_checkpoint(params: ArrayMapping) -> bytes:
    """Parameters in name order so equal models give equal bytes"""
    header: List[dict] = []
    chunks = []
    offset = 0
    for name in sorted(params):
        array = np.ascontiguousarray(_as_array(params[name]), dtype=PAYLOAD_DTYPE)
        header.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return HEADER_LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(chunks)


def decode_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < HEADER_LENGTH.size:
        raise FormatError("checkpoint shorter than its length prefix", offset=len(data))
    (header_length,) = HEADER_LENGTH.unpack_from(data)
    start = HEADER_LENGTH.size + header_length
    if start > len(data):
        raise FormatError(f"checkpoint header claims {header_length} bytes", offset=len(data))
    try:
        header = json.loads(data[HEADER_LENGTH.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint header is not JSON: {e}", offset=HEADER_LENGTH.size) from e

    arrays: Dict[str, np.ndarray] = {}
    payload = memoryview(data)[start:]
    end = 0
    for record in header:
        shape = tuple(int(v) for v in record["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = int(record["offset"])
        stop = begin + count * PAYLOAD_DTYPE.itemsize
        if stop > len(payload):
            raise FormatError(f"parameter '{record['name']}' runs past the payload", offset=start + begin)
        arrays[record["name"]] = np.frombuffer(payload[begin:stop], dtype=PAYLOAD_DTYPE).reshape(shape).astype(np.float64)
        end = max(end, stop)
    if end != len(payload):
        raise FormatError(f"{len(payload) - end} trailing payload bytes", offset=start + end)
    return arrays


class CheckpointStore:
    """Checkpoints kept as <root>/<name>.ckpt"""

    def __init__(self, root: Union[str, Path] = "checkpoints"):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, name: str) -> Path:
        return self.root / f"{name}.ckpt"

    def save(self, name: str, params: ArrayMapping) -> Path:
        path = write_atomic(self.path_for(name), encode_checkpoint(params))
        logger.info(f"💾 Saved checkpoint {path} ({len(params)} arrays)")
        return path

    def load(self, name: str) -> Dict[str, np.ndarray]:
        path = self.path_for(name)
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint at {path}")
        return decode_checkpoint(path.read_bytes())

    def list_checkpoints(self) -> List[str]:
        return sorted(path.stem for path in self.root.glob("*.ckpt"))


def restore_parameters(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]):
    """Copy stored arrays into live parameter tensors, checking names and shapes"""
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise DimensionError(f"checkpoint lacks parameters {missing}")
    for name, tensor in params.items():
        if tuple(arrays[name].shape) != tensor.shape:
            raise DimensionError(f"parameter '{name}' has shape {tensor.shape}, checkpoint {arrays[name].shape}")
        tensor.data = np.array(arrays[name], dtype=np.float64)
