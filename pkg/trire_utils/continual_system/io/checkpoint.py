# io/checkpoint.py

"""
IO module for checkpoints.
A versioned binary container holding working and EMA parameters, the
cumulative mask, the optional rewind snapshot and the rehearsal buffer.
Byte layout: docs/checkpoint_format.md.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..core.exceptions import CheckpointError
from ..core.model import ParamLayout
from ..core.rehearsal import MemoryBuffer

import logging
logger = logging.getLogger(__name__)

MAGIC = b"TRIRECKP"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<8sHHI")  # magic, version, reserved, header length

@dataclass
class CheckpointData:
    """Everything a checkpoint stores."""
    layout: ParamLayout
    working: np.ndarray
    ema: np.ndarray
    cumulative_mask: np.ndarray
    theta_k: Optional[np.ndarray] = None
    buffer: Optional[MemoryBuffer] = None
    meta: Dict[str, Any] = field(default_factory=dict)

def _sections(data: CheckpointData) -> List[Tuple[str, np.ndarray]]:
    layout = data.layout
    if data.working.shape != (layout.n_total,) or data.ema.shape != (layout.n_total,):
        raise CheckpointError("parameter vectors do not match the architecture")
    if data.cumulative_mask.shape != (layout.n_feature,):
        raise CheckpointError("cumulative mask does not match the feature extractor size")
    sections = [
        ("working", np.ascontiguousarray(data.working, dtype="<f8")),
        ("ema", np.ascontiguousarray(data.ema, dtype="<f8")),
        ("cumulative_mask", np.packbits(data.cumulative_mask.astype(bool), bitorder="little")),
    ]
    if data.theta_k is not None:
        sections.append(("theta_k", np.ascontiguousarray(data.theta_k, dtype="<f8")))
    if data.buffer is not None:
        contents = data.buffer.contents()
        sections += [
            ("buffer_features", np.ascontiguousarray(contents.features, dtype="<f8")),
            ("buffer_labels", np.ascontiguousarray(contents.labels, dtype="<i8")),
            ("buffer_task_ids", np.ascontiguousarray(contents.task_ids, dtype="<i8")),
            ("buffer_losses", np.ascontiguousarray(data.buffer.losses[:data.buffer.size], dtype="<f8")),
        ]
    return sections

def encode_checkpoint(data: CheckpointData) -> bytes:
    sections = _sections(data)
    table, offset = [], 0
    for name, arr in sections:
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": int(arr.nbytes)})
        offset += int(arr.nbytes)
    header = {
        "architecture": data.layout.descriptor(),
        "n_total": data.layout.n_total,
        "n_feature": data.layout.n_feature,
        "sections": table,
        "buffer": None if data.buffer is None else {
            "capacity": data.buffer.capacity, "n_features": data.buffer.n_features, "seen": data.buffer.seen,
        },
        "meta": data.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return PREAMBLE.pack(MAGIC, FORMAT_VERSION, 0, len(header_bytes)) + header_bytes + b"".join(a.tobytes() for _, a in sections)

def decode_checkpoint(payload: bytes) -> CheckpointData:
    """
    Raises:
        CheckpointError: bad magic, unsupported version, malformed header or truncated sections
    """
    if len(payload) < PREAMBLE.size:
        raise CheckpointError(f"Checkpoint truncated at byte offset {len(payload)} (preamble needs {PREAMBLE.size})")
    magic, version, _, header_len = PREAMBLE.unpack_from(payload, 0)
    if magic != MAGIC:
        raise CheckpointError(f"Not a checkpoint: magic {magic!r} at byte offset 0")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    body_start = PREAMBLE.size + header_len
    if len(payload) < body_start:
        raise CheckpointError(f"Checkpoint header truncated at byte offset {len(payload)}")
    try:
        header = json.loads(payload[PREAMBLE.size:body_start].decode("utf-8"))
        arch = header["architecture"]
        layout = ParamLayout(arch["input_dim"], arch["hidden"], arch["n_classes"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"Malformed checkpoint header: {e}") from e

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["sections"]:
        start = body_start + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"Section '{entry['name']}' runs past end of file (byte offset {stop} > {len(payload)})")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()

    for required in ("working", "ema", "cumulative_mask"):
        if required not in arrays:
            raise CheckpointError(f"Checkpoint is missing section '{required}'")
    mask = np.unpackbits(arrays["cumulative_mask"], count=layout.n_feature, bitorder="little").astype(bool)
    buffer = None
    if header.get("buffer") is not None:
        info = header["buffer"]
        buffer = MemoryBuffer.from_arrays(
            info["capacity"], info["n_features"], arrays["buffer_features"], arrays["buffer_labels"],
            arrays["buffer_task_ids"], arrays["buffer_losses"], info["seen"])
    return CheckpointData(layout, arrays["working"].astype(np.float64), arrays["ema"].astype(np.float64), mask,
                          arrays.get("theta_k"), buffer, header.get("meta", {}))

def save_checkpoint(path: str, data: CheckpointData) -> None:
    try:
        with open(path, "wb") as f:
            f.write(encode_checkpoint(data))
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Wrote checkpoint {path}")

def load_checkpoint(path: str) -> CheckpointData:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(payload)
