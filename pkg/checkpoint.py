"""checkpoint.py

Binary checkpoint container for a detector plus its strategy state.

    offset 0   b"CLODCKPT"                 magic, 8 bytes
    offset 8   uint32 LE                   format version
    offset 12  uint64 LE                   header length N
    offset 20  N bytes UTF-8 JSON header   sorted keys
    offset 20+N payload                    concatenated little-endian arrays

The header holds the detector spec and its sha256 digest, a table of
parameters (name, shape, requires_grad, offset, nbytes) for the model and
the teacher snapshot, the replay buffer entries, the class ranges and free
metadata. Float arrays are stored as <f8 and images as u1, so a round trip
is bit-exact. The payload length and sha256 are checked on load.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional

import numpy as np

from autodiff import Tensor
from cl_strategies import BufferEntry, ReplayBuffer, StrategyKind, StrategyState
from detector import Detector, DetectorSpec
from scenario_data import Annotation, ClassRange

logger = logging.getLogger(__name__)

MAGIC = b"CLODCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class Checkpoint(NamedTuple):
    model: Detector
    state: StrategyState
    metadata: Dict[str, Any]


class _Payload:
    def __init__(self):
        self.chunks: List[bytes] = []
        self.size = 0

    def add(self, arr: np.ndarray, dtype: str) -> Dict[str, Any]:
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        entry = {"offset": self.size, "nbytes": len(raw), "shape": list(arr.shape), "dtype": dtype}
        self.chunks.append(raw)
        self.size += len(raw)
        return entry


def _read(payload: bytes, entry: Dict[str, Any]) -> np.ndarray:
    start, n = entry["offset"], entry["nbytes"]
    if start + n > len(payload):
        raise CheckpointError(f"array at offset {start} runs past the payload end")
    arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(entry["dtype"]))
    return arr.reshape(entry["shape"])


def _detector_block(d: Detector, payload: _Payload) -> Dict[str, Any]:
    return {
        "spec": d.spec.to_dict(),
        "spec_digest": d.spec.digest(),
        "frozen_boundary": d.frozen_boundary,
        "split_point": d.split_point,
        "upper_only": d.upper_only,
        "params": [dict(name=name, requires_grad=p.requires_grad, **payload.add(p.data, "<f8"))
                   for name, p in d.params.items()],
    }


def _load_detector(block: Dict[str, Any], payload: bytes) -> Detector:
    spec = DetectorSpec.from_dict(block["spec"])
    if spec.digest() != block["spec_digest"]:
        raise CheckpointError("detector spec digest mismatch: header was modified or written by another layout")
    params = {}
    for entry in block["params"]:
        params[entry["name"]] = Tensor(_read(payload, entry), requires_grad=entry["requires_grad"])
    return Detector(spec=spec, params=params, frozen_boundary=block["frozen_boundary"],
                    split_point=block["split_point"], upper_only=block["upper_only"])


def _buffer_block(buffer: ReplayBuffer, payload: _Payload) -> Dict[str, Any]:
    entries = []
    for e in buffer.entries:
        item = {
            "task": e.task,
            "image_id": e.image_id,
            "class_range": list(e.class_range),
            "annotations": [[a.class_id, *a.box] for a in e.annotations],
            "split_point": e.split_point,
        }
        if e.latent is not None:
            item["latent"] = payload.add(e.latent, "<f8")
        else:
            item["image"] = payload.add(e.image, "|u1")
        entries.append(item)
    return {"capacity": buffer.capacity, "latent": buffer.latent, "entries": entries}


def _load_buffer(block: Dict[str, Any], payload: bytes) -> ReplayBuffer:
    entries = []
    for item in block["entries"]:
        image = latent = None
        if "latent" in item:
            latent = np.array(_read(payload, item["latent"]), dtype=np.float64)
        else:
            image = np.array(_read(payload, item["image"]), dtype=np.uint8)
            image.setflags(write=False)
        annotations = tuple(Annotation(int(a[0]), tuple(float(v) for v in a[1:])) for a in item["annotations"])
        entries.append(BufferEntry(item["task"], item["image_id"], ClassRange(*item["class_range"]), annotations,
                                   image=image, latent=latent, split_point=item["split_point"]))
    return ReplayBuffer(block["capacity"], block["latent"], entries)


def save(path: Path, model: Detector, state: StrategyState, metadata: Optional[Dict[str, Any]] = None) -> Path:
    payload = _Payload()
    header = {
        "model": _detector_block(model, payload),
        "state": {
            "kind": state.kind.value,
            "alpha": state.alpha,
            "old_range": list(state.old_range),
            "new_range": list(state.new_range),
            "task_index": state.task_index,
            "teacher": _detector_block(state.teacher, payload) if state.teacher is not None else None,
            "buffer": _buffer_block(state.buffer, payload) if state.buffer is not None else None,
        },
        "metadata": metadata or {},
    }
    body = b"".join(payload.chunks)
    header["payload_bytes"] = len(body)
    header["payload_sha256"] = hashlib.sha256(body).hexdigest()
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(body)
    tmp.replace(path)
    logger.debug("saved checkpoint %s (%d header bytes, %d payload bytes)", path, len(blob), len(body))
    return path


def load(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated ({len(raw)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if start + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    body = raw[start + header_len:]
    try:
        return _decode(header, body, path)
    except (KeyError, TypeError, IndexError) as exc:
        raise CheckpointError(f"{path}: malformed header: missing or bad field {exc}") from None


def _decode(header: Dict[str, Any], body: bytes, path: Path) -> Checkpoint:
    if len(body) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(body)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    model = _load_detector(header["model"], body)
    s = header["state"]
    state = StrategyState(
        kind=StrategyKind.parse(s["kind"]),
        alpha=s["alpha"],
        old_range=ClassRange(*s["old_range"]),
        new_range=ClassRange(*s["new_range"]),
        teacher=_load_detector(s["teacher"], body) if s["teacher"] is not None else None,
        buffer=_load_buffer(s["buffer"], body) if s["buffer"] is not None else None,
        task_index=s["task_index"],
    )
    return Checkpoint(model, state, header["metadata"])
