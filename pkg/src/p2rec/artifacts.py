"""Binary container for artifacts handed between pipeline stages.

Layout (all integers little-endian)::

    b"P2RC" | u16 version | u8 kind | u32 meta length | meta (UTF-8 JSON)
    u32 tensor count
    per tensor: u16 name length | name | u8 dtype | u8 ndim | u32 dims... | payload
    u32 CRC32 of every preceding byte

Float payloads are 32-bit, integer payloads 32-bit signed, row-major.
"""

from __future__ import annotations

import enum
import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"P2RC"
VERSION = 1


class Kind(enum.IntEnum):
    EMBEDDING_TABLE = 1
    GROUP_MODEL = 2
    PREFERENCE_TARGETS = 3
    ADAPTER_CHECKPOINT = 4
    ENHANCED_ITEMS = 5
    METRICS_REPORT = 6
    MODEL_CHECKPOINT = 7


class ArtifactError(ValueError):
    pass


_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1, np.dtype("uint8"): 2}


def _as_storable(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        if arr.dtype != np.float32:
            raise ArtifactError(f"tensor {name!r} is {arr.dtype}; store float32 explicitly")
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        if arr.size and (arr.min() < np.iinfo(np.int32).min or arr.max() > np.iinfo(np.int32).max):
            raise ArtifactError(f"tensor {name!r} overflows int32")
        arr = arr.astype(np.int32)
    elif arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype != np.uint8:
        raise ArtifactError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr)


def write_container(path, kind: Kind, tensors: dict, meta: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<HB", VERSION, int(kind))]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = _as_storable(name, arr)
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArtifactError(f"{self.path}: truncated artifact")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, kind: Kind | None = None) -> tuple[Kind, dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < 11 or buf[:4] != MAGIC:
        raise ArtifactError(f"{path}: not a P2RC artifact (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body, path)
    r.take(4)
    version, tag = r.unpack("<HB")
    if version != VERSION:
        raise ArtifactError(f"{path}: artifact version {version}, this reader supports {VERSION}")
    if zlib.crc32(body) != crc:
        raise ArtifactError(f"{path}: checksum mismatch (truncated or corrupted file)")
    try:
        found = Kind(tag)
    except ValueError:
        raise ArtifactError(f"{path}: unknown artifact kind tag {tag}") from None
    if kind is not None and found != kind:
        raise ArtifactError(f"{path}: expected {kind.name} artifact, found {found.name}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    if r.pos != len(body):
        raise ArtifactError(f"{path}: trailing bytes after last tensor")
    return found, tensors, meta


def _registry():
    from .augment import EnhancedItemSet
    from .backbone import ItemEmbeddingTable, ModelCheckpoint
    from .pregroup import GroupModel, PreferenceTargets
    from .preference import AdapterCheckpoint
    from .report import MetricsReport

    return {
        Kind.EMBEDDING_TABLE: ItemEmbeddingTable,
        Kind.GROUP_MODEL: GroupModel,
        Kind.PREFERENCE_TARGETS: PreferenceTargets,
        Kind.ADAPTER_CHECKPOINT: AdapterCheckpoint,
        Kind.ENHANCED_ITEMS: EnhancedItemSet,
        Kind.METRICS_REPORT: MetricsReport,
        Kind.MODEL_CHECKPOINT: ModelCheckpoint,
    }


def save_artifact(obj, path, config_hash: str = "") -> None:
    """Write any pipeline artifact; ``obj`` supplies ``KIND`` and ``to_tensors()``."""
    tensors, meta = obj.to_tensors()
    meta = dict(meta, config_hash=config_hash)
    write_container(path, obj.KIND, tensors, meta)


def load_artifact(kind: Kind | str, path):
    if isinstance(kind, str):
        kind = Kind[kind.upper()]
    if kind == Kind.METRICS_REPORT and Path(path).suffix == ".json":
        from .report import MetricsReport

        return MetricsReport.from_json(Path(path).read_text())
    _, tensors, meta = read_container(path, kind)
    return _registry()[kind].from_tensors(tensors, meta)


def artifact_config_hash(path) -> str:
    _, _, meta = read_container(path)
    return meta.get("config_hash", "")
