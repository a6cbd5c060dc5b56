"""File formats and loaders: annotations, predictions, calibration,
embedding files, checkpoints, and run configuration.

Three on-disk contracts live here (documented byte-exactly in
docs/formats.md): JSON-lines annotation/prediction records, the KITTI
`key: 12 floats` calibration text, and the little-endian binary
embedding file. Loaders reject malformed input with the offending
location; they never repair.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .certainty import CaptionRecord
from .evaluate import OCCLUSION_LEVELS
from .geometry import Box2D, Box3D, CameraCalib
from .tensor import Tensor

EMBEDDING_MAGIC = b"EMB1"
EMBEDDING_VERSION = 1
CHECKPOINT_MAGIC = b"CKP1"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed file content; message carries the path and location."""


def _fail(path, where, msg):
    raise FormatError(f"{path}:{where}: {msg}")


@dataclass(frozen=True)
class AnnotationRecord:
    """One grounding annotation: caption plus GT boxes and scenario fields."""

    sample_id: str
    image_id: str
    caption: str
    category: str
    gt_box3d: Box3D
    gt_box2d: Box2D
    occlusion: str
    truncation: float
    calib_ref: str

    def __post_init__(self):
        if not self.caption.strip():
            raise ValueError(f"{self.sample_id}: caption must be nonempty")
        if self.occlusion not in OCCLUSION_LEVELS:
            raise ValueError(f"{self.sample_id}: unknown occlusion {self.occlusion!r}")
        if not 0.0 <= self.truncation <= 1.0:
            raise ValueError(f"{self.sample_id}: truncation outside [0, 1]")

    def to_dict(self) -> dict:
        x, y, z = self.gt_box3d.center
        l, w, h = self.gt_box3d.dims
        return {
            "sample_id": self.sample_id,
            "image_id": self.image_id,
            "caption": self.caption,
            "category": self.category,
            "box3d": {"x": x, "y": y, "z": z, "l": l, "w": w, "h": h,
                      "yaw": self.gt_box3d.yaw},
            "box2d": [self.gt_box2d.left, self.gt_box2d.top,
                      self.gt_box2d.right, self.gt_box2d.bottom],
            "occlusion": self.occlusion,
            "truncation": self.truncation,
            "calib_ref": self.calib_ref,
        }


def _box3d_from_dict(d: Mapping, path, line) -> Box3D:
    try:
        return Box3D((d["x"], d["y"], d["z"]), (d["l"], d["w"], d["h"]), d["yaw"])
    except KeyError as e:
        _fail(path, line, f"box3d missing field {e.args[0]!r}")
    except (TypeError, ValueError) as e:
        _fail(path, line, f"invalid box3d: {e}")


def _annotation_from_dict(obj: Mapping, path, line) -> AnnotationRecord:
    required = ("sample_id", "image_id", "caption", "category", "box3d",
                "box2d", "occlusion", "truncation", "calib_ref")
    for key in required:
        if key not in obj:
            _fail(path, line, f"missing field {key!r}")
    box2d = obj["box2d"]
    if not (isinstance(box2d, (list, tuple)) and len(box2d) == 4):
        _fail(path, line, "box2d must be [left, top, right, bottom]")
    try:
        gt2d = Box2D(*(float(v) for v in box2d))
    except (TypeError, ValueError) as e:
        _fail(path, line, f"invalid gt_box2d: {e}")
    try:
        return AnnotationRecord(
            sample_id=str(obj["sample_id"]),
            image_id=str(obj["image_id"]),
            caption=str(obj["caption"]),
            category=str(obj["category"]),
            gt_box3d=_box3d_from_dict(obj["box3d"], path, line),
            gt_box2d=gt2d,
            occlusion=str(obj["occlusion"]),
            truncation=float(obj["truncation"]),
            calib_ref=str(obj["calib_ref"]),
        )
    except ValueError as e:
        _fail(path, line, str(e))


def load_annotations(path) -> list[AnnotationRecord]:
    """Parse a JSON-lines annotation file; duplicate sample_ids are rejected."""
    records: list[AnnotationRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                _fail(path, lineno, f"invalid JSON: {e.msg}")
            rec = _annotation_from_dict(obj, path, lineno)
            if rec.sample_id in seen:
                _fail(path, lineno, f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            records.append(rec)
    return records


def write_annotations(records: Iterable[AnnotationRecord], path) -> None:
    atomic_write_text(path, "".join(json.dumps(r.to_dict()) + "\n" for r in records))


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    box3d: Box3D

    def to_dict(self) -> dict:
        x, y, z = self.box3d.center
        l, w, h = self.box3d.dims
        return {"sample_id": self.sample_id,
                "box3d": {"x": x, "y": y, "z": z, "l": l, "w": w, "h": h,
                          "yaw": self.box3d.yaw}}


def load_predictions(path) -> list[PredictionRecord]:
    records: list[PredictionRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                _fail(path, lineno, f"invalid JSON: {e.msg}")
            if "sample_id" not in obj or "box3d" not in obj:
                _fail(path, lineno, "prediction needs sample_id and box3d")
            sid = str(obj["sample_id"])
            if sid in seen:
                _fail(path, lineno, f"duplicate sample_id {sid!r}")
            seen.add(sid)
            records.append(PredictionRecord(sid, _box3d_from_dict(obj["box3d"], path, lineno)))
    return records


def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    atomic_write_text(path, "".join(json.dumps(r.to_dict()) + "\n" for r in records))


def load_calib(path) -> CameraCalib:
    """Extract intrinsics from the P2 row of a KITTI-style calibration file."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            if key.strip() != "P2":
                continue
            fields = rest.split()
            if len(fields) != 12:
                _fail(path, lineno, f"P2 needs 12 values, got {len(fields)}")
            try:
                m = np.array([float(v) for v in fields]).reshape(3, 4)
            except ValueError:
                _fail(path, lineno, "P2 holds a non-numeric field")
            try:
                return CameraCalib(fx=m[0, 0], fy=m[1, 1], cx=m[0, 2], cy=m[1, 2],
                                   tx=m[0, 3], ty=m[1, 3], tz=m[2, 3])
            except ValueError as e:
                _fail(path, lineno, str(e))
    raise FormatError(f"{path}: no P2 row found")


# --- embedding file ---------------------------------------------------------
#
# magic "EMB1" | u32 version | u32 dim | u32 record count, then per record:
# u32 id length + UTF-8 id | u32 word count | per word u32 length + UTF-8 |
# words matrix f32[words * dim] | region vector f32[dim]. All little-endian.


@dataclass
class EmbeddingFile:
    """In-memory image of an embedding file, keyed by sample_id."""

    dim: int
    records: dict[str, CaptionRecord] = field(default_factory=dict)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.records

    def get(self, sample_id: str) -> CaptionRecord:
        return self.records[sample_id]


def _w32(f, value: int):
    f.write(struct.pack("<I", value))


def _wstr(f, s: str):
    raw = s.encode("utf-8")
    _w32(f, len(raw))
    f.write(raw)


def serialize_embeddings(records: Iterable[CaptionRecord], dim: int) -> bytes:
    buf = io.BytesIO()
    records = list(records)
    buf.write(EMBEDDING_MAGIC)
    _w32(buf, EMBEDDING_VERSION)
    _w32(buf, dim)
    _w32(buf, len(records))
    for rec in records:
        if rec.word_embeddings.shape[1] != dim:
            raise ValueError(f"{rec.sample_id}: embedding dim "
                             f"{rec.word_embeddings.shape[1]} != header dim {dim}")
        _wstr(buf, rec.sample_id)
        _w32(buf, len(rec.tokens))
        for token in rec.tokens:
            _wstr(buf, token)
        buf.write(rec.word_embeddings.astype("<f4").tobytes())
        buf.write(rec.region_embedding.astype("<f4").tobytes())
    return buf.getvalue()


def write_embeddings(records: Iterable[CaptionRecord], dim: int, path) -> None:
    atomic_write_bytes(path, serialize_embeddings(records, dim))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            _fail(self.path, f"byte {self.pos}", "truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_embeddings(path) -> EmbeddingFile:
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(4) != EMBEDDING_MAGIC:
        _fail(path, "byte 0", "bad magic; not an embedding file")
    version = reader.u32()
    if version != EMBEDDING_VERSION:
        _fail(path, "byte 4", f"unsupported version {version}")
    dim = reader.u32()
    count = reader.u32()
    out = EmbeddingFile(dim=dim)
    for i in range(count):
        sample_id = reader.string()
        n_words = reader.u32()
        tokens = tuple(reader.string() for _ in range(n_words))
        words = np.frombuffer(reader.take(4 * n_words * dim), dtype="<f4")
        words = words.reshape(n_words, dim).astype(np.float64)
        region = np.frombuffer(reader.take(4 * dim), dtype="<f4").astype(np.float64)
        if sample_id in out.records:
            _fail(path, f"record {i}", f"duplicate sample_id {sample_id!r}")
        try:
            out.records[sample_id] = CaptionRecord(sample_id, tokens, words, region)
        except ValueError as e:
            _fail(path, f"record {i}", str(e))
    if reader.pos != len(reader.data):
        _fail(path, f"byte {reader.pos}", "trailing bytes after last record")
    return out


# --- checkpoints -------------------------------------------------------------
#
# magic "CKP1" | u32 version | u32 entry count, then per entry:
# u32 name length + UTF-8 name | u32 ndim | u32 dims... | f64 data. Little-endian.


def save_checkpoint(params: Mapping[str, Tensor], path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    _w32(buf, CHECKPOINT_VERSION)
    _w32(buf, len(params))
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        _wstr(buf, name)
        _w32(buf, arr.ndim)
        for d in arr.shape:
            _w32(buf, d)
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        _fail(path, "byte 0", "bad magic; not a checkpoint")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        _fail(path, "byte 4", f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.string()
        ndim = reader.u32()
        shape = tuple(reader.u32() for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape).copy()
    if reader.pos != len(reader.data):
        _fail(path, f"byte {reader.pos}", "trailing bytes after last entry")
    return out


# --- run configuration --------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Seeds, module settings, and file references for one run."""

    seed: int = 0
    decouple_queries: int = 4
    width: int = 16
    heads: int = 2
    ffn_width: int = 32
    similarity: str = "scaled_dot"
    mask_probability: float = 1.0
    masking_enabled: bool = True
    loss_weights: tuple[float, float, float, float] = (2.0, 5.0, 2.0, 10.0)
    toy: dict = field(default_factory=dict)
    annotations_path: str | None = None
    embeddings_path: str | None = None

    def __post_init__(self):
        if self.similarity not in ("scaled_dot", "cosine"):
            raise ValueError(f"unknown similarity mode {self.similarity!r}")
        if not 0.0 <= self.mask_probability <= 1.0:
            raise ValueError("mask_probability must be in [0, 1]")
        if len(self.loss_weights) != 4:
            raise ValueError("loss_weights needs exactly four values")


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            _fail(path, f"line {e.lineno}", f"invalid JSON: {e.msg}")
    known = {f.name for f in RunConfig.__dataclass_fields__.values()}
    unknown = set(obj) - known
    if unknown:
        _fail(path, "top level", f"unknown config keys {sorted(unknown)}")
    if "loss_weights" in obj:
        obj["loss_weights"] = tuple(float(v) for v in obj["loss_weights"])
    try:
        cfg = RunConfig(**obj)
    except (TypeError, ValueError) as e:
        _fail(path, "top level", str(e))
    base = os.path.dirname(os.path.abspath(path))
    for name in ("annotations_path", "embeddings_path"):
        ref = getattr(cfg, name)
        if ref is not None:
            resolved = ref if os.path.isabs(ref) else os.path.join(base, ref)
            if not os.path.exists(resolved):
                _fail(path, name, f"referenced file does not exist: {ref}")
            object.__setattr__(cfg, name, resolved)
    return cfg


# --- atomic writes ------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
