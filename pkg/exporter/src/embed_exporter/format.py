"""Writer for the binary embedding-file contract.

Independent implementation of the byte layout the grounding3d loader
consumes (see that repo's docs/formats.md): all integers little-endian
u32, strings length-prefixed UTF-8, matrices little-endian float32
row-major.

    magic "EMB1" | version=1 | dim | record count
    per record: sample_id | n_words | words... | f32[n_words*dim] | f32[dim]
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"EMB1"
VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    sample_id: str
    tokens: tuple[str, ...]
    word_vectors: np.ndarray      # (n_words, dim) float32
    region_vector: np.ndarray     # (dim,) float32

    def __post_init__(self):
        words = np.ascontiguousarray(self.word_vectors, dtype="<f4")
        region = np.ascontiguousarray(self.region_vector, dtype="<f4").reshape(-1)
        if words.shape != (len(self.tokens), region.shape[0]):
            raise ValueError(
                f"{self.sample_id}: vectors {words.shape} do not match "
                f"{len(self.tokens)} tokens x dim {region.shape[0]}")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "word_vectors", words)
        object.__setattr__(self, "region_vector", region)


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _u32(len(raw)) + raw


def serialize(records: list[EmbeddingRecord], dim: int) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(VERSION))
    buf.write(_u32(dim))
    buf.write(_u32(len(records)))
    for rec in records:
        if rec.word_vectors.shape[1] != dim:
            raise ValueError(f"{rec.sample_id}: dim {rec.word_vectors.shape[1]} "
                             f"differs from header dim {dim}")
        buf.write(_string(rec.sample_id))
        buf.write(_u32(len(rec.tokens)))
        for token in rec.tokens:
            buf.write(_string(token))
        buf.write(rec.word_vectors.tobytes())
        buf.write(rec.region_vector.tobytes())
    return buf.getvalue()


def write(records: list[EmbeddingRecord], dim: int, path) -> None:
    data = serialize(records, dim)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
