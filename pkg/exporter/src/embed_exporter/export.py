"""Crop, encode, and serialize: annotations plus images in, embedding file out."""

from __future__ import annotations

import json
import logging
import os
import string
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .encoders import Encoder
from .format import EmbeddingRecord, write

log = logging.getLogger("embed_exporter")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class Annotation:
    sample_id: str
    image_id: str
    caption: str
    box2d: tuple[float, float, float, float]


@dataclass
class ExportJob:
    annotations_path: str
    image_root: str
    output_path: str
    encoder: Encoder
    batch_size: int = 16
    failures: list[str] = field(default_factory=list)


def load_annotations(path) -> list[Annotation]:
    """Minimal reader for the grounding annotation JSONL contract."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                box = obj["box2d"]
                records.append(Annotation(
                    sample_id=str(obj["sample_id"]),
                    image_id=str(obj["image_id"]),
                    caption=str(obj["caption"]),
                    box2d=(float(box[0]), float(box[1]), float(box[2]), float(box[3])),
                ))
            except (json.JSONDecodeError, KeyError, IndexError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed annotation: {e}") from e
    return records


def split_words(caption: str) -> list[str]:
    """Whitespace segmentation with punctuation stripped from word ends."""
    words = []
    for raw in caption.split():
        word = raw.strip(string.punctuation)
        if word:
            words.append(word)
    return words


def find_image(root: str, image_id: str) -> str | None:
    candidate = os.path.join(root, image_id)
    if os.path.isfile(candidate):
        return candidate
    for ext in IMAGE_EXTENSIONS:
        candidate = os.path.join(root, image_id + ext)
        if os.path.isfile(candidate):
            return candidate
    return None


def crop_region(image: Image.Image, box2d) -> Image.Image:
    left, top, right, bottom = box2d
    left = max(0, int(np.floor(left)))
    top = max(0, int(np.floor(top)))
    right = min(image.width, int(np.ceil(right)))
    bottom = min(image.height, int(np.ceil(bottom)))
    if right <= left or bottom <= top:
        raise ValueError(f"degenerate crop {box2d} for image {image.size}")
    return image.crop((left, top, right, bottom))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def export_embeddings(job: ExportJob) -> list[EmbeddingRecord]:
    """Encode every annotation; skip unreadable images, record their ids.

    Word and region vectors are L2-normalized before serialization, so a
    cosine downstream reduces to a dot product. Output order follows the
    annotation file; re-running overwrites the output atomically.
    """
    annotations = load_annotations(job.annotations_path)
    records: list[EmbeddingRecord] = []
    for ann in annotations:
        path = find_image(job.image_root, ann.image_id)
        if path is None:
            log.warning("image missing for %s (image_id=%s); skipped",
                        ann.sample_id, ann.image_id)
            job.failures.append(ann.sample_id)
            continue
        try:
            with Image.open(path) as img:
                crop = crop_region(img, ann.box2d)
                region = job.encoder.encode_image(crop)
        except (OSError, SyntaxError) as e:
            log.warning("unreadable image for %s: %s; skipped", ann.sample_id, e)
            job.failures.append(ann.sample_id)
            continue
        words = split_words(ann.caption)
        if not words:
            raise ValueError(f"{ann.sample_id}: caption has no words after segmentation")
        vectors = np.vstack([
            job.encoder.encode_words(words[i:i + job.batch_size])
            for i in range(0, len(words), job.batch_size)])
        records.append(EmbeddingRecord(
            sample_id=ann.sample_id,
            tokens=tuple(words),
            word_vectors=_normalize_rows(vectors),
            region_vector=_normalize_rows(region.reshape(1, -1))[0],
        ))
    write(records, job.encoder.dim, job.output_path)
    return records
