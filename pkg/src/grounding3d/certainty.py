"""Lexical certainty scoring and masking of caption words.

Each caption word is scored by cosine similarity against the target
region's embedding; an exact 1-D 2-means split separates high-certainty
words (category, color...) from low-certainty spatial descriptors, and
the high side is replaced by the literal token ``***`` during training.
Masking never consumes the whole caption, and all randomness derives
from (seed, epoch, sample_id) so parallel order can never change output.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MASK_TOKEN = "***"


class DegenerateVectorError(ValueError):
    """An embedding with zero norm cannot be cosine-scored."""


@dataclass(frozen=True)
class CaptionRecord:
    """One caption: tokens, per-word embeddings, and the region embedding."""

    sample_id: str
    tokens: tuple[str, ...]
    word_embeddings: np.ndarray      # (n_words, d_e)
    region_embedding: np.ndarray     # (d_e,)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        words = np.asarray(self.word_embeddings, dtype=np.float64)
        region = np.asarray(self.region_embedding, dtype=np.float64).reshape(-1)
        if len(self.tokens) < 1:
            raise ValueError(f"{self.sample_id}: caption must hold at least one word")
        if words.shape != (len(self.tokens), region.shape[0]):
            raise ValueError(
                f"{self.sample_id}: embeddings {words.shape} do not match "
                f"{len(self.tokens)} tokens x dim {region.shape[0]}")
        object.__setattr__(self, "word_embeddings", words)
        object.__setattr__(self, "region_embedding", region)


@dataclass(frozen=True)
class CertaintyPartition:
    """Per-word scores split into high/low certainty clusters."""

    scores: tuple[float, ...]
    high_indices: tuple[int, ...]
    low_indices: tuple[int, ...]
    centroids: tuple[float, float]   # (low, high)

    @property
    def no_split(self) -> bool:
        return not self.high_indices

    def __post_init__(self):
        n = len(self.scores)
        if sorted(self.high_indices + self.low_indices) != list(range(n)):
            raise ValueError("high/low index sets must partition the words")


@dataclass(frozen=True)
class MaskPolicy:
    """When and how often captions get masked."""

    probability: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"mask probability must be in [0, 1], got {self.probability}")


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; scale-invariant, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _wcss(prefix_sum, prefix_sq, lo, hi) -> float:
    """Within-cluster sum of squares for sorted[lo:hi]."""
    n = hi - lo
    s = prefix_sum[hi] - prefix_sum[lo]
    sq = prefix_sq[hi] - prefix_sq[lo]
    return sq - s * s / n


def kmeans_1d_k2(scores: Sequence[float]) -> CertaintyPartition:
    """Globally optimal two-cluster split of scalar scores.

    The optimum of 1-D 2-means is contiguous in sorted order, so an
    exhaustive scan over the n-1 split points finds it exactly, with no
    initialization or iteration nondeterminism. Ties in the objective
    prefer the smaller high cluster, and boundary-valued ties fall to the
    low cluster, so equal scores never straddle the split. A single score
    or all-equal scores yield the no-split outcome (everything low).
    """
    values = [float(s) for s in scores]
    n = len(values)
    if n == 0:
        raise ValueError("need at least one score")
    mean_all = sum(values) / n
    if n == 1 or all(v == values[0] for v in values):
        return CertaintyPartition(tuple(values), (), tuple(range(n)),
                                  (mean_all, mean_all))
    order = sorted(range(n), key=lambda i: values[i])
    sorted_vals = [values[i] for i in order]
    prefix_sum = np.concatenate([[0.0], np.cumsum(sorted_vals)])
    prefix_sq = np.concatenate([[0.0], np.cumsum(np.square(sorted_vals))])

    best_k, best_obj = None, math.inf
    for k in range(1, n):
        obj = _wcss(prefix_sum, prefix_sq, 0, k) + _wcss(prefix_sum, prefix_sq, k, n)
        if obj <= best_obj:      # <= prefers larger k: fewer high words on ties
            best_obj, best_k = obj, k

    # never let equal values straddle the boundary
    while best_k < n and sorted_vals[best_k - 1] == sorted_vals[best_k]:
        best_k += 1
    if best_k == n:
        return CertaintyPartition(tuple(values), (), tuple(range(n)),
                                  (mean_all, mean_all))

    threshold = sorted_vals[best_k]
    high = tuple(i for i in range(n) if values[i] >= threshold)
    low = tuple(i for i in range(n) if values[i] < threshold)
    c_low = sum(values[i] for i in low) / len(low)
    c_high = sum(values[i] for i in high) / len(high)
    return CertaintyPartition(tuple(values), high, low, (c_low, c_high))


def partition_certainty(rec: CaptionRecord) -> CertaintyPartition:
    """Score every word against the region embedding and split."""
    scores = []
    for i, token in enumerate(rec.tokens):
        try:
            scores.append(cosine_similarity(rec.word_embeddings[i], rec.region_embedding))
        except DegenerateVectorError as e:
            raise DegenerateVectorError(
                f"{rec.sample_id}: zero embedding at token {i} ({token!r})") from e
    return kmeans_1d_k2(scores)


def mask_caption(tokens: Sequence[str], partition: CertaintyPartition,
                 apply: bool = True) -> list[str]:
    """Replace high-certainty tokens with ``***``; never masks everything.

    When the split marks every word high, the lowest-scoring one stays
    visible so the caption keeps at least one content token.
    """
    tokens = list(tokens)
    if partition.high_indices and max(partition.high_indices) >= len(tokens):
        raise IndexError(f"partition index {max(partition.high_indices)} out of range "
                         f"for {len(tokens)} tokens")
    if not apply or partition.no_split:
        return tokens
    to_mask = set(partition.high_indices)
    if len(to_mask) == len(tokens):
        keep = min(to_mask, key=lambda i: (partition.scores[i], i))
        to_mask.discard(keep)
    return [MASK_TOKEN if i in to_mask else t for i, t in enumerate(tokens)]


def _record_rng(seed: int, epoch: int, sample_id: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{epoch}:{sample_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


@dataclass
class MaskAudit:
    """Everything needed to replay one masking decision."""

    sample_id: str
    scores: list[float]
    high_indices: list[int]
    centroids: tuple[float, float]
    masked: bool
    tokens_out: list[str]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "scores": self.scores,
            "high_indices": self.high_indices,
            "centroids": list(self.centroids),
            "masked": self.masked,
            "tokens_out": self.tokens_out,
        }


def mask_records(records: Iterable[CaptionRecord], policy: MaskPolicy, seed: int,
                 epoch: int = 0) -> tuple[list[tuple[str, list[str]]], list[MaskAudit]]:
    """Mask a stream of caption records under a masking policy.

    Each record draws its own Bernoulli(probability) decision from an RNG
    keyed by (seed, epoch, sample_id), so the output is reproducible and
    independent of processing order. Returns (sample_id, tokens) pairs
    plus one audit entry per record.
    """
    masked_stream: list[tuple[str, list[str]]] = []
    audits: list[MaskAudit] = []
    for rec in records:
        partition = partition_certainty(rec)
        decide = (policy.enabled
                  and _record_rng(seed, epoch, rec.sample_id).random() < policy.probability)
        tokens_out = mask_caption(rec.tokens, partition, apply=decide)
        masked = tokens_out != list(rec.tokens)
        masked_stream.append((rec.sample_id, tokens_out))
        audits.append(MaskAudit(rec.sample_id, list(partition.scores),
                                list(partition.high_indices), partition.centroids,
                                masked, tokens_out))
    return masked_stream, audits
