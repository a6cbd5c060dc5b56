"""Nine-scenario grounding evaluation: Acc@0.25 / Acc@0.5 per bucket.

Samples bucket three ways: unique/multiple (does the image hold other
objects of the queried category), near/medium/far by ground-truth depth,
and easy/moderate/hard by occlusion and truncation. Accuracies are kept
as exact rationals until rendering, and samples are processed in
sample_id order so the output never depends on input order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .geometry import Box3D, iou_3d

OCCLUSION_LEVELS = ("none", "partial", "severe")
UNIQUENESS_BUCKETS = ("unique", "multiple")
DISTANCE_BUCKETS = ("near", "medium", "far")
DIFFICULTY_BUCKETS = ("easy", "moderate", "hard")
THRESHOLDS = (0.25, 0.5)

NEAR_LIMIT = 15.0
MEDIUM_LIMIT = 35.0
EASY_TRUNCATION = 0.15
HARD_TRUNCATION = 0.3


@dataclass(frozen=True)
class EvalSample:
    """One grounding case: prediction vs ground truth plus scenario fields."""

    sample_id: str
    gt: Box3D
    pred: Box3D
    category: str
    depth_gt: float
    occlusion: str
    truncation: float
    image_id: str

    def __post_init__(self):
        if self.occlusion not in OCCLUSION_LEVELS:
            raise ValueError(f"{self.sample_id}: unknown occlusion {self.occlusion!r}")
        if not 0.0 <= self.truncation <= 1.0:
            raise ValueError(f"{self.sample_id}: truncation {self.truncation} outside [0, 1]")
        if self.depth_gt < 0.0:
            raise ValueError(f"{self.sample_id}: negative depth {self.depth_gt}")


@dataclass(frozen=True)
class ScenarioLabel:
    uniqueness: str
    distance: str
    difficulty: str


def occlusion_from_kitti(level: int) -> str:
    """Map KITTI integer occlusion (0..3) onto the three-level taxonomy."""
    if level < 0:
        raise ValueError(f"negative occlusion level {level}")
    return "none" if level == 0 else ("partial" if level == 1 else "severe")


def bucket_distance(depth_gt: float) -> str:
    """Half-open ranges, boundaries assigned upward: [0,15) near, [15,35) medium."""
    if depth_gt < 0.0:
        raise ValueError(f"negative depth {depth_gt}")
    if depth_gt < NEAR_LIMIT:
        return "near"
    if depth_gt < MEDIUM_LIMIT:
        return "medium"
    return "far"


def bucket_difficulty(occlusion: str, truncation: float) -> str:
    """Easy: unoccluded and truncation < 0.15. Hard: severe occlusion or > 0.3."""
    if occlusion not in OCCLUSION_LEVELS:
        raise ValueError(f"unknown occlusion {occlusion!r}")
    if occlusion == "severe" or truncation > HARD_TRUNCATION:
        return "hard"
    if occlusion == "none" and truncation < EASY_TRUNCATION:
        return "easy"
    return "moderate"


def build_image_index(samples: Iterable[EvalSample]) -> dict[str, dict[str, int]]:
    """Objects per (image, category), counting distinct GT boxes once each.

    Several captions can ground the same object; identical GT boxes in one
    image collapse to a single object.
    """
    boxes: dict[str, dict[str, set]] = {}
    for s in samples:
        key = (s.gt.center, s.gt.dims, s.gt.yaw)
        boxes.setdefault(s.image_id, {}).setdefault(s.category, set()).add(key)
    return {img: {cat: len(v) for cat, v in cats.items()} for img, cats in boxes.items()}


def bucket_uniqueness(sample: EvalSample, image_index: Mapping[str, Mapping[str, int]]) -> str:
    if sample.image_id not in image_index:
        raise KeyError(f"image {sample.image_id!r} missing from index")
    count = image_index[sample.image_id].get(sample.category, 0)
    if count < 1:
        raise KeyError(f"category {sample.category!r} missing for image {sample.image_id!r}")
    return "unique" if count == 1 else "multiple"


def scenario_label(sample: EvalSample, image_index) -> ScenarioLabel:
    return ScenarioLabel(
        uniqueness=bucket_uniqueness(sample, image_index),
        distance=bucket_distance(sample.depth_gt),
        difficulty=bucket_difficulty(sample.occlusion, sample.truncation),
    )


@dataclass
class BucketStats:
    count: int = 0
    hits: dict = None

    def __post_init__(self):
        if self.hits is None:
            self.hits = {t: 0 for t in THRESHOLDS}

    def add(self, iou: float):
        self.count += 1
        for t in THRESHOLDS:
            if iou >= t:        # a sample exactly at the threshold counts
                self.hits[t] += 1

    def accuracy(self, threshold: float) -> Fraction | None:
        if self.count == 0:
            return None
        return Fraction(100 * self.hits[threshold], self.count)


@dataclass
class AccuracyTable:
    """Per-bucket counts and accuracies, plus the overall row."""

    buckets: dict[str, BucketStats]
    total: int

    def accuracy(self, bucket: str, threshold: float) -> Fraction | None:
        return self.buckets[bucket].accuracy(threshold)

    @staticmethod
    def _cell(acc: Fraction | None) -> str:
        return "—" if acc is None else f"{float(acc):.2f}"

    def render_text(self) -> str:
        lines = []
        headers = ["Unique", "Multiple", "Overall"]
        lines.append("Scenario   " + "".join(f"{h:>18}" for h in headers))
        lines.append("           " + "   Acc@0.25/Acc@0.5" * 3)
        row = []
        for b in ("unique", "multiple", "overall"):
            s = self.buckets[b]
            row.append(f"{self._cell(s.accuracy(0.25))}/{self._cell(s.accuracy(0.5))}")
        lines.append("accuracy   " + "".join(f"{c:>18}" for c in row))
        lines.append("count      " + "".join(
            f"{self.buckets[b].count:>18}" for b in ("unique", "multiple", "overall")))
        lines.append("")
        pair_headers = ["Near/Easy", "Medium/Moderate", "Far/Hard"]
        lines.append("Scenario   " + "".join(f"{h:>22}" for h in pair_headers))
        lines.append("           " + "     Acc@0.25&Acc@0.5" * 3)
        for t in THRESHOLDS:
            cells = []
            for da, db in (("near", "easy"), ("medium", "moderate"), ("far", "hard")):
                cells.append(f"{self._cell(self.accuracy(da, t))}/"
                             f"{self._cell(self.accuracy(db, t))}")
            lines.append(f"Acc@{t:<7}" + "".join(f"{c:>22}" for c in cells))
        counts = []
        for da, db in (("near", "easy"), ("medium", "moderate"), ("far", "hard")):
            counts.append(f"{self.buckets[da].count}/{self.buckets[db].count}")
        lines.append("count      " + "".join(f"{c:>22}" for c in counts))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        out = {"total": self.total, "thresholds": list(THRESHOLDS), "buckets": {}}
        for name, stats in self.buckets.items():
            accs = {f"acc@{t}": (None if stats.accuracy(t) is None
                                 else round(float(stats.accuracy(t)), 2))
                    for t in THRESHOLDS}
            out["buckets"][name] = {"count": stats.count, **accs}
        return out


ALL_BUCKETS = UNIQUENESS_BUCKETS + DISTANCE_BUCKETS + DIFFICULTY_BUCKETS + ("overall",)


def evaluate(samples: Sequence[EvalSample], iou_fn=iou_3d) -> AccuracyTable:
    """Score every sample once and fill all nine scenario buckets plus overall."""
    if not samples:
        raise ValueError("need at least one sample to evaluate")
    ordered = sorted(samples, key=lambda s: s.sample_id)
    index = build_image_index(ordered)
    table = AccuracyTable(buckets={b: BucketStats() for b in ALL_BUCKETS},
                          total=len(ordered))
    for s in ordered:
        label = scenario_label(s, index)
        iou = iou_fn(s.gt, s.pred)
        for bucket in (label.uniqueness, label.distance, label.difficulty, "overall"):
            table.buckets[bucket].add(iou)
    return table
