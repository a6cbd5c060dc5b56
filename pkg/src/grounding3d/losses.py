"""Detection loss stack: focal, L1, GIoU, multi-bin orientation,
Laplacian depth uncertainty, dimension IoU, and depth-map focal terms,
aggregated as weighted_2d + 3d + depth_map.

Every loss maps tensors to a scalar tensor so it can sit on the gradient
tape. Totals are summed left to right exactly as the decomposition is
written, so the breakdown reproduces them bitwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor

P_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four 2D terms; the 3D terms are unweighted."""

    lam1: float = 2.0
    lam2: float = 5.0
    lam3: float = 2.0
    lam4: float = 10.0


@dataclass(frozen=True)
class LossBreakdown:
    """Every term before aggregation, plus the three totals.

    loss_2d = lam1*classification + lam2*lrtb + lam3*giou + lam4*xy3d
    loss_3d = size3d + orientation + depth
    overall = loss_2d + loss_3d + depth_map
    """

    classification: float
    lrtb: float
    giou: float
    xy3d: float
    size3d: float
    orientation: float
    depth: float
    depth_map: float
    loss_2d: float
    loss_3d: float
    overall: float
    node: Tensor | None = None      # overall as a tape node, when inputs were tensors


@dataclass(frozen=True)
class OrientationBins:
    """Evenly spaced yaw bins covering (-pi, pi]."""

    count: int = 12

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"need at least 2 bins, got {self.count}")

    @property
    def width(self) -> float:
        return 2.0 * math.pi / self.count

    def centers(self) -> np.ndarray:
        return -math.pi + self.width * np.arange(self.count)

    def assign(self, angle: float) -> tuple[int, float]:
        """Bin index and residual for an angle; residual in (-width/2, width/2]."""
        a = math.remainder(angle, 2.0 * math.pi)
        if a == -math.pi:
            a = math.pi
        u = (a + math.pi) / self.width
        k = int(math.ceil(u - 0.5))
        residual = a - (-math.pi + k * self.width)
        k %= self.count
        return k, residual


def focal_loss(probs: Tensor, targets: Sequence[int], alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t) over rows.

    Rows must already be probability distributions. A p_t at or below
    zero is clamped to 1e-12 with a warning rather than turning into a
    non-finite loss.
    """
    probs = as_tensor(probs)
    if len(probs.shape) != 2:
        raise ShapeError(f"probs must be (n, C), got {probs.shape}")
    data = probs.data
    if np.any(data < -1e-9) or np.any(np.abs(np.sum(data, axis=1) - 1.0) > 1e-6):
        raise ValueError("probs rows must be probability distributions")
    p_t = T.gather_rows(probs, targets)
    if np.any(p_t.data <= 0.0):
        warnings.warn("focal loss saw p_t <= 0; clamping at 1e-12", RuntimeWarning)
    p_t = T.maximum(p_t, P_CLAMP)
    modulator = T.power(T.sub(1.0, p_t), gamma) if gamma != 0.0 else 1.0
    return T.mean(T.mul(T.mul(modulator, T.log(p_t)), -alpha))


@dataclass(frozen=True)
class BoxRegression:
    """Per-sample 2D regression bundle: edge offsets around a projected center.

    lrtb rows are (left, top, right, bottom) distances from the center to
    the box edges; xy rows are the projected 3D center in pixels. The box
    itself is (x-left, y-top, x+right, y+bottom).
    """

    lrtb: Tensor
    xy: Tensor

    def __post_init__(self):
        lrtb, xy = as_tensor(self.lrtb), as_tensor(self.xy)
        if len(lrtb.shape) != 2 or lrtb.shape[1] != 4:
            raise ShapeError(f"lrtb must be (n, 4), got {lrtb.shape}")
        if xy.shape != (lrtb.shape[0], 2):
            raise ShapeError(f"xy must be ({lrtb.shape[0]}, 2), got {xy.shape}")
        if np.any(lrtb.data[:, 0] + lrtb.data[:, 2] <= 0.0) or \
                np.any(lrtb.data[:, 1] + lrtb.data[:, 3] <= 0.0):
            raise ValueError("lrtb offsets describe an empty box")
        object.__setattr__(self, "lrtb", lrtb)
        object.__setattr__(self, "xy", xy)

    def edges(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        x = T.slice_cols(self.xy, 0, 1)
        y = T.slice_cols(self.xy, 1, 2)
        left = T.sub(x, T.slice_cols(self.lrtb, 0, 1))
        top = T.sub(y, T.slice_cols(self.lrtb, 1, 2))
        right = T.add(x, T.slice_cols(self.lrtb, 2, 3))
        bottom = T.add(y, T.slice_cols(self.lrtb, 3, 4))
        return left, top, right, bottom


@dataclass(frozen=True)
class RegressionLosses:
    lrtb: Tensor
    xy3d: Tensor
    giou: Tensor


def giou_2d_tensor(a_edges, b_edges) -> Tensor:
    """Differentiable GIoU between per-row boxes given as (l, t, r, b) columns."""
    al, at, ar, ab = a_edges
    bl, bt, br, bb = b_edges
    iw = T.relu(T.sub(T.minimum(ar, br), T.maximum(al, bl)))
    ih = T.relu(T.sub(T.minimum(ab, bb), T.maximum(at, bt)))
    inter = T.mul(iw, ih)
    area_a = T.mul(T.sub(ar, al), T.sub(ab, at))
    area_b = T.mul(T.sub(br, bl), T.sub(bb, bt))
    union = T.sub(T.add(area_a, area_b), inter)
    hull = T.mul(T.sub(T.maximum(ar, br), T.minimum(al, bl)),
                 T.sub(T.maximum(ab, bb), T.minimum(at, bt)))
    return T.sub(T.div(inter, union), T.div(T.sub(hull, union), hull))


def regression_losses(pred: BoxRegression, target: BoxRegression) -> RegressionLosses:
    """L1 on edge offsets, L1 on projected centers, and 1 - GIoU on the boxes."""
    if pred.lrtb.shape != target.lrtb.shape:
        raise ShapeError(f"regression shapes differ: {pred.lrtb.shape} vs {target.lrtb.shape}")
    l1_lrtb = T.mean(T.absolute(T.sub(pred.lrtb, target.lrtb)))
    l1_xy = T.mean(T.absolute(T.sub(pred.xy, target.xy)))
    giou = giou_2d_tensor(pred.edges(), target.edges())
    return RegressionLosses(l1_lrtb, l1_xy, T.mean(T.sub(1.0, giou)))


def multibin_loss(pred_bin_logits: Tensor, pred_residuals: Tensor,
                  target_angles: Sequence[float], bins: OrientationBins) -> Tensor:
    """Cross-entropy on the target's bin plus L1 on that bin's residual only."""
    logits = as_tensor(pred_bin_logits)
    residuals = as_tensor(pred_residuals)
    n = logits.shape[0]
    if logits.shape != (n, bins.count) or residuals.shape != (n, bins.count):
        raise ShapeError(f"need (n, {bins.count}) logits and residuals, got "
                         f"{logits.shape} and {residuals.shape}")
    assigned = [bins.assign(float(a)) for a in target_angles]
    idx = [k for k, _ in assigned]
    target_res = np.array([[r] for _, r in assigned])
    ce = T.mean(T.neg(T.gather_rows(T.log_softmax_rows(logits), idx)))
    res_l1 = T.mean(T.absolute(T.sub(T.gather_rows(residuals, idx), Tensor(target_res))))
    return T.add(ce, res_l1)


def laplacian_depth_loss(pred_depth: Tensor, pred_sigma: Tensor, target_depth) -> Tensor:
    """Mean of (sqrt(2)/sigma) * |d - d*| + log(sigma); can go negative."""
    pred_depth = as_tensor(pred_depth)
    pred_sigma = as_tensor(pred_sigma)
    target = as_tensor(target_depth)
    if np.any(pred_sigma.data <= 0.0):
        raise ValueError("predicted sigma must be positive")
    err = T.absolute(T.sub(pred_depth, target))
    return T.mean(T.add(T.mul(T.div(math.sqrt(2.0), pred_sigma), err), T.log(pred_sigma)))


def size3d_iou_loss(pred_dims: Tensor, target_dims) -> Tensor:
    """1 - IoU of the two boxes sharing a center and yaw (dimension-only IoU)."""
    pred = as_tensor(pred_dims)
    target = as_tensor(target_dims)
    if len(pred.shape) != 2 or pred.shape[1] != 3 or pred.shape != target.shape:
        raise ShapeError(f"dims must both be (n, 3), got {pred.shape} and {target.shape}")
    if np.any(pred.data <= 0.0) or np.any(target.data <= 0.0):
        raise ValueError("box dimensions must be positive")

    def volume(t):
        return T.mul(T.mul(T.slice_cols(t, 0, 1), T.slice_cols(t, 1, 2)),
                     T.slice_cols(t, 2, 3))

    inter = volume(T.minimum(pred, target))
    union = T.sub(T.add(volume(pred), volume(target)), inter)
    return T.mean(T.sub(1.0, T.div(inter, union)))


def depth_map_focal_loss(pred_bin_probs: Tensor, target_bins: Sequence[int],
                         alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Focal loss per pixel over discretized depth bins, mean over pixels."""
    return focal_loss(pred_bin_probs, target_bins, alpha=alpha, gamma=gamma)


def depth_bin_index(depth: float, n_bins: int = 80, d_min: float = 1e-3,
                    d_max: float = 60.0) -> int:
    """Linear-increasing discretization: bin edges at d_min + span*i(i+1)/(D(D+1)).

    Depths outside [d_min, d_max) clamp to the end bins. Boundary decisions
    compare against edges computed in depth space, so exact edge values land
    in the bin they open.
    """
    if depth <= d_min:
        return 0
    if depth >= d_max:
        return n_bins - 1

    def edge(j):
        return d_min + (d_max - d_min) * j * (j + 1) / (n_bins * (n_bins + 1))

    t = (depth - d_min) / (d_max - d_min)
    i = int((-1.0 + math.sqrt(1.0 + 4.0 * n_bins * (n_bins + 1) * t)) / 2.0)
    i = min(max(i, 0), n_bins - 1)
    # the closed form can land one off at edges; settle it in depth space
    while i > 0 and depth < edge(i):
        i -= 1
    while i < n_bins - 1 and depth >= edge(i + 1):
        i += 1
    return i


def aggregate(classification, lrtb, giou, xy3d, size3d, orientation, depth,
              depth_map, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Combine the eight terms into the weighted 2D, 3D, and overall totals.

    Accepts floats or scalar tensors; with tensors, the overall total is
    also returned as a tape node for backward.
    """
    parts = {"classification": classification, "lrtb": lrtb, "giou": giou,
             "xy3d": xy3d, "size3d": size3d, "orientation": orientation,
             "depth": depth, "depth_map": depth_map}
    on_tape = any(isinstance(v, Tensor) for v in parts.values())
    for name, v in parts.items():
        val = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise ValueError(f"loss component {name} is not finite: {val}")

    if on_tape:
        t = {k: as_tensor(v) for k, v in parts.items()}
        loss_2d = T.add(T.add(T.add(T.mul(weights.lam1, t["classification"]),
                                    T.mul(weights.lam2, t["lrtb"])),
                              T.mul(weights.lam3, t["giou"])),
                        T.mul(weights.lam4, t["xy3d"]))
        loss_3d = T.add(T.add(t["size3d"], t["orientation"]), t["depth"])
        overall = T.add(T.add(loss_2d, loss_3d), t["depth_map"])
        node = overall
        f2d, f3d, fall = loss_2d.item(), loss_3d.item(), overall.item()
    else:
        f = {k: float(v) for k, v in parts.items()}
        f2d = weights.lam1 * f["classification"] + weights.lam2 * f["lrtb"] \
            + weights.lam3 * f["giou"] + weights.lam4 * f["xy3d"]
        f3d = f["size3d"] + f["orientation"] + f["depth"]
        fall = f2d + f3d + f["depth_map"]
        node = None

    scalars = {k: (v.item() if isinstance(v, Tensor) else float(v))
               for k, v in parts.items()}
    return LossBreakdown(**scalars, loss_2d=f2d, loss_3d=f3d, overall=fall, node=node)
