import math

import numpy as np
import pytest

from grounding3d import losses as L
from grounding3d import tensor as T
from grounding3d.tensor import ShapeError, Tensor, backward, grad_check


def one_hotish(n, c, target, p):
    """Rows with probability p on the target class, rest spread evenly."""
    out = np.full((n, c), (1.0 - p) / (c - 1))
    for i in range(n):
        out[i, target[i]] = p
    return out


def test_focal_perfect_prediction_is_zero():
    probs = Tensor(one_hotish(3, 9, [0, 4, 8], 1.0))
    assert L.focal_loss(probs, [0, 4, 8]).item() == pytest.approx(0.0, abs=1e-12)


def test_focal_half_confidence_closed_form():
    probs = Tensor(one_hotish(1, 9, [2], 0.5))
    expected = 0.25 * 0.25 * math.log(2.0)
    assert L.focal_loss(probs, [2]).item() == pytest.approx(expected, abs=1e-12)


def test_focal_reduces_to_cross_entropy():
    rng = np.random.default_rng(0)
    raw = rng.uniform(0.05, 1.0, size=(4, 9))
    probs = raw / raw.sum(axis=1, keepdims=True)
    targets = [1, 3, 0, 8]
    focal = L.focal_loss(Tensor(probs), targets, alpha=1.0, gamma=0.0).item()
    ce = -np.mean([math.log(probs[i, t]) for i, t in enumerate(targets)])
    assert focal == pytest.approx(ce, abs=1e-12)


def test_focal_clamps_zero_probability_with_warning():
    probs = Tensor(one_hotish(1, 4, [0], 1.0))
    with pytest.warns(RuntimeWarning):
        val = L.focal_loss(probs, [1]).item()
    assert math.isfinite(val)


def test_focal_rejects_non_distribution():
    with pytest.raises(ValueError):
        L.focal_loss(Tensor([[0.9, 0.9]]), [0])


def test_focal_gradcheck():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal((3, 5)))

    def f(t):
        return L.focal_loss(T.softmax_rows(t), [1, 0, 4])

    assert grad_check(f, logits) < 1e-5


def make_regression(lrtb, xy):
    return L.BoxRegression(Tensor(np.atleast_2d(lrtb)), Tensor(np.atleast_2d(xy)))


def test_regression_losses_zero_at_perfect():
    pred = make_regression([10.0, 5.0, 12.0, 6.0], [100.0, 50.0])
    target = make_regression([10.0, 5.0, 12.0, 6.0], [100.0, 50.0])
    out = L.regression_losses(pred, target)
    assert out.lrtb.item() == 0.0
    assert out.xy3d.item() == 0.0
    assert out.giou.item() == pytest.approx(0.0, abs=1e-12)


def test_regression_l1_unit_offsets():
    pred = make_regression([11.0, 6.0, 13.0, 7.0], [101.0, 51.0])
    target = make_regression([10.0, 5.0, 12.0, 6.0], [100.0, 50.0])
    out = L.regression_losses(pred, target)
    assert out.lrtb.item() == pytest.approx(1.0)
    assert out.xy3d.item() == pytest.approx(1.0)


def test_regression_giou_matches_geometry_module():
    from grounding3d.geometry import Box2D, giou_2d

    # the disjoint pair whose GIoU is -1/3
    pred = make_regression([0.5, 0.5, 0.5, 0.5], [0.5, 0.5])     # box [0,0,1,1]
    target = make_regression([0.5, 0.5, 0.5, 0.5], [2.5, 0.5])   # box [2,0,3,1]
    out = L.regression_losses(pred, target)
    assert out.giou.item() == pytest.approx(4.0 / 3.0, abs=1e-12)
    assert out.giou.item() == pytest.approx(
        1.0 - giou_2d(Box2D(0, 0, 1, 1), Box2D(2, 0, 3, 1)), abs=1e-12)


def test_regression_tensor_giou_agrees_with_float_giou_randomized():
    from grounding3d.geometry import Box2D, giou_2d

    rng = np.random.default_rng(2)
    for _ in range(50):
        lrtb_a = rng.uniform(0.2, 5.0, size=4)
        lrtb_b = rng.uniform(0.2, 5.0, size=4)
        xy_a = rng.uniform(-3, 3, size=2)
        xy_b = xy_a + rng.uniform(-4, 4, size=2)
        out = L.regression_losses(make_regression(lrtb_a, xy_a),
                                  make_regression(lrtb_b, xy_b))
        box_a = Box2D(xy_a[0] - lrtb_a[0], xy_a[1] - lrtb_a[1],
                      xy_a[0] + lrtb_a[2], xy_a[1] + lrtb_a[3])
        box_b = Box2D(xy_b[0] - lrtb_b[0], xy_b[1] - lrtb_b[1],
                      xy_b[0] + lrtb_b[2], xy_b[1] + lrtb_b[3])
        assert out.giou.item() == pytest.approx(1.0 - giou_2d(box_a, box_b), abs=1e-10)


def test_regression_gradcheck():
    rng = np.random.default_rng(3)
    target = make_regression(rng.uniform(1, 3, size=4), rng.uniform(-1, 1, size=2))

    def f(t):
        pred = L.BoxRegression(T.add(T.absolute(t), 0.5), Tensor([[0.3, -0.2]]))
        out = L.regression_losses(pred, target)
        return T.add(T.add(out.lrtb, out.xy3d), out.giou)

    assert grad_check(f, Tensor(rng.uniform(0.5, 2.0, size=(1, 4)))) < 1e-5


def test_multibin_bin_assignment_convention():
    bins = L.OrientationBins(12)
    k, r = bins.assign(0.0)
    assert k == 6 and r == pytest.approx(0.0)
    k, r = bins.assign(math.pi)
    assert k == 0 and r == pytest.approx(0.0)      # pi wraps onto the -pi center
    k, r = bins.assign(-math.pi + 0.1)
    assert k == 0 and r == pytest.approx(0.1)
    # angles outside (-pi, pi] are normalized first
    wrapped, direct = bins.assign(2 * math.pi + 0.3), bins.assign(0.3)
    assert wrapped[0] == direct[0]
    assert wrapped[1] == pytest.approx(direct[1], abs=1e-12)
    # residual always in (-pi/B, pi/B]
    for a in np.linspace(-3 * math.pi, 3 * math.pi, 301):
        _, r = bins.assign(float(a))
        assert -bins.width / 2 < r <= bins.width / 2 + 1e-15


def test_multibin_confident_correct_is_near_zero():
    bins = L.OrientationBins(12)
    angle = bins.centers()[4]
    logits = np.full((1, 12), -10.0)
    logits[0, 4] = 10.0          # margin 20
    residuals = np.zeros((1, 12))
    loss = L.multibin_loss(Tensor(logits), Tensor(residuals), [angle], bins)
    assert loss.item() < 1e-3


def test_multibin_uniform_logits_closed_form():
    bins = L.OrientationBins(12)
    loss = L.multibin_loss(Tensor(np.zeros((1, 12))), Tensor(np.zeros((1, 12))),
                           [bins.centers()[3]], bins)
    assert loss.item() == pytest.approx(math.log(12.0), abs=1e-12)


def test_multibin_gradcheck():
    bins = L.OrientationBins(8)
    rng = np.random.default_rng(4)
    logits = Tensor(rng.standard_normal((2, 8)))
    residuals = Tensor(rng.standard_normal((2, 8)))
    angles = [0.4, -2.0]

    def f(t):
        return L.multibin_loss(t, residuals, angles, bins)

    assert grad_check(f, logits) < 1e-5

    def g(t):
        return L.multibin_loss(logits, t, angles, bins)

    assert grad_check(g, residuals) < 1e-5


def test_laplacian_depth_cases():
    one = Tensor([[1.0]])
    assert L.laplacian_depth_loss(Tensor([[5.0]]), one, Tensor([[5.0]])).item() == 0.0
    assert L.laplacian_depth_loss(Tensor([[6.0]]), one, Tensor([[5.0]])).item() == \
        pytest.approx(math.sqrt(2.0), abs=1e-12)
    with pytest.raises(ValueError):
        L.laplacian_depth_loss(Tensor([[1.0]]), Tensor([[0.0]]), Tensor([[1.0]]))


def test_laplacian_stationary_sigma():
    """For a fixed error e, the loss is minimized at sigma = sqrt(2) * e."""
    e = 0.8
    sigma_star = math.sqrt(2.0) * e
    pred_d, target_d = Tensor([[e]]), Tensor([[0.0]])
    sigma = Tensor([[sigma_star]], trainable=True)
    loss = L.laplacian_depth_loss(pred_d, sigma, target_d)
    assert loss.item() == pytest.approx(1.0 + math.log(sigma_star), abs=1e-12)
    grad = backward(loss, leaves=[sigma])[id(sigma)]
    assert abs(grad[0, 0]) < 1e-12


def test_laplacian_gradcheck():
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)))

    def f(t):
        sigma = T.exp(t)
        return L.laplacian_depth_loss(Tensor([[4.0], [5.0], [6.0]]), sigma,
                                      Tensor([[4.5], [5.5], [5.0]]))

    assert grad_check(f, x) < 1e-5


def test_size3d_cases():
    same = Tensor([[2.0, 1.0, 1.5]])
    assert L.size3d_iou_loss(same, same).item() == pytest.approx(0.0, abs=1e-12)
    loss = L.size3d_iou_loss(Tensor([[2.0, 1.0, 1.0]]), Tensor([[1.0, 1.0, 1.0]]))
    assert loss.item() == pytest.approx(0.5, abs=1e-12)
    doubled = L.size3d_iou_loss(Tensor([[4.0, 2.0, 2.0]]), Tensor([[2.0, 2.0, 2.0]]))
    assert doubled.item() == pytest.approx(loss.item(), abs=1e-12)
    with pytest.raises(ValueError):
        L.size3d_iou_loss(Tensor([[1.0, -1.0, 1.0]]), same)


def test_size3d_gradcheck():
    target = Tensor([[2.0, 1.5, 1.2], [1.0, 1.0, 3.0]])

    def f(t):
        return L.size3d_iou_loss(T.exp(t), target)

    assert grad_check(f, Tensor(np.random.default_rng(6).uniform(-0.5, 0.5, (2, 3)))) < 1e-5


def test_depth_map_focal_matches_scalar_case():
    probs = Tensor(one_hotish(1, 4, [2], 0.5))
    dm = L.depth_map_focal_loss(probs, [2])
    assert dm.item() == pytest.approx(0.25 * 0.25 * math.log(2.0), abs=1e-12)


def test_depth_map_uniform_closed_form():
    probs = Tensor(np.full((5, 4), 0.25))
    expected = 0.25 * (0.75 ** 2) * math.log(4.0)
    assert L.depth_map_focal_loss(probs, [0, 1, 2, 3, 0]).item() == \
        pytest.approx(expected, abs=1e-12)


def test_depth_map_perfect_one_hot_is_zero():
    probs = np.zeros((3, 4))
    probs[[0, 1, 2], [1, 2, 0]] = 1.0
    with np.errstate(all="ignore"):
        val = L.depth_map_focal_loss(Tensor(probs), [1, 2, 0]).item()
    assert val == pytest.approx(0.0, abs=1e-12)


def test_depth_bin_index_matches_edge_scan():
    n_bins, d_min, d_max = 80, 1e-3, 60.0
    edges = [d_min + (d_max - d_min) * i * (i + 1) / (n_bins * (n_bins + 1))
             for i in range(n_bins + 1)]

    def oracle(d):
        if d <= d_min:
            return 0
        if d >= d_max:
            return n_bins - 1
        for i in range(n_bins):
            if edges[i] <= d < edges[i + 1]:
                return i
        return n_bins - 1

    for d in np.linspace(-1, 70, 900):
        assert L.depth_bin_index(float(d)) == oracle(float(d))
    for i in range(n_bins):
        assert L.depth_bin_index(edges[i]) == max(0, i if i else 0)


def test_aggregate_all_ones_matches_weighted_sum():
    bd = L.aggregate(1, 1, 1, 1, 1, 1, 1, 1)
    assert bd.loss_2d == 19.0
    assert bd.loss_3d == 3.0
    assert bd.overall == 23.0


def test_aggregate_zeroes():
    bd = L.aggregate(0, 0, 0, 0, 0, 0, 0, 0)
    assert bd.overall == 0.0


def test_aggregate_breakdown_identity_bitwise():
    rng = np.random.default_rng(7)
    vals = rng.uniform(0, 3, size=8)
    w = L.LossWeights()
    bd = L.aggregate(*vals, weights=w)
    assert bd.loss_2d == w.lam1 * vals[0] + w.lam2 * vals[1] + w.lam3 * vals[2] + w.lam4 * vals[3]
    assert bd.loss_3d == vals[4] + vals[5] + vals[6]
    assert bd.overall == bd.loss_2d + bd.loss_3d + vals[7]


def test_aggregate_tensor_path_matches_float_path_bitwise():
    rng = np.random.default_rng(8)
    vals = rng.uniform(0, 3, size=8)
    float_bd = L.aggregate(*vals)
    tensor_bd = L.aggregate(*(Tensor(v) for v in vals))
    assert tensor_bd.overall == float_bd.overall
    assert tensor_bd.node is not None
    assert tensor_bd.node.item() == float_bd.overall


def test_aggregate_rejects_non_finite():
    with pytest.raises(ValueError, match="orientation"):
        L.aggregate(1, 1, 1, 1, 1, float("nan"), 1, 1)
