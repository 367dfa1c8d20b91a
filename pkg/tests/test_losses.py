import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geocolor.losses import (
    LossReport,
    LossWeights,
    PredictionPair,
    object_contrast_loss,
    point_contrast_loss,
    point_reconstruct_loss,
    select_objects,
    softmax,
    swapped_prediction_loss,
    total_loss,
)
from geocolor.sinkhorn import sinkhorn_assign

from conftest import central_diff, rel_err


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def unit_cols(rng, d, k):
    return unit_rows(rng, k, d).T.copy()


def softplus(x):
    return math.log1p(math.exp(x))


def info_nce_bruteforce(a, c, tau):
    total = 0.0
    for i in range(len(a)):
        num = math.exp(float(a[i] @ c[i]) / tau)
        den = sum(math.exp(float(a[i] @ c[j]) / tau) for j in range(len(c)))
        total -= math.log(num / den)
    return total


# --- point contrast ---------------------------------------------------------


@pytest.mark.parametrize("M", [2, 5, 17])
@pytest.mark.parametrize("tau", [0.1, 0.4, 2.0])
def test_point_contrast_identical_rows(M, tau):
    z = np.tile(unit_rows(np.random.default_rng(0), 1, 6), (M, 1))
    value, _ = point_contrast_loss(z, z.copy(), tau)
    assert value == pytest.approx(M * math.log(M), rel=1e-12)


def test_point_contrast_two_orthogonal_pairs():
    z = np.eye(2)
    value, _ = point_contrast_loss(z, z.copy(), 0.4)
    per_point = -math.log(math.exp(2.5) / (math.exp(2.5) + 1))
    assert value == pytest.approx(2 * per_point, rel=1e-12)
    assert value == pytest.approx(2 * softplus(-2.5), rel=1e-12)


def test_point_contrast_matches_bruteforce():
    rng = np.random.default_rng(1)
    a, c = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
    assert point_contrast_loss(a, c, 0.4)[0] == pytest.approx(info_nce_bruteforce(a, c, 0.4), rel=1e-12)


def test_point_contrast_gradients():
    rng = np.random.default_rng(2)
    a, c = unit_rows(rng, 4, 8), unit_rows(rng, 4, 8)
    _, g = point_contrast_loss(a, c, 0.4)
    f = lambda: point_contrast_loss(a, c, 0.4)[0]
    assert rel_err(g["z_geo"], central_diff(f, a)) < 1e-4
    assert rel_err(g["z_color"], central_diff(f, c)) < 1e-4


def test_point_contrast_rejects_single_point():
    with pytest.raises(ValueError):
        point_contrast_loss(np.ones((1, 3)), np.ones((1, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_point_contrast_permutation_invariant_and_nonnegative(M, seed):
    rng = np.random.default_rng(seed)
    a, c = unit_rows(rng, M, 5), unit_rows(rng, M, 5)
    v, _ = point_contrast_loss(a, c)
    perm = rng.permutation(M)
    assert v >= 0
    assert point_contrast_loss(a[perm], c[perm])[0] == pytest.approx(v, rel=1e-12, abs=1e-12)


def test_point_contrast_is_directional():
    rng = np.random.default_rng(3)
    a, c = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    assert point_contrast_loss(a, c)[0] != pytest.approx(point_contrast_loss(c, a)[0])


# --- reconstruction ---------------------------------------------------------


def test_reconstruct_zero_and_offset():
    rng = np.random.default_rng(4)
    g, c = rng.uniform(size=(10, 3)), rng.uniform(size=(10, 3))
    assert point_reconstruct_loss(g, c, g, c)[0] == 0.0
    v, _ = point_reconstruct_loss(g + [0.1, 0, 0], c, g, c)
    assert v == pytest.approx(0.01, rel=1e-12)


def test_reconstruct_bruteforce_and_gradient():
    rng = np.random.default_rng(5)
    pg, pc, g, c = (rng.uniform(size=(7, 3)) for _ in range(4))
    ref = sum((g[i, j] - pg[i, j]) ** 2 for i in range(7) for j in range(3)) / 7
    ref += sum((c[i, j] - pc[i, j]) ** 2 for i in range(7) for j in range(3)) / 7
    v, grads = point_reconstruct_loss(pg, pc, g, c)
    assert abs(v - ref) < 1e-12
    f = lambda: point_reconstruct_loss(pg, pc, g, c)[0]
    assert rel_err(grads["p_hat_geo"], central_diff(f, pg)) < 1e-4
    assert rel_err(grads["p_hat_color"], central_diff(f, pc)) < 1e-4


def test_reconstruct_shape_mismatch():
    with pytest.raises(ValueError):
        point_reconstruct_loss(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((4, 3)), np.zeros((3, 3)))


# --- swapped prediction -------------------------------------------------------


def swapped_bruteforce(q_geo, q_color, p_geo, p_color):
    B, K = q_geo.shape
    acc = 0.0
    for b in range(B):
        for k in range(K):
            acc += q_geo[b, k] * math.log(p_color[b, k]) + q_color[b, k] * math.log(p_geo[b, k])
    return -0.5 * acc / (B * K)


def test_swapped_single_cluster_is_zero():
    rng = np.random.default_rng(6)
    z = unit_rows(rng, 5, 3)
    C = unit_cols(rng, 3, 1)
    v, grads, preds = swapped_prediction_loss(z, z, C)
    assert v == 0.0
    assert np.all(preds.P_geo == 1.0) and np.all(preds.Q_color == 1.0)
    assert np.all(grads["z_geo"] == 0.0) and np.all(grads["prototypes"] == 0.0)


def test_swapped_uniform_prediction_constant():
    # identical prototype columns -> P uniform -> value = log(K) / K under the mean convention
    rng = np.random.default_rng(7)
    B, K = 2, 2
    z_geo, z_color = unit_rows(rng, B, 3), unit_rows(rng, B, 3)
    C = np.tile(unit_cols(rng, 3, 1), (1, K))
    q = np.array([[0.3, 0.7], [0.9, 0.1]])
    v, _, preds = swapped_prediction_loss(z_geo, z_color, C, targets=(q, q[::-1].copy()))
    brute = swapped_bruteforce(q, q[::-1], preds.P_geo, preds.P_color)
    assert v == pytest.approx(brute, rel=1e-12)
    assert v == pytest.approx(math.log(K) / K, rel=1e-12)


def test_swapped_matches_bruteforce_with_sinkhorn_targets():
    rng = np.random.default_rng(8)
    z_geo, z_color = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
    C = unit_cols(rng, 4, 3)
    v, _, preds = swapped_prediction_loss(z_geo, z_color, C)
    assert np.allclose(preds.Q_geo, sinkhorn_assign(z_geo @ C, 0.05, 3))
    assert np.allclose(preds.P_color, softmax(z_color @ C / 0.1))
    assert v == pytest.approx(swapped_bruteforce(preds.Q_geo, preds.Q_color, preds.P_geo, preds.P_color), rel=1e-12)


def test_swapped_gradients_with_frozen_targets():
    rng = np.random.default_rng(9)
    z_geo, z_color = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    C = unit_cols(rng, 4, 3)
    _, grads, preds = swapped_prediction_loss(z_geo, z_color, C)
    targets = (preds.Q_geo, preds.Q_color)
    f = lambda: swapped_prediction_loss(z_geo, z_color, C, targets=targets)[0]
    assert rel_err(grads["z_geo"], central_diff(f, z_geo)) < 1e-4
    assert rel_err(grads["z_color"], central_diff(f, z_color)) < 1e-4
    assert rel_err(grads["prototypes"], central_diff(f, C)) < 1e-4


def test_swapped_global_shift_invariance():
    # a global score shift passes through both softmax and Sinkhorn unchanged; emulate it
    # with an extra constant feature dimension that every prototype reads equally
    rng = np.random.default_rng(10)
    z_geo, z_color = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
    C = unit_cols(rng, 3, 4)
    base = swapped_prediction_loss(z_geo, z_color, C)[0]
    ones = np.ones((6, 1))
    shifted = swapped_prediction_loss(np.hstack([z_geo, ones]), np.hstack([z_color, ones]),
                                      np.vstack([C, np.full((1, 4), 0.3)]))[0]
    assert shifted == pytest.approx(base, abs=1e-12)


def test_swapped_per_row_shift_with_frozen_targets():
    rng = np.random.default_rng(11)
    z_geo, z_color = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
    C = unit_cols(rng, 3, 4)
    v, _, preds = swapped_prediction_loss(z_geo, z_color, C)
    targets = (preds.Q_geo, preds.Q_color)
    shift = rng.normal(size=(6, 1))
    v2 = swapped_prediction_loss(np.hstack([z_geo, shift]), np.hstack([z_color, shift]),
                                 np.vstack([C, np.ones((1, 4))]), targets=targets)[0]
    assert v2 == pytest.approx(v, abs=1e-12)


def test_naive_softmax_targets():
    rng = np.random.default_rng(12)
    z_geo, z_color = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
    C = unit_cols(rng, 3, 4)
    _, _, preds = swapped_prediction_loss(z_geo, z_color, C, target_mode="softmax")
    assert np.array_equal(preds.Q_geo, preds.P_geo)


# --- object contrast ----------------------------------------------------------


def make_preds(labels_geo, labels_color, K, conf=0.9):
    def one(labels):
        P = np.full((len(labels), K), (1 - conf) / (K - 1))
        P[np.arange(len(labels)), labels] = conf
        return P

    Pg, Pc = one(labels_geo), one(labels_color)
    return PredictionPair(Pg, Pc, Pg.copy(), Pc.copy())


def test_object_contrast_two_orthogonal_labels():
    # rows for label 0 all equal e0, label 1 all equal e1, in both branches
    z = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0]])
    preds = make_preds([0, 0, 1, 1], [0, 0, 1, 1], K=4)
    v, _ = object_contrast_loss(z, z.copy(), preds)
    expected = 2 * -math.log(math.exp(2.5) / (math.exp(2.5) + 1))
    assert v == pytest.approx(expected, rel=1e-12)


def test_object_contrast_low_confidence_fallback():
    rng = np.random.default_rng(13)
    z = unit_rows(rng, 6, 3)
    preds = make_preds([0, 1, 2, 0, 1, 2], [0, 1, 2, 0, 1, 2], K=4, conf=0.4)  # threshold 0.5
    v, g = object_contrast_loss(z, z.copy(), preds)
    assert v == 0.0 and not g["z_geo"].any() and not g["z_color"].any()


def test_object_contrast_single_shared_label():
    rng = np.random.default_rng(14)
    z = unit_rows(rng, 4, 3)
    preds = make_preds([0, 0, 1, 1], [0, 0, 2, 2], K=4)
    sel = select_objects(preds)
    assert list(sel.labels) == [0]
    v, g = object_contrast_loss(z, z.copy(), preds)
    assert v == 0.0 and not g["z_geo"].any()


def test_object_contrast_threshold_is_strict():
    preds = make_preds([0, 1], [0, 1], K=4, conf=0.5)
    assert len(select_objects(preds, 2.0).labels) == 0
    assert len(select_objects(preds, 1.9).labels) == 2


def test_object_contrast_gradients():
    rng = np.random.default_rng(15)
    z_geo, z_color = unit_rows(rng, 9, 4), unit_rows(rng, 9, 4)
    preds = make_preds([0, 1, 2, 0, 1, 2, 0, 1, 2], [0, 0, 1, 1, 2, 2, 0, 1, 2], K=4)
    sel = select_objects(preds)
    _, g = object_contrast_loss(z_geo, z_color, selection=sel)
    f = lambda: object_contrast_loss(z_geo, z_color, selection=sel)[0]
    assert rel_err(g["z_geo"], central_diff(f, z_geo)) < 1e-4
    assert rel_err(g["z_color"], central_diff(f, z_color)) < 1e-4


# --- total -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "parts,expected",
    [((1, 0, 0, 0), 1.0), ((0, 1, 0, 0), 100.0), ((1, 2, 3, 4), 505.0)],
)
def test_total_loss(parts, expected):
    assert total_loss(parts) == expected
    assert total_loss(LossReport(*parts)) == expected


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1e3), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 10))
def test_total_loss_linear(parts, i, scale):
    w = LossWeights(2.0, 3.0, 5.0)
    bumped = list(parts)
    bumped[i] += scale
    coef = (1.0, 2.0, 3.0, 5.0)[i]
    assert total_loss(bumped, w) == pytest.approx(total_loss(parts, w) + coef * scale, rel=1e-12, abs=1e-9)


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)
