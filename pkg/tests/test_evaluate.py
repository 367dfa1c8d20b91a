import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geocolor.evaluate import (
    METRIC_CSV_COLUMNS,
    apply_mapping,
    compute_miou,
    confusion_matrix,
    evaluate_dataset,
    format_metrics,
    fuse_pseudo_labels,
    hungarian_align,
    matched_count,
    metrics_csv,
    metrics_from_confusion,
    permutation_band,
    reconstruct,
    reconstruct_export,
    unsup_segment,
)
from geocolor.model import ModelConfig, ModelParams
from geocolor.scene import LabeledPointCloud, SceneSpec, generate_scene, load_cloud

_PERMS = {}


def all_perms(n):
    if n not in _PERMS:
        _PERMS[n] = np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)
    return _PERMS[n]


def brute_force_align(cm):
    """Exhaustive search over padded square assignments; first maximum = lexicographically smallest."""
    k_pred, k_gt = cm.shape
    n = max(k_pred, k_gt)
    sq = np.zeros((n, n), dtype=np.int64)
    sq[:k_pred, :k_gt] = cm
    perms = all_perms(n)
    totals = sq[np.arange(n), perms].sum(axis=1)
    best = perms[int(np.argmax(totals))]
    return {i: int(best[i]) for i in range(k_pred) if best[i] < k_gt}, int(totals.max())


# --- fusion -------------------------------------------------------------------


def test_fuse_one_hot():
    eye = np.eye(4)[[2, 0, 3, 1]]
    assert list(fuse_pseudo_labels(eye, eye)) == [2, 0, 3, 1]


def test_fuse_disagreement_and_tie():
    geo = np.array([[0.6, 0.4], [0.5, 0.5]])
    col = np.array([[0.3, 0.7], [0.5, 0.5]])
    assert list(fuse_pseudo_labels(geo, col)) == [1, 0]


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_pseudo_labels(np.ones((2, 3)), np.ones((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_fuse_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    a, b = rng.dirichlet(np.ones(5), 20), rng.dirichlet(np.ones(5), 20)
    assert np.array_equal(fuse_pseudo_labels(a, b), fuse_pseudo_labels(scale * a, scale * b))


# --- hungarian ----------------------------------------------------------------------


def test_diagonal_gives_identity():
    cm = np.diag([5, 3, 9, 1])
    assert hungarian_align(cm) == {0: 0, 1: 1, 2: 2, 3: 3}


def test_permuted_diagonal_gives_inverse():
    perm = [2, 0, 3, 1]
    cm = np.eye(4, dtype=np.int64)[perm] * np.array([4, 7, 2, 9])
    mapping = hungarian_align(cm)
    assert all(cm[i, j] > 0 for i, j in mapping.items())
    assert mapping == {i: perm[i] for i in range(4)}


def test_six_by_six_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    cm = rng.integers(0, 50, size=(6, 6))
    mapping = hungarian_align(cm)
    best = max(sum(cm[i, p[i]] for i in range(6)) for p in itertools.permutations(range(6)))
    assert matched_count(cm, mapping) == best
    assert mapping == brute_force_align(cm)[0]


@pytest.mark.parametrize("shape", [(3, 5), (5, 3), (1, 4), (4, 1), (1, 1)])
def test_rectangular(shape):
    rng = np.random.default_rng(sum(shape))
    cm = rng.integers(0, 9, size=shape)
    mapping = hungarian_align(cm)
    assert len(mapping) == min(shape)
    assert len(set(mapping.values())) == len(mapping)
    assert mapping == brute_force_align(cm)[0]


def test_all_zero_matrix_is_lexicographic_identity():
    assert hungarian_align(np.zeros((3, 3), dtype=np.int64)) == {0: 0, 1: 1, 2: 2}


def test_huge_counts_stay_exact():
    cm = np.array([[10**12, 10**12 + 1], [10**12 + 1, 10**12]], dtype=np.int64)
    assert hungarian_align(cm) == {0: 1, 1: 0}


def test_rejects_float_counts():
    with pytest.raises(ValueError):
        hungarian_align(np.ones((2, 2)))


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1), st.sampled_from([2, 5, 1000]))
def test_hungarian_equals_brute_force(k_pred, k_gt, seed, high):
    cm = np.random.default_rng(seed).integers(0, high, size=(k_pred, k_gt))
    mapping = hungarian_align(cm)
    ref_map, ref_total = brute_force_align(cm)
    assert matched_count(cm, mapping) == ref_total
    assert mapping == ref_map


# --- miou -------------------------------------------------------------------------


def test_miou_perfect_and_disjoint():
    gt = np.array([0, 0, 1, 1, 2])
    assert compute_miou(gt, gt, 3).miou == 1.0
    assert compute_miou((gt + 1) % 3, gt, 3).miou == 0.0


def test_miou_hand_counted():
    gt = np.repeat([0, 1], 100)
    pred = gt.copy()
    pred[:50] = 1
    m = compute_miou(pred, gt, 2)
    assert m.per_class_iou[0] == pytest.approx(0.5, abs=1e-12)
    assert m.per_class_iou[1] == pytest.approx(100 / 150, abs=1e-12)
    assert m.miou == pytest.approx(0.5833333333, abs=1e-9)


def test_miou_absent_class_excluded_and_missing_prediction_zero():
    gt = np.array([0, 0, 2, 2])
    pred = np.array([0, 0, 0, 0])
    m = compute_miou(pred, gt, 4)
    assert np.isnan(m.per_class_iou[1]) and np.isnan(m.per_class_iou[3])
    assert m.per_class_iou[2] == 0.0
    assert m.miou == pytest.approx(0.25)


def test_miou_errors():
    with pytest.raises(ValueError):
        compute_miou([0, 1], [0, 1, 1], 2)
    with pytest.raises(ValueError):
        compute_miou([0, 1], [0, 5], 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_miou_range_and_relabel_invariance(k, n, seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, k, n), rng.integers(0, k, n)
    m = compute_miou(pred, gt, k)
    assert 0.0 <= m.miou <= 1.0
    perm = rng.permutation(k)
    assert compute_miou(perm[pred], perm[gt], k).miou == pytest.approx(m.miou, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 80), st.integers(0, 2**32 - 1))
def test_aligned_metrics_agree_with_label_level_oracle(kp, kg, n, seed):
    rng = np.random.default_rng(seed)
    pseudo, gt = rng.integers(0, kp, n), rng.integers(0, kg, n)
    m = metrics_from_confusion(confusion_matrix(pseudo, gt, kp, kg))
    ref = compute_miou(apply_mapping(pseudo, m.mapping), gt, kg)
    assert np.allclose(m.per_class_iou, ref.per_class_iou, equal_nan=True, atol=1e-12)


def test_confusion_total_and_orientation():
    cm = confusion_matrix([0, 1, 1], [2, 2, 0], 2, 3)
    assert cm.tolist() == [[0, 0, 1], [1, 0, 1]]
    assert cm.sum() == 3


def test_permutation_band_is_sorted_and_reproducible():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, 200)
    band = permutation_band(gt, gt, 4, 4, draws=50, seed=3)
    assert np.all(np.diff(band) >= 0)
    assert np.array_equal(band, permutation_band(gt, gt, 4, 4, draws=50, seed=3))
    assert band[-1] < 0.5  # a perfect prediction shuffled is near chance


# --- segmentation and export -------------------------------------------------------


def small_cloud(seed=0):
    return generate_scene(SceneSpec(num_objects=4, num_classes=4, points_per_object=20), seed)


def test_unsup_segment_leaves_params_untouched():
    params = ModelParams.init(ModelConfig(num_prototypes=6), 0)
    before = params.digest()
    cloud = small_cloud()
    a, ma = unsup_segment(params, cloud, 4)
    b, mb = unsup_segment(params, cloud, 4)
    assert params.digest() == before
    assert np.array_equal(a, b) and ma.miou == mb.miou
    assert ma.confusion.shape == (6, 4)
    assert ma.num_points == len(cloud)


def test_unsup_segment_without_labels():
    params = ModelParams.init(ModelConfig(num_prototypes=3), 0)
    cloud = small_cloud()
    pseudo, metrics = unsup_segment(params, LabeledPointCloud(cloud.coords, cloud.colors))
    assert metrics is None and len(pseudo) == len(cloud)


def colour_oracle_params(palette):
    """Identity network that reads the class off the palette colour.

    The geometry branch is zeroed so its projection is the zero vector (uniform
    prediction); the colour branch maps each palette entry to 10 x one-hot.
    """
    K = len(palette)
    cfg = ModelConfig(d_emb=4, hidden=4, depth=1, d_feat=4, d_proj=K, num_prototypes=K, activation="identity")
    params = ModelParams.init(cfg, 0)
    e = params.embedding
    for arr in (e.W_geo, e.b_geo, e.W_color, e.b_color, e.W_pos, e.b_pos):
        arr[:] = 0
    e.W_color[:, :3] = np.eye(3)
    e.b_color[3] = 1.0
    params.encoder.weights[0][:] = np.eye(4)
    params.encoder.biases[0][:] = 0
    X = np.hstack([palette, np.ones((K, 1))])
    params.head.W[:] = np.linalg.solve(X, 10.0 * np.eye(K))
    params.head.b[:] = 0
    params.prototypes[:] = np.eye(K)
    return params


def test_evaluate_dataset_perfect_fixture():
    spec = SceneSpec(num_objects=4, num_classes=4, points_per_object=20, color_noise_sd=0.0)
    clouds = [generate_scene(spec, s) for s in range(3)]
    params = colour_oracle_params(spec.class_palette)
    metrics, pseudos = evaluate_dataset(params, clouds, 4)
    assert metrics.miou == 1.0
    assert metrics.num_points == sum(len(c) for c in clouds)
    assert all(np.array_equal(p, c.labels) for p, c in zip(pseudos, clouds))


def test_format_and_csv():
    cm = np.array([[5, 0, 0], [0, 0, 4]])
    m = metrics_from_confusion(cm)
    text = format_metrics(m, {"checkpoint": "x.npz"})
    assert text.startswith("miou = ")
    assert "checkpoint = x.npz" in text and "absent" in text
    rows = metrics_csv(m).strip().split("\n")
    assert rows[0] == ",".join(METRIC_CSV_COLUMNS)
    assert rows[1] == "0,1.000000,5,0,5"
    assert rows[2] == "1,,0,-1,0"
    assert rows[3] == "2,1.000000,4,1,4"


def perfect_decoder_params():
    """Identity network whose swapped decoders copy the other branch's input."""
    cfg = ModelConfig(d_emb=3, hidden=3, depth=1, d_feat=3, d_proj=3, num_prototypes=2, activation="identity")
    params = ModelParams.init(cfg, 0)
    e = params.embedding
    for arr in (e.b_geo, e.b_color, e.W_pos, e.b_pos, params.encoder.biases[0],
                params.decoders.geo_b, params.decoders.color_b):
        arr[:] = 0
    for arr in (e.W_geo, e.W_color, params.encoder.weights[0], params.decoders.geo_W, params.decoders.color_W):
        arr[:] = np.eye(3)
    return params


def test_reconstruct_export_perfect_decoders(tmp_path):
    # colours equal the normalized coordinates, so each branch can recover the other exactly
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 1, size=(30, 3))
    pts[0], pts[1] = 0.0, 1.0
    cloud = LabeledPointCloud(pts, pts.copy(), rng.integers(0, 3, 30), "fixture")
    out = reconstruct_export(perfect_decoder_params(), cloud, tmp_path / "recon")
    assert out["mse_geo"] < 1e-28 and out["mse_color"] < 1e-28
    assert set(out["paths"]) == {"color_from_geo", "geo_from_color", "summary"}
    for key in ("color_from_geo", "geo_from_color"):
        back = load_cloud(out["paths"][key])
        assert np.max(np.abs(back.coords - pts)) < 1e-8
        assert np.max(np.abs(back.colors - pts)) < 1e-8
        assert np.array_equal(back.labels, cloud.labels)
    assert open(out["paths"]["summary"]).read().startswith("scene=fixture mse_geo=")


def test_reconstruct_export_round_trip_random_model(tmp_path):
    cloud = small_cloud(2)
    params = ModelParams.init(ModelConfig(), 1)
    out = reconstruct_export(params, cloud, tmp_path)
    back = load_cloud(out["paths"]["geo_from_color"])
    _, color01, p_geo, _, mse_geo, _ = reconstruct(params, cloud)
    assert np.max(np.abs(back.coords - p_geo)) <= 1e-8 * max(1.0, np.abs(p_geo).max())
    assert np.max(np.abs(back.colors - color01)) < 1e-8
    assert out["mse_geo"] == mse_geo
