import json

import numpy as np
import pytest
from scipy import ndimage

from uskeypoints.evaluation import (
    detect_keypoints,
    export_embeddings,
    frame_average_correct,
    keypoints_from_inputs,
    knn_coclassify,
    knn_predict,
    model_inputs,
    pooled_features,
    sp_sn,
    stratified_split,
    to_pixels,
    tsne,
    write_tsne_csv,
)
from uskeypoints.rtfpm import RTFPMConfig
from uskeypoints.transporter import TransporterConfig, TransporterModel

RT = RTFPMConfig(size=32, angle_step=6.0)
MODEL = TransporterConfig(image_size=32, k=3, width=4, feature_channels=6)


# --------------------------------------------------------------- correction
def test_static_sequence_corrects_to_zero():
    frame = np.random.default_rng(0).uniform(size=(8, 8))
    out = frame_average_correct(np.stack([frame] * 5))
    assert not out.any()
    assert not frame_average_correct(out).any()


def test_moving_dot_on_background():
    seq = np.full((5, 9, 9), 0.3)
    for t in range(5):
        seq[t, 4, 1 + t] = 0.9
    out = frame_average_correct(seq)
    for t in range(5):
        assert out[t, 4, 1 + t] >= 0.9 - 0.3 - 1e-12
        rest = np.ones((9, 9), bool)
        rest[4, 1 + t] = False
        assert not out[t][rest].any()


def test_median_subtracts_majority_value():
    seq = np.zeros((3, 1, 1))
    seq[2] = 1.0
    np.testing.assert_array_equal(frame_average_correct(seq).ravel(), [0, 0, 1])
    np.testing.assert_allclose(frame_average_correct(seq, "mean").ravel(), [0, 0, 2 / 3])


def test_correction_needs_three_frames():
    with pytest.raises(ValueError):
        frame_average_correct(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        frame_average_correct(np.zeros((3, 4, 4)), "mode")


# ---------------------------------------------------------------- detection
def test_pixel_mapping():
    px = to_pixels(np.array([[-1.0, -1.0], [1.0, 1.0], [0.0, 0.0]]), 256)
    np.testing.assert_array_equal(px, [[0, 0], [255, 255], [127.5, 127.5]])


def test_detection_output_and_jsonl():
    model = TransporterModel(MODEL, seed=1)
    frames = np.random.default_rng(2).uniform(size=(4, 40, 40))
    det = detect_keypoints(frames, model, RT)
    assert det.coords.shape == (4, 3, 2) and det.pixels.shape == (4, 3, 2)
    assert np.all((det.pixels >= 0) & (det.pixels <= 39))
    assert np.all((det.confidence > 0) & (det.confidence <= 1))
    lines = [json.loads(line) for line in det.to_jsonl().splitlines()]
    assert len(lines) == 12
    assert set(lines[0]) == {"frame", "k", "x", "y", "px", "py", "sigma", "weight", "confidence"}
    assert model.training


def test_correction_changes_only_the_inputs():
    model = TransporterModel(MODEL, seed=3)
    frames = np.random.default_rng(4).uniform(size=(5, 32, 32))
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    det = detect_keypoints(frames, model, RT, correction=True)
    manual = keypoints_from_inputs(model, model_inputs(frame_average_correct(frames), RT), (32, 32))
    assert det.coords.tobytes() == manual.coords.tobytes()
    for k, v in model.state_arrays().items():
        assert v.tobytes() == before[k].tobytes()


# ------------------------------------------------------------------- SP / SN
def test_all_keypoints_inside_single_component():
    mask = np.zeros((1, 20, 20), bool)
    mask[0, 5:10, 5:10] = True
    rep = sp_sn([np.array([[6.0, 6.0], [8.0, 9.0]])], mask, 0)
    assert rep.sp == 1.0 and rep.sn == 1.0


def test_half_the_components_detected():
    mask = np.zeros((1, 30, 30), bool)
    mask[0, 2:5, 2:5] = True
    mask[0, 20:25, 20:25] = True
    rep = sp_sn([np.array([[3.0, 3.0], [4.0, 2.0]])], mask, 1)
    assert rep.sn == 0.5 and rep.sp == 1.0


def test_empty_masks_give_null_sn():
    rep = sp_sn([np.zeros((2, 2))], np.zeros((1, 8, 8), bool), 4)
    assert rep.sn is None and rep.sp == 0.0 and rep.sn_pooled is None


def test_sp_sn_brute_force_oracle():
    rng = np.random.default_rng(5)
    masks = rng.uniform(size=(20, 24, 24)) > 0.93
    kps = [rng.uniform(0, 23, size=(4, 2)) for _ in range(20)]
    rep = sp_sn(kps, masks, 3)
    sps, sns = [], []
    for kp, m in zip(kps, masks):
        lab, n = ndimage.label(m)
        hit = np.zeros((4, n), bool)
        for i, (x, y) in enumerate(kp):
            for r in range(24):
                for c in range(24):
                    if lab[r, c] and (c - x) ** 2 + (r - y) ** 2 <= 9:
                        hit[i, lab[r, c] - 1] = True
        sps.append(hit.any(1).mean())
        if n:
            sns.append(hit.any(0).mean())
    assert rep.sp == pytest.approx(np.mean(sps), abs=1e-12)
    assert rep.sn == pytest.approx(np.mean(sns), abs=1e-12)


def test_sp_sn_monotone_in_radius():
    rng = np.random.default_rng(6)
    masks = rng.uniform(size=(6, 32, 32)) > 0.97
    kps = [rng.uniform(0, 31, size=(5, 2)) for _ in range(6)]
    reps = [sp_sn(kps, masks, r) for r in range(0, 12)]
    assert all(a.sp <= b.sp and a.sn <= b.sn for a, b in zip(reps, reps[1:]))


def test_sp_sn_rejects_negative_radius():
    with pytest.raises(ValueError):
        sp_sn([np.zeros((1, 2))], np.zeros((1, 4, 4), bool), -1)


# ---------------------------------------------------------------- embeddings
def test_embeddings_match_feature_means():
    model = TransporterModel(MODEL, seed=7)
    x = np.random.default_rng(8).uniform(size=(3, 10, 32, 32)).astype(np.float32)
    x[1] = x[0]
    recs = export_embeddings({"v": x}, model, {"v": "lung"})
    assert len(recs) == 3 and all(r.vector.shape == (6,) for r in recs)
    assert recs[0].vector.tobytes() == recs[1].vector.tobytes()
    model.eval()
    feats = model.features(x).data.astype(np.float64)
    np.testing.assert_allclose(pooled_features(model, x), feats.mean(axis=(2, 3)), rtol=1e-6)
    assert recs[2].label == "lung" and recs[2].frame == 2
    with pytest.raises(ValueError):
        export_embeddings({"v": x}, model, pooling="max")


# --------------------------------------------------------------------- t-SNE
def test_tsne_separates_blobs():
    rng = np.random.default_rng(9)
    X = np.concatenate([rng.normal(0, 1, (30, 5)), rng.normal(12, 1, (30, 5))])
    res = tsne(X, perplexity=10, iterations=500, seed=0)
    a, b = res.points[:30], res.points[30:]
    intra = np.mean([np.linalg.norm(p - q) for grp in (a, b) for p in grp for q in grp])
    assert np.linalg.norm(a.mean(0) - b.mean(0)) > 3 * intra
    assert res.kl_final <= res.kl_initial
    np.testing.assert_allclose(res.entropies, np.log(10), atol=1e-3)


def test_tsne_duplicates_stay_together():
    # random-init t-SNE can strand a single pair in a poor local minimum, so
    # the check uses the median over five duplicated pairs
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 4))
    X[50:55] = X[:5]
    pts = tsne(X, perplexity=10, seed=0).points
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    dup = np.median([d[i, 50 + i] for i in range(5)])
    assert dup < np.median(d[np.triu_indices(100, 1)]) / 10


def test_tsne_deterministic_and_validates():
    X = np.random.default_rng(11).normal(size=(20, 3))
    a, b = tsne(X, 5, 100, seed=4), tsne(X, 5, 100, seed=4)
    assert a.points.tobytes() == b.points.tobytes()
    with pytest.raises(ValueError):
        tsne(X, perplexity=10)


# ----------------------------------------------------------------------- kNN
def test_knn_separated_clusters():
    rng = np.random.default_rng(12)
    pts = np.concatenate([rng.uniform(0, 1, (20, 2)), rng.uniform(10, 11, (20, 2))])
    labels = ["a"] * 20 + ["b"] * 20
    out = knn_coclassify(pts, labels, seed=0)
    assert out["accuracy"] == 1.0 and out["f1"] == 1.0 and len(out["trials"]) == 10


def test_knn_chance_level_on_shuffled_labels():
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(100, 2))
    labels = rng.permutation(["a"] * 50 + ["b"] * 50)
    assert abs(knn_coclassify(pts, labels, seed=1)["accuracy"] - 0.5) <= 0.15


def test_knn_single_neighbour_misclassifies():
    train_x = np.array([[0.0, 0.0], [5.0, 5.0], [5.2, 5.0]])
    train_y = np.array(["a", "b", "b"])
    assert knn_predict(train_x, train_y, np.array([[4.0, 4.0]]), k=1)[0] == "b"
    # a 1-1 tie goes to the nearer class
    assert knn_predict(train_x[:2], train_y[:2], np.array([[1.0, 1.0]]), k=2)[0] == "a"


def test_knn_input_errors():
    with pytest.raises(ValueError):
        knn_coclassify(np.zeros((4, 2)), ["a"] * 4)
    with pytest.raises(ValueError):
        knn_coclassify(np.zeros((4, 2)), ["a", "a", "a", "b"])


def test_stratified_split_keeps_ratio():
    labels = np.array(["a"] * 10 + ["b"] * 20)
    tr, te = stratified_split(labels, 0.7, np.random.default_rng(0))
    assert not set(tr) & set(te) and len(tr) + len(te) == 30
    assert (labels[tr] == "a").sum() == 7 and (labels[tr] == "b").sum() == 14


def test_tsne_csv(tmp_path):
    write_tsne_csv(tmp_path / "t.csv", np.array([[1.0, 2.0], [3.0, 4.5]]), ["a", "b"])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["x,y,label", "1.000000,2.000000,a",
                                                           "3.000000,4.500000,b"]
