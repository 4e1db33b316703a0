"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line which is repeated in the terminal
summary under "acceptance criteria".
"""

import json
import math
import time

import numpy as np
import pytest

from uskeypoints.cli import run
from uskeypoints.evaluation import (
    export_embeddings,
    frame_average_correct,
    keypoints_from_inputs,
    knn_coclassify,
    model_inputs,
    sp_sn,
    tsne,
)
from uskeypoints.gradsuite import run_suite
from uskeypoints.harness import cross_pattern, dominant_scene, generate, lung_scene, oracle_score
from uskeypoints.numerics import Tensor
from uskeypoints.rtfpm import HORIZONTAL_BAND, VERTICAL_BAND, RTFPMConfig, enhance_orientation, fpm, radon
from uskeypoints.training import TrainConfig, frame_features, read_metrics, train
from uskeypoints.transporter import TransporterConfig, transport

pytestmark = pytest.mark.slow

TOY_RT = RTFPMConfig(size=128)
TOY_SEEDS = (0, 1, 2)
TOY_MODES = ("none", "learned_sigma")


# ------------------------------------------------------------- criterion 1
def test_criterion_1_gradient_suite(acceptance):
    res = run_suite(n_instances=20, seed=0)
    worst = max(res.results, key=lambda r: r.max_rel_error)
    ok = res.passed and res.seconds < 120 and all(r.n_checked > 0 for r in res.results)
    acceptance("1", ok, f"{len(res.results)} ops x 20 instances, worst {worst.name} "
                        f"{worst.max_rel_error:.2e} (< 1e-3), {res.seconds:.0f} s (< 120 s)")
    assert ok


# ------------------------------------------------------------- criterion 2
def _transport_instance(rng):
    b, c, s, k = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(3, 10)),
                  int(rng.integers(2, 7)))
    dtype = np.float32 if rng.uniform() < 0.5 else np.float64
    psi_s, psi_t = (rng.normal(size=(b, c, s, s)).astype(dtype) for _ in range(2))
    phi_s, phi_t = (rng.uniform(size=(b, k, s, s)).astype(dtype) for _ in range(2))
    w = rng.uniform(size=k).astype(dtype)
    return psi_s, psi_t, phi_s, phi_t, w


def test_criterion_2_transport_identities(acceptance):
    rng = np.random.default_rng(2)
    failures = {"zero": 0, "unit": 0, "weight_one": 0, "weight_zero": 0}
    for _ in range(50):
        psi_s, psi_t, phi_s, phi_t, w = _transport_instance(rng)
        S, T = Tensor(psi_s), Tensor(psi_t)
        zero = Tensor(np.zeros_like(phi_s))
        if transport(S, T, zero, zero).data.tobytes() != psi_s.tobytes():
            failures["zero"] += 1
        if transport(S, T, Tensor(phi_s), Tensor(np.ones_like(phi_t))).data.tobytes() != psi_t.tobytes():
            failures["unit"] += 1
        vanilla = transport(S, T, Tensor(phi_s), Tensor(phi_t))
        ones = transport(S, T, Tensor(phi_s), Tensor(phi_t), Tensor(np.ones_like(w)))
        if vanilla.data.tobytes() != ones.data.tobytes():
            failures["weight_one"] += 1
        drop = int(rng.integers(len(w)))
        w0 = w.copy()
        w0[drop] = 0
        keep = [i for i in range(len(w)) if i != drop]
        full = transport(S, T, Tensor(phi_s), Tensor(phi_t), Tensor(w0))
        reduced = transport(S, T, Tensor(phi_s[:, keep]), Tensor(phi_t[:, keep]), Tensor(w0[keep]))
        if full.data.tobytes() != reduced.data.tobytes():
            failures["weight_zero"] += 1
    ok = not any(failures.values())
    acceptance("2", ok, "50 instances, bit-exact mismatches " + json.dumps(failures))
    assert ok


# ------------------------------------------------------------- criterion 3
def test_criterion_3_radon_oracles(acceptance):
    rng = np.random.default_rng(3)
    mass_err = 0.0
    for size in (24, 33, 48, 64):
        img = rng.uniform(size=(size, size))
        sino = radon(img)
        mass_err = max(mass_err, float(np.max(np.abs(sino.values.sum(axis=0) / img.sum() - 1))))

    img = rng.uniform(size=(65, 65))
    sino = radon(img, [0.0, 90.0])
    off = int(sino.offset)
    # exact up to summation order
    axis_exact = (np.allclose(sino.values[off - 32:off + 33, 0], img.sum(axis=0), rtol=1e-12, atol=0)
                  and np.allclose(sino.values[off - 32:off + 33, 1], img.sum(axis=1), rtol=1e-12, atol=0))

    v = generate(cross_pattern(128))
    em = v.element_masks[0]
    band, streak = em[0] & ~em[1], em[1] & ~em[0]
    sino = radon(v.frames[0])
    h = enhance_orientation(v.frames[0], HORIZONTAL_BAND, sino)
    vt = enhance_orientation(v.frames[0], VERTICAL_BAND, sino)
    r_band = h[band].sum() / vt[band].sum()
    r_streak = vt[streak].sum() / h[streak].sum()

    ok = mass_err <= 1e-3 and axis_exact and r_band > 2 and r_streak > 2
    acceptance("3", ok, f"mass err {mass_err:.1e} (<= 1e-3), axis sums exact {axis_exact}, "
                        f"selectivity band {r_band:.2f} streak {r_streak:.2f} (> 2)")
    assert ok


# ------------------------------------------------------------- criterion 4
def _fpm_frames():
    rng = np.random.default_rng(4)
    frames = []
    for i in range(200):
        kind = i % 4
        h, w = (int(rng.integers(40, 200)), int(rng.integers(40, 200))) if kind else (128, 128)
        if kind == 0:
            frames.append(generate(lung_scene(1, 128, seed=i)).frames[0])
        elif kind == 1:
            frames.append(rng.uniform(size=(h, w)))
        elif kind == 2:
            frames.append((rng.uniform(size=(h, w)) > 0.98).astype(float))
        else:
            frames.append(np.clip(rng.normal(0.5, 0.3, size=(h, w)), 0, 1))
    single = np.zeros((128, 128))
    single[64, 64] = 1.0
    corner = np.zeros((128, 128))
    corner[0, 0] = 1.0
    frames += [np.zeros((128, 128)), np.ones((128, 128)), single, corner]
    return frames


def test_criterion_4_fpm_range_and_determinism(acceptance):
    bad = 0
    nondet = 0
    frames = _fpm_frames()
    for i, f in enumerate(frames):
        a = fpm(f, TOY_RT).channels
        if not (np.isfinite(a).all() and a.min() >= 0 and a.max() <= 1 and a.shape == (10, 128, 128)):
            bad += 1
        if i % 10 == 0 or i >= 200:
            if fpm(f, TOY_RT).channels.tobytes() != a.tobytes():
                nondet += 1
    ok = bad == 0 and nondet == 0
    acceptance("4", ok, f"{len(frames)} frames (200 random + 4 adversarial), out of range or NaN {bad}, "
                        f"non-deterministic {nondet}")
    assert ok


# ------------------------------------------------------------- criterion 5
class ToyRuns:
    """Trains every (mode, seed) model once and caches the evaluation."""

    def __init__(self, root):
        self.root = root
        videos = {f"lung{i}": generate(lung_scene(64, 128, seed=i, phase=0.7 * i)) for i in range(4)}
        self.features = {k: np.stack([frame_features(f, TOY_RT) for f in v.frames])
                         for k, v in videos.items()}
        self.test = generate(lung_scene(64, 128, seed=100, phase=0.3))
        self.inputs = {"uncorrected": model_inputs(self.test.frames, TOY_RT),
                       "corrected": model_inputs(frame_average_correct(self.test.frames), TOY_RT)}
        self.runs = {}

    def get(self, mode, seed):
        key = (mode, seed)
        if key not in self.runs:
            cfg = TrainConfig(epochs=20, batch_size=4, pairs_train=64, pairs_val=8, source_stride=2,
                              seed=seed, lr=0.001, rtfpm=TOY_RT,
                              model=TransporterConfig(image_size=128, k=10, width=16, feature_channels=16,
                                                      attention_mode=mode))
            t0 = time.perf_counter()
            res = train(cfg, None, self.root / f"{mode}_{seed}", features=self.features)
            seconds = time.perf_counter() - t0
            from uskeypoints.transporter import checkpoint_load

            model, _, _ = checkpoint_load(res.final_checkpoint)
            out = {"seconds": seconds, "model": model, "init": res.metrics[0]["loss"],
                   "final": [m for m in res.metrics if m["split"] == "train"][-1]["loss"]}
            for tag, x in self.inputs.items():
                det = keypoints_from_inputs(model, x, (128, 128))
                rep = sp_sn(list(det.pixels), self.test.masks, 8)
                out[tag] = {"sp": rep.sp, "sn": rep.sn,
                            "trk": oracle_score(self.test.tracks, list(det.pixels))}
            self.runs[key] = out
        return self.runs[key]

    def median(self, mode, tag, metric):
        return float(np.median([self.get(mode, s)[tag][metric] for s in TOY_SEEDS]))


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy"))


def test_criterion_5a_training_loss(toy, acceptance):
    runs = [toy.get(m, s) for m in TOY_MODES for s in TOY_SEEDS]
    ratios = [r["final"] / r["init"] for r in runs]
    slowest = max(r["seconds"] for r in runs)
    ok = max(ratios) < 0.5 and slowest <= 15 * 60
    acceptance("5a", ok, f"final/initial loss worst {max(ratios):.4f} (< 0.5) over {len(runs)} runs, "
                         f"slowest run {slowest:.0f} s (<= 900 s)")
    assert ok


def test_criterion_5b_corrected_detection(toy, acceptance):
    sn = toy.median("learned_sigma", "corrected", "sn")
    trk = toy.median("learned_sigma", "corrected", "trk")
    ok = sn >= 0.8 and trk <= 12
    acceptance("5b", ok, f"learned sigma, corrected, median of 3 seeds: SN {sn:.3f} (>= 0.8), "
                         f"tracking {trk:.2f} px (<= 12); uncorrected SN "
                         f"{toy.median('learned_sigma', 'uncorrected', 'sn'):.3f} tracking "
                         f"{toy.median('learned_sigma', 'uncorrected', 'trk'):.2f} px")
    assert ok


def test_criterion_5c_attention_sp(toy, acceptance):
    att = toy.median("learned_sigma", "corrected", "sp")
    van = toy.median("none", "corrected", "sp")
    ok = att >= van
    acceptance("5c", ok, f"median SP (corrected) learned sigma {att:.3f} >= vanilla {van:.3f}; "
                         f"uncorrected {toy.median('learned_sigma', 'uncorrected', 'sp'):.3f} vs "
                         f"{toy.median('none', 'uncorrected', 'sp'):.3f}")
    assert ok


# ------------------------------------------------------------- criterion 6
def test_criterion_6_frame_average_correction(toy, acceptance):
    residual = 0.0
    for seed in range(5):
        v = generate(lung_scene(32, 128, seed=seed))
        corrected = frame_average_correct(v.frames)
        residual = max(residual, float(corrected[:, v.element_masks[0, 3]].max()))
    sp_c = toy.median("learned_sigma", "corrected", "sp")
    sp_u = toy.median("learned_sigma", "uncorrected", "sp")
    ok = residual <= 1 / 255 and sp_c > sp_u
    acceptance("6", ok, f"overlay residual {residual:.2e} (<= 1/255), median SP corrected {sp_c:.3f} "
                        f"vs uncorrected {sp_u:.3f}")
    assert ok


# ------------------------------------------------------------- criterion 7
def test_criterion_7_coclassification(toy, acceptance):
    model = toy.get("learned_sigma", 0)["model"]
    t0 = time.perf_counter()
    inputs, labels = {}, {}
    for kind in ("band", "streak"):
        for i in range(30):
            vid = f"{kind}{i:02d}"
            inputs[vid] = model_inputs(generate(dominant_scene(kind, 5, 128, seed=1000 + i)).frames, TOY_RT)
            labels[vid] = kind
    recs = export_embeddings(inputs, model, labels)
    X = np.stack([r.vector for r in recs]).astype(np.float64)
    y = [r.label for r in recs]
    pts = tsne(X, seed=0).points
    res = knn_coclassify(pts, y, ratio=0.7, trials=10, seed=0)
    seconds = time.perf_counter() - t0
    ok = res["accuracy"] >= 0.9 and seconds < 300
    acceptance("7", ok, f"{len(recs)} frames, median accuracy {res['accuracy']:.3f} (>= 0.9), "
                        f"F1 {res['f1']:.3f}, {seconds:.0f} s (< 300 s)")
    assert ok


# ------------------------------------------------------------- criterion 8
def test_criterion_8_schedule_fidelity(tmp_path, acceptance):
    rng = np.random.default_rng(8)
    feats = {f"v{i}": rng.uniform(size=(24, 10, 32, 32)).astype(np.float32) for i in range(3)}
    cfg = TrainConfig(epochs=22, batch_size=2, pairs_train=2, pairs_val=2, source_stride=4, seed=0,
                      rtfpm=RTFPMConfig(size=32),
                      model=TransporterConfig(image_size=32, k=2, width=4, feature_channels=4))
    res = train(cfg, None, tmp_path, features=feats)
    log = read_metrics(res.metrics_path)
    exact = all(r["lr"] == 0.001 * 0.95 ** math.floor(r["epoch"] / 10) for r in log)
    text = res.metrics_path.read_text()
    round_trip = log == res.metrics and "".join(json.dumps(r) + "\n" for r in log) == text
    lrs = sorted({r["lr"] for r in log})
    ok = exact and round_trip and len(lrs) == 3
    acceptance("8", ok, f"{len(log)} log records over 22 epochs, lr values {lrs} exact {exact}, "
                        f"log round-trips {round_trip}")
    assert ok


# ------------------------------------------------------------- criterion 9
SMOKE_SCENE = {
    "n_frames": 24, "size": 64, "background": 0.1, "speckle": 0.2, "seed": 0, "n_videos": 2,
    "elements": [{"kind": "horizontal_band", "intensity": 0.9, "thickness": 3.0,
                  "position": [31.5, 26.0], "length": 20.0, "amplitude": 3.0, "period": 8.0},
                 {"kind": "vertical_streak", "intensity": 0.8, "thickness": 3.0,
                  "position": [26.0, 40.0], "length": 12.0, "amplitude": 2.0, "period": 8.0}],
}
SMOKE_TRAIN = {
    "batch_size": 4, "pairs_train": 8, "pairs_val": 4, "source_stride": 2,
    "model": {"image_size": 32, "k": 4, "width": 4, "feature_channels": 4},
    "rtfpm": {"size": 32, "angle_step": 4.0},
}


def _smoke(root, configs):
    data, tr, inf = root / "data", root / "train", root / "infer"
    codes = [
        run(["synth", "--config", str(configs / "scene.json"), "--seed", "7", "--out", str(data)]),
        run(["preprocess", "--config", str(configs / "train.json"), "--seed", "7", "--data", str(data),
             "--out", str(tr)]),
        run(["train", "--config", str(configs / "train.json"), "--seed", "7", "--epochs", "2",
             "--data", str(data), "--out", str(tr)]),
        run(["infer", "--checkpoint", str(tr / "final.t32"), "--data", str(data), "--out", str(inf)]),
    ]
    files = sorted(tr.glob("*.t32")) + sorted(inf.rglob("keypoints.jsonl"))
    return codes, {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_criterion_9_pipeline_determinism(tmp_path, acceptance):
    configs = tmp_path / "configs"
    configs.mkdir()
    (configs / "scene.json").write_text(json.dumps(SMOKE_SCENE))
    (configs / "train.json").write_text(json.dumps(SMOKE_TRAIN))
    codes_a, a = _smoke(tmp_path / "a", configs)
    codes_b, b = _smoke(tmp_path / "b", configs)
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    ok = codes_a == codes_b == [0, 0, 0, 0] and same and len(a) == 5
    acceptance("9", ok, f"exit codes {codes_a} / {codes_b}, {len(a)} artefacts byte-identical {same}")
    assert ok
