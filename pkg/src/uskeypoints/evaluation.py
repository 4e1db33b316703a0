"""Keypoint extraction, SP/SN scoring, embeddings, t-SNE and kNN co-classification."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .harness import label_components
from .numerics import no_grad, tmean
from .rtfpm import RTFPMConfig
from .transporter import TransporterModel

DEFAULT_RADIUS = 8


# ---------------------------------------------------------------- correction
def frame_average_correct(sequence, method: str = "median") -> np.ndarray:
    """Subtract the per-pixel median (or mean) frame and clamp to [0, 1].

    Parameters
    ----------
    sequence : array_like, shape (T, H, W)
        Raw frames, T >= 3.
    method : {"median", "mean"}
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 3:
        raise ValueError(f"expected a [T,H,W] sequence, got shape {seq.shape}")
    if seq.shape[0] < 3:
        raise ValueError(f"frame-average correction needs >= 3 frames, got {seq.shape[0]}")
    if method == "median":
        ref = np.median(seq, axis=0)
    elif method == "mean":
        ref = seq.mean(axis=0)
    else:
        raise ValueError("method must be 'median' or 'mean'")
    return np.clip(seq - ref, 0.0, 1.0)


# ----------------------------------------------------------------- detection
@dataclass
class Detections:
    coords: np.ndarray       # [T, K, 2] normalised (x, y)
    pixels: np.ndarray       # [T, K, 2] pixel (x, y)
    sigma: np.ndarray        # [K]
    weight: np.ndarray       # [K]
    confidence: np.ndarray   # [T, K] peak softmax mass

    def to_jsonl(self) -> str:
        lines = []
        for t in range(len(self.coords)):
            for k in range(self.coords.shape[1]):
                lines.append(json.dumps({
                    "frame": t, "k": k,
                    "x": float(self.coords[t, k, 0]), "y": float(self.coords[t, k, 1]),
                    "px": float(self.pixels[t, k, 0]), "py": float(self.pixels[t, k, 1]),
                    "sigma": float(self.sigma[k]), "weight": float(self.weight[k]),
                    "confidence": float(self.confidence[t, k]),
                }))
        return "\n".join(lines) + ("\n" if lines else "")


def to_pixels(coords, width: int, height: Optional[int] = None) -> np.ndarray:
    """Map normalised [-1, 1] coordinates to pixel (x, y) with corners on pixel centres."""
    height = width if height is None else height
    c = np.asarray(coords, dtype=np.float64)
    return np.stack([(c[..., 0] + 1.0) / 2.0 * (width - 1), (c[..., 1] + 1.0) / 2.0 * (height - 1)], -1)


def model_inputs(frames, rtfpm: RTFPMConfig, input_mode: str = "fpm") -> np.ndarray:
    from .training import frame_features

    return np.stack([frame_features(f, rtfpm, input_mode) for f in frames])


def keypoints_from_inputs(model: TransporterModel, inputs: np.ndarray, frame_shape: Tuple[int, int],
                          batch_size: int = 16) -> Detections:
    """Run KeyNet in eval mode over precomputed network inputs."""
    was_training = model.training
    model.eval()
    coords, conf = [], []
    try:
        with no_grad():
            for i in range(0, len(inputs), batch_size):
                out = model.keypoints(inputs[i:i + batch_size])
                coords.append(out.coords.data.astype(np.float64))
                conf.append(out.probs.data.reshape(*out.probs.shape[:2], -1).max(-1).astype(np.float64))
            sigma = model.sigma().data.astype(np.float64)
            w = model.transport_weights()
            weight = w.data.astype(np.float64) if w is not None else np.ones(model.config.k)
    finally:
        if was_training:
            model.train()
    coords = np.concatenate(coords)
    h, w_ = frame_shape
    return Detections(coords, to_pixels(coords, w_, h), sigma, weight, np.concatenate(conf))


def detect_keypoints(frames, model: TransporterModel, rtfpm: RTFPMConfig, correction: bool = False,
                     input_mode: str = "fpm", method: str = "median") -> Detections:
    """Keypoints of every frame of a raw sequence, in pixel space of the frames.

    With ``correction`` the median frame is removed before feature extraction;
    the model itself is unaffected.
    """
    seq = np.asarray(frames, dtype=np.float64)
    if seq.ndim == 2:
        seq = seq[None]
    if correction:
        seq = frame_average_correct(seq, method)
    return keypoints_from_inputs(model, model_inputs(seq, rtfpm, input_mode), seq.shape[1:])


# -------------------------------------------------------------------- SP / SN
@dataclass
class EvalReport:
    sp: float
    sn: Optional[float]
    sp_pooled: float
    sn_pooled: Optional[float]
    radius_px: float
    per_frame: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"sp": self.sp, "sn": self.sn, "sp_pooled": self.sp_pooled, "sn_pooled": self.sn_pooled,
                "radius_px": self.radius_px, "per_frame": self.per_frame, "config": self.config}


def detection_matrix(keypoints: np.ndarray, mask: np.ndarray, radius: float) -> np.ndarray:
    """Boolean [K, n_components]: keypoint k lies within ``radius`` of some pixel of component c."""
    labels, n = label_components(mask)
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    hit = np.zeros((len(kp), n), dtype=bool)
    if n == 0 or len(kp) == 0:
        return hit
    ys, xs = np.nonzero(labels)
    comp = labels[ys, xs] - 1
    d = cdist(kp, np.stack([xs, ys], axis=1).astype(np.float64))
    close = d <= radius
    for c in range(n):
        hit[:, c] = close[:, comp == c].any(axis=1)
    return hit


def sp_sn(keypoints: Sequence[np.ndarray], masks, radius_px: float = DEFAULT_RADIUS) -> EvalReport:
    """Specificity-like SP and sensitivity-like SN of keypoints against landmark masks.

    SP is the fraction of keypoints within ``radius_px`` of any landmark
    component; SN the fraction of components reached by at least one
    keypoint. Both are computed per frame and averaged; pooled counts are
    reported alongside. SN is ``None`` when no frame has a landmark.
    """
    if radius_px < 0:
        raise ValueError("radius must be >= 0")
    masks = np.asarray(masks, dtype=bool)
    if len(keypoints) != len(masks):
        raise ValueError(f"{len(keypoints)} keypoint frames for {len(masks)} masks")
    per, sps, sns = [], [], []
    n_kp = n_det_kp = n_comp = n_det_comp = 0
    for t, (kp, m) in enumerate(zip(keypoints, masks)):
        hit = detection_matrix(kp, m, radius_px)
        k, c = hit.shape
        det_kp = int(hit.any(axis=1).sum())
        det_c = int(hit.any(axis=0).sum())
        sp_t = det_kp / k if k else 0.0
        sn_t = det_c / c if c else None
        sps.append(sp_t)
        if sn_t is not None:
            sns.append(sn_t)
        n_kp, n_det_kp, n_comp, n_det_comp = n_kp + k, n_det_kp + det_kp, n_comp + c, n_det_comp + det_c
        per.append({"frame": t, "sp": sp_t, "sn": sn_t, "keypoints": k, "components": c})
    return EvalReport(
        sp=float(np.mean(sps)) if sps else 0.0,
        sn=float(np.mean(sns)) if sns else None,
        sp_pooled=n_det_kp / n_kp if n_kp else 0.0,
        sn_pooled=n_det_comp / n_comp if n_comp else None,
        radius_px=float(radius_px),
        per_frame=per,
    )


# ----------------------------------------------------------------- embeddings
@dataclass
class EmbeddingRecord:
    video_id: str
    frame: int
    vector: np.ndarray
    label: Optional[str] = None


def pooled_features(model: TransporterModel, inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Global-average-pooled FF-CNN features, shape [N, C_f]."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(inputs), batch_size):
                psi = model.features(inputs[i:i + batch_size])
                out.append(tmean(psi, axis=(2, 3)).data.astype(np.float64))
    finally:
        if was_training:
            model.train()
    return np.concatenate(out) if out else np.zeros((0, model.config.feature_channels))


def export_embeddings(dataset: Dict[str, np.ndarray], model: TransporterModel,
                      labels: Optional[Dict[str, str]] = None, pooling: str = "gap") -> List[EmbeddingRecord]:
    """One pooled feature vector per frame of every video in ``{video: [T,C,H,W]}``."""
    if pooling != "gap":
        raise ValueError("only global average pooling ('gap') is supported")
    labels = labels or {}
    recs = []
    for vid in sorted(dataset):
        vecs = pooled_features(model, dataset[vid])
        recs.extend(EmbeddingRecord(vid, t, v, labels.get(vid)) for t, v in enumerate(vecs))
    return recs


# --------------------------------------------------------------------- t-SNE
@dataclass
class TSNEResult:
    points: np.ndarray
    kl_initial: float
    kl_final: float
    entropies: np.ndarray   # achieved conditional entropies (nats)
    betas: np.ndarray       # precisions 1 / (2 sigma_i^2)


def calibrate(sqdist: np.ndarray, perplexity: float, tol: float = 1e-4, max_iter: int = 200):
    """Per-row precisions whose conditional distributions hit ``log(perplexity)`` entropy.

    Returns ``(P_conditional, betas, entropies)``.
    """
    n = sqdist.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    ents = np.zeros(n)
    for i in range(n):
        d = np.delete(sqdist[i], i)
        d = d - d.min()
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            p = np.exp(-d * beta)
            s = p.sum()
            h = np.log(s) + beta * (d * p).sum() / s
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        row = p / s
        P[i, np.arange(n) != i] = row
        betas[i], ents[i] = beta, h
    return P, betas, ents


def _kl(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / Q[mask])).sum())


def tsne(X, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0, learning_rate: float = 200.0,
         early_exaggeration: float = 12.0, exaggeration_iters: int = 250) -> TSNEResult:
    """Exact O(n^2) t-SNE with momentum, gains and early exaggeration."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if perplexity <= 0:
        raise ValueError("perplexity must be positive")
    if n < 3 * perplexity:
        raise ValueError(f"perplexity {perplexity} too large for {n} points (need n >= 3*perplexity)")
    P_cond, betas, ents = calibrate(squareform(pdist(X, "sqeuclidean")), perplexity)
    P = (P_cond + P_cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    kl0 = _kl(P, Y)
    vel = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iterations):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        mom = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = np.sign(grad) == np.sign(vel)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        vel = mom * vel - learning_rate * gains * grad
        Y = Y + vel
        Y = Y - Y.mean(axis=0)
    return TSNEResult(Y, kl0, _kl(P, Y), ents, betas)


# ----------------------------------------------------------------------- kNN
def knn_predict(train_x, train_y, test_x, k: int = 5) -> np.ndarray:
    """Majority vote over the ``k`` nearest training points; ties go to the nearest tied class."""
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    d = cdist(np.asarray(test_x, dtype=np.float64), train_x)
    k = min(k, len(train_x))
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    preds = []
    for row in order:
        labs = train_y[row]
        vals, counts = np.unique(labs, return_counts=True)
        tied = set(vals[counts == counts.max()].tolist())
        preds.append(next(lab for lab in labs if lab in tied))
    return np.asarray(preds)


def stratified_split(labels, ratio: float = 0.7, rng: Optional[np.random.Generator] = None):
    labels = np.asarray(labels)
    rng = rng if rng is not None else np.random.default_rng(0)
    tr, te = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = int(round(ratio * len(idx)))
        n_tr = min(max(n_tr, 1), len(idx) - 1)
        tr.extend(idx[:n_tr])
        te.extend(idx[n_tr:])
    return np.sort(tr), np.sort(te)


def classification_metrics(y_true, y_pred) -> Dict[str, float]:
    """Accuracy and macro-averaged precision, recall and F1."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    classes = np.unique(np.concatenate([y_true, y_pred]))
    prec, rec, f1 = [], [], []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return {"accuracy": float(np.mean(y_true == y_pred)), "precision": float(np.mean(prec)),
            "recall": float(np.mean(rec)), "f1": float(np.mean(f1))}


def knn_coclassify(points, labels, ratio: float = 0.7, k_nn: int = 5, seed: int = 0,
                   trials: int = 10) -> dict:
    """Median over ``trials`` stratified splits of kNN accuracy and macro P/R/F1."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("co-classification needs at least two classes")
    small = classes[counts < 2]
    if len(small):
        raise ValueError(f"classes with fewer than 2 members: {small.tolist()}")
    pts = np.asarray(points, dtype=np.float64)
    runs = []
    for t in range(trials):
        tr, te = stratified_split(labels, ratio, np.random.default_rng([seed, t]))
        pred = knn_predict(pts[tr], labels[tr], pts[te], k_nn)
        runs.append(classification_metrics(labels[te], pred))
    out = {key: float(np.median([r[key] for r in runs])) for key in runs[0]}
    out["trials"] = runs
    out["k_nn"] = k_nn
    return out


def write_tsne_csv(path, points: np.ndarray, labels: Iterable) -> None:
    lines = ["x,y,label"] + [f"{x:.6f},{y:.6f},{lab}" for (x, y), lab in zip(points, labels)]
    Path(path).write_text("\n".join(lines) + "\n")
