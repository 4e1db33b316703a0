"""Dataset ingestion, frame-pair sampling, FPM caching and the training loop.

A dataset is a directory of videos. Each video is a directory holding
``frames/frame_NNNNNN.pgm`` (or the frame files directly). A directory that
itself holds ``frames/`` is treated as a one-video dataset.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import AdamState, NonFiniteError, adam_step, load_t32, no_grad, save_t32
from .pgm import FRAME_RE, frame_name, list_frames, read_pgm
from .rtfpm import RTFPMConfig, fpm, normalization_channels
from .transporter import (
    TransporterConfig,
    TransporterModel,
    checkpoint_load,
    checkpoint_save,
    training_forward,
)

log = logging.getLogger(__name__)

INPUT_MODES = ("fpm", "normalization")


# -------------------------------------------------------------------- config
@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.001
    lr_decay: float = 0.95
    lr_decay_every: int = 10
    pairs_train: int = 1024
    pairs_val: int = 512
    source_stride: int = 10
    gap_min: int = 1
    gap_max: int = 10
    val_fraction: float = 0.2
    seed: int = 0
    input_mode: str = "fpm"
    model: TransporterConfig = field(default_factory=TransporterConfig)
    rtfpm: RTFPMConfig = field(default_factory=RTFPMConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = TransporterConfig.from_dict(self.model)
        if isinstance(self.rtfpm, dict):
            self.rtfpm = RTFPMConfig.from_dict(self.rtfpm)
        for name in ("epochs", "batch_size", "pairs_train", "pairs_val", "source_stride",
                     "gap_min", "lr_decay_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalisation needs two samples)")
        if self.lr <= 0 or not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr must be positive and lr_decay in (0, 1]")
        if self.gap_max < self.gap_min:
            raise ValueError("gap_max must be >= gap_min")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.model.image_size != self.rtfpm.size:
            raise ValueError(f"model.image_size {self.model.image_size} != rtfpm.size {self.rtfpm.size}")
        if self.model.in_channels != self.rtfpm.n_channels:
            raise ValueError(f"model.in_channels {self.model.in_channels} != "
                             f"rtfpm channel count {self.rtfpm.n_channels}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["model"] = self.model.to_dict()
        d["rtfpm"] = self.rtfpm.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, epoch: int) -> float:
        return lr_at(epoch, self.lr, self.lr_decay, self.lr_decay_every)


def lr_at(epoch: int, base: float = 0.001, decay: float = 0.95, every: int = 10) -> float:
    """Step decay ``base * decay ** floor(epoch / every)``."""
    return base * decay ** (epoch // every)


# ------------------------------------------------------------------- dataset
def discover_videos(root) -> Dict[str, Path]:
    """Map video id to its frame directory, sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")

    def frame_dir(d: Path) -> Optional[Path]:
        if (d / "frames").is_dir():
            return d / "frames"
        if any(FRAME_RE.search(p.name) for p in d.iterdir()):
            return d
        return None

    own = frame_dir(root)
    if own is not None:
        return {root.name: own}
    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        fd = frame_dir(d)
        if fd is not None:
            out[d.name] = fd
    if not out:
        raise FileNotFoundError(f"no videos with frame_NNNNNN.pgm files under {root}")
    return out


@dataclass(frozen=True)
class PairIndex:
    video_id: str
    t: int
    t_plus_i: int

    def __post_init__(self):
        if self.t_plus_i <= self.t:
            raise ValueError("target frame must come after the source frame")


@dataclass(frozen=True)
class Segment:
    """Frames ``[start, stop)`` of one video available to a sampling pool."""

    video_id: str
    start: int
    stop: int


def _as_segments(manifest) -> List[Segment]:
    if isinstance(manifest, dict):
        return [Segment(v, 0, int(n)) for v, n in sorted(manifest.items())]
    return list(manifest)


def sample_pairs(manifest, n: int, seed: int = 0, stride: int = 10, gap: Tuple[int, int] = (1, 10),
                 min_frames: int = 11) -> List[PairIndex]:
    """Draw ``n`` (source, target) pairs, one source per ``stride`` frames.

    ``manifest`` maps video id to frame count, or is a list of segments.
    Offsets are uniform on ``gap`` (clipped at the end of the segment). When
    fewer than ``n`` sources exist, all are used and the rest drawn with
    replacement.
    """
    segs = _as_segments(manifest)
    short = [f"{s.video_id} ({s.stop - s.start} frames)" for s in segs if s.stop - s.start < min_frames]
    if short:
        raise ValueError(f"videos with fewer than {min_frames} frames: {', '.join(short)}")
    rng = np.random.default_rng(seed)
    sources = [(s, t) for s in segs for t in range(s.start, s.stop - 1, stride)]
    if n <= len(sources):
        picks = np.sort(rng.choice(len(sources), size=n, replace=False)) if n < len(sources) \
            else np.arange(len(sources))
    else:
        warnings.warn(f"{n} pairs requested but only {len(sources)} distinct source frames; "
                      "sampling the remainder with replacement", RuntimeWarning, stacklevel=2)
        extra = rng.choice(len(sources), size=n - len(sources), replace=True)
        picks = np.concatenate([np.arange(len(sources)), extra])
    pairs = []
    for p in picks:
        seg, t = sources[int(p)]
        hi = min(gap[1], seg.stop - 1 - t)
        lo = min(gap[0], hi)
        i = int(rng.integers(lo, hi + 1))
        pairs.append(PairIndex(seg.video_id, t, t + i))
    return pairs


def split_pools(manifest: Dict[str, int], val_fraction: float = 0.2, seed: int = 0,
                min_frames: int = 11) -> Tuple[List[Segment], List[Segment]]:
    """Disjoint train/val pools: by video when there are two or more, else by frame range."""
    vids = sorted(manifest)
    if len(vids) >= 2:
        rng = np.random.default_rng([seed, 1])
        n_val = max(1, int(round(val_fraction * len(vids))))
        val = set(rng.permutation(vids)[:n_val].tolist())
        train = [Segment(v, 0, manifest[v]) for v in vids if v not in val]
        return train, [Segment(v, 0, manifest[v]) for v in vids if v in val]
    v = vids[0]
    n = manifest[v]
    cut = max(min_frames, int(round(n * (1.0 - val_fraction))))
    if n - cut < min_frames:
        cut = n - min_frames
    if cut < min_frames:
        raise ValueError(f"video {v} has {n} frames; a frame-range split needs >= {2 * min_frames}")
    return [Segment(v, 0, cut)], [Segment(v, cut, n)]


# --------------------------------------------------------------- FPM cache
def frame_features(frame: np.ndarray, rtfpm: RTFPMConfig, input_mode: str = "fpm") -> np.ndarray:
    if input_mode == "normalization":
        return normalization_channels(frame, size=rtfpm.size)
    return fpm(frame, rtfpm).channels


def cache_key(rtfpm: RTFPMConfig, input_mode: str = "fpm", correction: bool = False) -> str:
    key = rtfpm.hash()
    if input_mode != "fpm":
        key += f"-{input_mode}"
    if correction:
        key += "-corrected"
    return key


def _compute_one(args):
    path, rtfpm_dict, input_mode = args
    return frame_features(read_pgm(path), RTFPMConfig.from_dict(rtfpm_dict), input_mode)


def preprocess_cache(dataset, rtfpm: RTFPMConfig, cache_root, workers: int = 1,
                     input_mode: str = "fpm") -> Path:
    """Compute (or reuse) one ``.t32`` feature map per frame.

    The cache lives in ``cache_root/<config hash>/<video>/``. A directory whose
    manifest hash, frame counts or files do not match is recomputed in full.
    """
    videos = discover_videos(dataset)
    key = cache_key(rtfpm, input_mode)
    cdir = Path(cache_root) / key
    counts = {v: len(list_frames(d)) for v, d in videos.items()}
    mpath = cdir / "manifest.json"
    if mpath.exists():
        try:
            old = json.loads(mpath.read_text())
        except json.JSONDecodeError:
            old = {}
        fresh = (old.get("hash") == key and old.get("videos") == counts
                 and all((cdir / v / frame_name(i).replace(".pgm", ".t32")).exists()
                         for v, n in counts.items() for i in range(n)))
        if fresh:
            return cdir
        log.info("cache %s is stale; recomputing", cdir)
    jobs, outs = [], []
    for v, d in videos.items():
        (cdir / v).mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(list_frames(d)):
            jobs.append((str(p), rtfpm.to_dict(), input_mode))
            outs.append(cdir / v / frame_name(i).replace(".pgm", ".t32"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = ex.map(_compute_one, jobs, chunksize=4)
            for out, arr in zip(outs, results):
                save_t32(out, arr)
    else:
        for out, job in zip(outs, jobs):
            save_t32(out, _compute_one(job))
    manifest = {"hash": key, "input_mode": input_mode, "rtfpm": rtfpm.to_dict(), "videos": counts,
                "created": time.time()}
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return cdir


def load_cache(cache_dir) -> Dict[str, np.ndarray]:
    """All cached maps as ``{video: [T, C, H, W] float32}``."""
    cdir = Path(cache_dir)
    manifest = json.loads((cdir / "manifest.json").read_text())
    return {v: np.stack([load_t32(cdir / v / frame_name(i).replace(".pgm", ".t32")) for i in range(n)])
            for v, n in sorted(manifest["videos"].items())}


# ------------------------------------------------------------------ training
class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the dump path."""

    def __init__(self, message: str, dump: Optional[Path] = None):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    metrics_path: Path
    metrics: List[dict]


def _batch(features: Dict[str, np.ndarray], pairs: Sequence[PairIndex]):
    src = np.stack([features[p.video_id][p.t] for p in pairs])
    tgt = np.stack([features[p.video_id][p.t_plus_i] for p in pairs])
    return src, tgt


def _batches(n: int, size: int) -> List[slice]:
    out = [slice(i, min(i + size, n)) for i in range(0, n, size)]
    if len(out) > 1 and out[-1].stop - out[-1].start < 2:
        out[-2] = slice(out[-2].start, n)
        out.pop()
    return out


def evaluate_loss(model: TransporterModel, features, pairs: Sequence[PairIndex], batch_size: int,
                  dump_dir: Optional[Path] = None, epoch: int = 0) -> float:
    """Mean reconstruction loss with batch norm in eval mode and no updates.

    A non-finite loss raises ``TrainingAborted``; the batch is dumped to
    ``dump_dir`` when one is given.
    """
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with no_grad():
            for step, sl in enumerate(_batches(len(pairs), batch_size)):
                batch = pairs[sl]
                src, tgt = _batch(features, batch)
                try:
                    loss, _ = training_forward(src, tgt, model)
                except NonFiniteError as exc:
                    dump = _dump_batch(dump_dir, epoch, step, batch, src, tgt) if dump_dir else None
                    raise TrainingAborted(f"non-finite evaluation loss at epoch {epoch} step {step}: "
                                          f"{exc}; batch dumped to {dump}", dump) from exc
                total += float(loss.data) * (sl.stop - sl.start)
    finally:
        if was_training:
            model.train()
    return total / max(len(pairs), 1)


def _dump_batch(out_dir: Path, epoch: int, step: int, pairs, src, tgt) -> Path:
    d = out_dir / "nan_dump"
    d.mkdir(parents=True, exist_ok=True)
    save_t32(d / "source.t32", src)
    save_t32(d / "target.t32", tgt)
    (d / "batch.json").write_text(json.dumps({"epoch": epoch, "step": step,
                                              "pairs": [asdict(p) for p in pairs]}, indent=1))
    return d


def train(config: TrainConfig, dataset, out_dir, cache_root=None, workers: int = 1,
          features: Optional[Dict[str, np.ndarray]] = None, resume=None,
          stop_after: Optional[int] = None) -> TrainResult:
    """Train a Transporter on the frame pairs of ``dataset``.

    Writes ``metrics.jsonl``, ``best.t32`` and ``final.t32`` into ``out_dir``.
    ``features`` may be given directly (``{video: [T,C,H,W]}``) to skip the
    cache. ``resume`` points at a checkpoint written by an earlier call with
    the same config; ``stop_after`` ends the run after that many epochs
    (used to emulate interruption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rtfpm_hash = cache_key(config.rtfpm, config.input_mode)
    if features is None:
        cdir = preprocess_cache(dataset, config.rtfpm, cache_root or out / "cache", workers,
                                config.input_mode)
        features = load_cache(cdir)
    counts = {v: len(a) for v, a in features.items()}
    train_pool, val_pool = split_pools(counts, config.val_fraction, config.seed)
    gap = (config.gap_min, config.gap_max)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if config.pairs_train > 64 else "default", RuntimeWarning)
        train_pairs = sample_pairs(train_pool, config.pairs_train, config.seed, config.source_stride, gap)
        val_pairs = sample_pairs(val_pool, config.pairs_val, config.seed + 1, config.source_stride, gap)

    metrics_path = out / "metrics.jsonl"
    best_path, final_path, last_path = out / "best.t32", out / "final.t32", out / "last.t32"
    extra = {"rtfpm_hash": rtfpm_hash, "train_config": config.to_dict()}
    if resume is not None:
        model, adam, manifest = checkpoint_load(resume, expected=config.model)
        start = manifest["epoch"] + 1
        best_val = manifest.get("best_val", float("inf"))
        metrics = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
        metrics = [m for m in metrics if m["epoch"] < start]
        metrics_path.write_text("".join(json.dumps(m) + "\n" for m in metrics))
    else:
        model = TransporterModel(config.model, seed=config.seed)
        adam = AdamState(lr=config.lr)
        start, best_val, metrics = 0, float("inf"), []
        metrics_path.write_text("")
    model.train()
    params = model.parameters()

    def emit(rec):
        metrics.append(rec)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")

    if start == 0:
        t0 = time.perf_counter()
        init = evaluate_loss(model, features, train_pairs, config.batch_size, out, 0)
        emit({"epoch": 0, "split": "init", "loss": init, "lr": config.lr_at(0),
              "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})

    last_epoch = config.epochs if stop_after is None else min(config.epochs, start + stop_after)
    for epoch in range(start, last_epoch):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_pairs))
        adam.lr = config.lr_at(epoch)
        total = 0.0
        for step, sl in enumerate(_batches(len(order), config.batch_size)):
            batch = [train_pairs[j] for j in order[sl]]
            src, tgt = _batch(features, batch)
            model.zero_grad()
            try:
                loss, _ = training_forward(src, tgt, model)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
            except NonFiniteError as exc:
                dump = _dump_batch(out, epoch, step, batch, src, tgt)
                raise TrainingAborted(f"non-finite value at epoch {epoch} step {step}: {exc}; "
                                      f"batch dumped to {dump}", dump) from exc
            adam_step(params, {k: p.grad for k, p in params.items()}, adam)
            total += float(loss.data) * len(batch)
        emit({"epoch": epoch, "split": "train", "loss": total / len(order), "lr": adam.lr,
              "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
        t1 = time.perf_counter()
        val = evaluate_loss(model, features, val_pairs, config.batch_size, out, epoch)
        emit({"epoch": epoch, "split": "val", "loss": val, "lr": adam.lr,
              "wall_ms": round(1000 * (time.perf_counter() - t1), 3)})
        if val < best_val:
            best_val = val
            checkpoint_save(best_path, model, adam, epoch, config.seed, {**extra, "best_val": best_val})
        checkpoint_save(last_path, model, adam, epoch, config.seed, {**extra, "best_val": best_val})
    if last_epoch == config.epochs:
        checkpoint_save(final_path, model, adam, config.epochs - 1, config.seed,
                        {**extra, "best_val": best_val})
    return TrainResult(final_path, best_path, metrics_path, metrics)


def read_metrics(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
