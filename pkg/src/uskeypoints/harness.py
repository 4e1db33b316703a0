"""Synthetic grayscale videos with ground-truth landmark masks and tracks.

Elements are crude stand-ins for ultrasound landmarks: bright horizontal
bands (pleura / bone surface), vertical streaks (B-lines), moving blobs,
and static overlays (display labels, which are *not* landmarks). Speckle is
multiplicative uniform noise ``1 +/- sigma_n`` and is not physically
meaningful.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .pgm import frame_name, read_video, write_pgm, write_video

KINDS = ("horizontal_band", "vertical_streak", "static_overlay", "moving_blob")
BORDER = 16


@dataclass
class Element:
    kind: str
    intensity: float = 0.8
    thickness: float = 6.0
    position: Optional[Tuple[float, float]] = None   # (x, y) rest centre
    length: Optional[float] = None                    # extent along the element's long axis
    amplitude: float = 0.0
    period: float = 32.0
    phase: float = 0.0
    landmark: Optional[bool] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown element kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("element intensity must lie in [0, 1]")
        if self.thickness <= 0 or self.period <= 0:
            raise ValueError("thickness and period must be positive")
        if self.landmark is None:
            self.landmark = self.kind != "static_overlay"
        if self.position is not None:
            self.position = (float(self.position[0]), float(self.position[1]))


@dataclass
class SceneSpec:
    n_frames: int = 32
    size: int = 256
    elements: List[Element] = field(default_factory=list)
    background: float = 0.1
    speckle: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.elements = [e if isinstance(e, Element) else Element(**e) for e in self.elements]
        if self.n_frames < 1 or self.size < 2 * BORDER + 4:
            raise ValueError("scene needs n_frames >= 1 and size > 2*border")
        if not 0.0 <= self.background <= 1.0 or not 0.0 <= self.speckle < 1.0:
            raise ValueError("background must lie in [0,1] and speckle in [0,1)")
        for i, el in enumerate(self.elements):
            lo, hi = _extent_bounds(el, self.size)
            if lo < BORDER or hi > self.size - 1 - BORDER:
                raise ValueError(f"element {i} ({el.kind}) comes within {BORDER} px of the border")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Video:
    frames: np.ndarray        # [T, H, W] in [0, 1]
    masks: np.ndarray         # [T, H, W] bool, union of landmark supports
    tracks: np.ndarray        # [T, E, 2] element centres (x, y), landmark elements only
    element_masks: np.ndarray  # [T, E_all, H, W] bool
    spec: SceneSpec


def _rest(el: Element, size: int) -> Tuple[float, float]:
    if el.position is not None:
        return el.position
    return ((size - 1) / 2.0, (size - 1) / 2.0)


def _length(el: Element, size: int) -> float:
    if el.length is not None:
        return float(el.length)
    if el.kind in ("horizontal_band", "vertical_streak"):
        return float(size - 1 - 2 * BORDER)
    return el.thickness


def _extent_bounds(el: Element, size: int) -> Tuple[float, float]:
    """Smallest and largest coordinate the element's support can reach."""
    x, y = _rest(el, size)
    half_t = el.thickness / 2.0
    half_l = _length(el, size) / 2.0
    amp = abs(el.amplitude)
    if el.kind == "horizontal_band":
        spans = [(x - half_l, x + half_l), (y - amp - half_t, y + amp + half_t)]
    elif el.kind == "vertical_streak":
        spans = [(x - amp - half_t, x + amp + half_t), (y - half_l, y + half_l)]
    elif el.kind == "moving_blob":
        spans = [(x - amp - half_t, x + amp + half_t), (y - amp - half_t, y + amp + half_t)]
    else:
        spans = [(x - half_l, x + half_l), (y - half_t, y + half_t)]
    return min(s[0] for s in spans), max(s[1] for s in spans)


def element_centre(el: Element, t: int, size: int) -> Tuple[float, float]:
    x, y = _rest(el, size)
    off = el.amplitude * np.sin(2 * np.pi * t / el.period + el.phase)
    if el.kind == "horizontal_band":
        return x, y + off
    if el.kind == "vertical_streak":
        return x + off, y
    if el.kind == "moving_blob":
        return x + off, y + el.amplitude * np.cos(2 * np.pi * t / el.period + el.phase)
    return x, y


def element_support(el: Element, t: int, size: int) -> np.ndarray:
    cx, cy = element_centre(el, t, size)
    yy, xx = np.mgrid[0:size, 0:size]
    half_t = el.thickness / 2.0
    half_l = _length(el, size) / 2.0
    if el.kind == "horizontal_band":
        return (np.abs(yy - cy) <= half_t) & (np.abs(xx - cx) <= half_l)
    if el.kind == "vertical_streak":
        return (np.abs(xx - cx) <= half_t) & (np.abs(yy - cy) <= half_l)
    if el.kind == "moving_blob":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half_t ** 2
    # static overlay: rectangle length x thickness
    return (np.abs(xx - cx) <= half_l) & (np.abs(yy - cy) <= half_t)


def generate(scene: SceneSpec) -> Video:
    """Render the scene; deterministic for a given spec (including seed)."""
    rng = np.random.default_rng(scene.seed)
    n, size = scene.n_frames, scene.size
    frames = np.empty((n, size, size))
    emasks = np.zeros((n, len(scene.elements), size, size), dtype=bool)
    landmark_idx = [i for i, e in enumerate(scene.elements) if e.landmark]
    tracks = np.zeros((n, len(landmark_idx), 2))
    for t in range(n):
        img = np.full((size, size), scene.background)
        for i, el in enumerate(scene.elements):
            sup = element_support(el, t, size)
            emasks[t, i] = sup
            if el.kind != "static_overlay":
                img[sup] = np.maximum(img[sup], el.intensity)
        noise = rng.uniform(-1.0, 1.0, size=(size, size))
        frames[t] = np.clip(img * (1.0 + scene.speckle * noise), 0.0, 1.0)
        # display graphics are drawn over the speckled image, so they stay static
        for i, el in enumerate(scene.elements):
            if el.kind == "static_overlay":
                frames[t][emasks[t, i]] = el.intensity
        for j, i in enumerate(landmark_idx):
            tracks[t, j] = element_centre(scene.elements[i], t, size)
    masks = emasks[:, landmark_idx].any(axis=1) if landmark_idx else np.zeros((n, size, size), bool)
    return Video(frames, masks, tracks, emasks, scene)


def label_components(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """4-connected component labels of a binary mask."""
    return ndimage.label(np.asarray(mask, dtype=bool))


def oracle_score(tracks: np.ndarray, keypoints: Sequence[np.ndarray]) -> float:
    """Mean over frames and elements of the distance to the nearest keypoint (pixels)."""
    tracks = np.asarray(tracks, dtype=np.float64)
    if len(keypoints) != tracks.shape[0]:
        raise ValueError(f"{len(keypoints)} keypoint frames for {tracks.shape[0]} track frames")
    dists = []
    for pts, kp in zip(tracks, keypoints):
        kp = np.asarray(kp, dtype=np.float64).reshape(-1, 2)
        d = np.sqrt(((pts[:, None, :] - kp[None, :, :]) ** 2).sum(-1))
        dists.append(d.min(axis=1))
    return float(np.mean(np.concatenate(dists))) if dists else 0.0


# ------------------------------------------------------------------ disk I/O
def save_video(video: Video, directory, label: Optional[str] = None) -> Path:
    """Write ``frames/``, ``masks/`` (P5, 0/255), ``tracks.json`` and ``scene.json``."""
    d = Path(directory)
    write_video(d / "frames", video.frames)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(video.masks):
        write_pgm(d / "masks" / frame_name(t), m.astype(np.float64))
    (d / "tracks.json").write_text(json.dumps(video.tracks.tolist()))
    meta = {"scene": video.spec.to_dict()}
    if label is not None:
        meta["label"] = label
    (d / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return d


def load_masks(directory) -> np.ndarray:
    d = Path(directory)
    mdir = d / "masks" if (d / "masks").is_dir() else d
    return read_video(mdir) > 0.5


def load_tracks(directory) -> np.ndarray:
    return np.asarray(json.loads((Path(directory) / "tracks.json").read_text()))


# ---------------------------------------------------------------- presets
def lung_scene(n_frames: int = 64, size: int = 128, seed: int = 0, overlay: bool = True,
               band_amplitude: Optional[float] = None, phase: float = 0.0) -> SceneSpec:
    """Oscillating horizontal band, two vertical streaks below it and a static label."""
    s = size / 128.0
    amp = 8.0 * s if band_amplitude is None else band_amplitude
    band_y = 44.0 * s
    els = [
        Element("horizontal_band", 0.9, 5.0 * s, (63.5 * s, band_y), 72.0 * s, amp, 24.0, phase),
        Element("vertical_streak", 0.8, 5.0 * s, (44.0 * s, 84.0 * s), 40.0 * s, 8.0 * s, 24.0, phase),
        Element("vertical_streak", 0.8, 5.0 * s, (84.0 * s, 84.0 * s), 40.0 * s, 8.0 * s, 24.0,
                phase + np.pi),
    ]
    if overlay:
        els.append(Element("static_overlay", 1.0, 6.0 * s, (100.0 * s, 104.0 * s), 20.0 * s))
    return SceneSpec(n_frames, size, els, 0.1, 0.2, seed)


def band_pattern(size: int = 128, seed: int = 0, speckle: float = 0.0) -> SceneSpec:
    return SceneSpec(1, size, [Element("horizontal_band", 0.9, 6.0 * size / 128.0)], 0.0, speckle, seed)


def streak_pattern(size: int = 128, seed: int = 0, speckle: float = 0.0) -> SceneSpec:
    return SceneSpec(1, size, [Element("vertical_streak", 0.9, 6.0 * size / 128.0)], 0.0, speckle, seed)


def cross_pattern(size: int = 128, seed: int = 0, speckle: float = 0.0) -> SceneSpec:
    """One horizontal band crossing one vertical streak at the image centre."""
    t = 6.0 * size / 128.0
    return SceneSpec(1, size, [Element("horizontal_band", 0.9, t), Element("vertical_streak", 0.9, t)],
                     0.0, speckle, seed)


def dominant_scene(kind: str, n_frames: int = 5, size: int = 128, seed: int = 0) -> SceneSpec:
    """Scene dominated by horizontal bands (``kind="band"``) or vertical streaks (``"streak"``).

    Positions, phases and intensities are jittered from ``seed`` so that
    videos of one class differ from each other.
    """
    if kind not in ("band", "streak"):
        raise ValueError("kind must be 'band' or 'streak'")
    rng = np.random.default_rng(seed)
    s = size / 128.0
    els = []
    for c in (40.0, 64.0, 88.0):
        pos = c * s + rng.uniform(-6, 6) * s
        inten, phase = rng.uniform(0.7, 0.9), rng.uniform(0, 2 * np.pi)
        if kind == "band":
            els.append(Element("horizontal_band", inten, 4.0 * s, (63.5 * s, pos), 72.0 * s, 4.0 * s, 24.0, phase))
        else:
            els.append(Element("vertical_streak", inten, 4.0 * s, (pos, 63.5 * s), 72.0 * s, 4.0 * s, 24.0, phase))
    return SceneSpec(n_frames, size, els, 0.1, 0.2, seed)
