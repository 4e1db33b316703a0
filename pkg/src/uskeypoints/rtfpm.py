"""Radon-transformed feature probability maps.

A raw grayscale frame becomes a 10-channel map in [0, 1]:

    resize -> depth-gain attenuation (DGA) -> horizontal / vertical angle-band
    Radon enhancement -> log-Gabor band-pass at 5 wavelengths -> local phase
    tensor -> monogenic signal -> LP * FS * (1 - IBS)

Channels are ordered orientation-major (horizontal first), scale-minor.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

EPS = 1e-8

Band = Tuple[Tuple[float, float], ...]

HORIZONTAL_BAND: Band = ((65.0, 115.0),)
VERTICAL_BAND: Band = ((0.0, 30.0), (150.0, 180.0))


def default_lambda0() -> List[float]:
    """Wavelengths ``4.2*pi*gamma_k*(k-1)`` with ``gamma_k = 3k`` for k = 1..5."""
    return [4.2 * np.pi * 3 * k * (k - 1) for k in range(1, 6)]


@dataclass
class RTFPMConfig:
    size: int = 256
    a: float = 2.0
    dga: bool = True
    flip: bool = False
    radon: bool = True
    horizontal_band: Band = HORIZONTAL_BAND
    vertical_band: Band = VERTICAL_BAND
    angle_step: float = 1.0
    ramp_filter: bool = False
    lambda0: List[float] = field(default_factory=default_lambda0)
    sigma0: float = 0.55
    tau_percentile: float = 10.0

    def __post_init__(self):
        self.horizontal_band = normalize_band(self.horizontal_band)
        self.vertical_band = normalize_band(self.vertical_band)
        self.lambda0 = [float(v) for v in self.lambda0]
        if self.size < 8:
            raise ValueError("size must be >= 8")
        if self.a < 0:
            raise ValueError("attenuation factor a must be >= 0")
        if not 0.0 < self.sigma0 < 1.0:
            raise ValueError("sigma0 must lie in (0, 1)")
        if any(v < 0 for v in self.lambda0):
            raise ValueError("lambda0 values must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["horizontal_band"] = [list(b) for b in self.horizontal_band]
        d["vertical_band"] = [list(b) for b in self.vertical_band]
        d["tau_policy"] = f"percentile:{self.tau_percentile}"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RTFPMConfig":
        d = {k: v for k, v in d.items() if k != "tau_policy"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown rtfpm config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def n_channels(self) -> int:
        return 2 * len(self.lambda0)


def normalize_band(band) -> Band:
    """Validate an angle band given as one ``(lo, hi)`` pair or a list of pairs."""
    if band is None:
        return ()
    band = list(band)
    if band and np.isscalar(band[0]):
        band = [band]
    out = []
    for lo, hi in band:
        lo, hi = float(lo), float(hi)
        if not 0.0 <= lo <= hi <= 180.0:
            raise ValueError(f"angle interval ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 180")
        out.append((lo, hi))
    out.sort()
    for (a0, a1), (b0, b1) in zip(out, out[1:]):
        if b0 < a1:
            raise ValueError(f"angle intervals overlap: ({a0},{a1}) and ({b0},{b1})")
    return tuple(out)


# ----------------------------------------------------------------------- DGA
def dga_mask(height: int, a: float, flip: bool = False) -> np.ndarray:
    """Depth mask ``chi(d) = 1 - exp(-a d) / max(exp(-a d))`` as an [H, 1] column.

    Depth runs from 0 (top row) to 1 (bottom row). ``flip`` reverses the rows
    so the deep end is suppressed instead of the shallow one.
    """
    if height < 2:
        raise ValueError("dga_mask needs height >= 2")
    if a < 0:
        raise ValueError("attenuation factor must be >= 0")
    if a == 0:
        warnings.warn("DGA with a = 0 suppresses the whole image", RuntimeWarning, stacklevel=2)
    d = np.linspace(0.0, 1.0, height)
    if np.isinf(a):
        decay = np.where(d == 0, 1.0, 0.0)
    else:
        decay = np.exp(-a * d)
    chi = 1.0 - decay / decay.max()
    if flip:
        chi = chi[::-1]
    return chi.reshape(height, 1)


def apply_dga(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).reshape(-1, 1)
    if mask.shape[0] != frame.shape[0]:
        raise ValueError(f"mask length {mask.shape[0]} != frame height {frame.shape[0]}")
    return np.clip(frame * mask, 0.0, 1.0)


# --------------------------------------------------------------------- Radon
@dataclass
class Sinogram:
    values: np.ndarray          # [n_rho, n_angles]
    angles: np.ndarray          # degrees
    offset: float               # bin index of rho = 0
    size: int                   # side of the source image

    @property
    def rho(self) -> np.ndarray:
        return np.arange(self.values.shape[0]) - self.offset


def default_angles(step: float = 1.0) -> np.ndarray:
    return np.arange(0.0, 180.0, step)


def _trig(angles: np.ndarray):
    t = np.deg2rad(angles)
    c, s = np.cos(t), np.sin(t)
    c[np.abs(c) < 1e-12] = 0.0
    s[np.abs(s) < 1e-12] = 0.0
    return c, s


def _geometry(n: int):
    centre = (n - 1) / 2.0
    pad = int(np.ceil(centre * (np.sqrt(2.0) - 1.0))) + 2
    offset = centre + pad
    n_rho = int(np.ceil(2 * offset)) + 2
    return centre, offset, n_rho


def radon(image: np.ndarray, angles: Optional[Sequence[float]] = None) -> Sinogram:
    """Pixel-driven Radon transform.

    Each pixel at (x, y) (x = column, y = row, origin at the image centre) is
    split linearly between the two rho bins around ``x cos(t) + y sin(t)``,
    so every projection conserves total mass. At t = 0 the projection is the
    column sums; at t = 90 degrees the row sums.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"radon needs a square image, got shape {image.shape}")
    angles = default_angles() if angles is None else np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        raise ValueError("radon needs at least one angle")
    if np.any(angles < 0) or np.any(angles >= 180):
        raise ValueError("angles must lie in [0, 180)")
    n = image.shape[0]
    centre, offset, n_rho = _geometry(n)
    rows, cols = np.nonzero(image)
    vals = image[rows, cols]
    xs, ys = cols - centre, rows - centre
    c, s = _trig(angles)
    sino = np.zeros((angles.size, n_rho))
    chunk = max(1, 2_000_000 // max(vals.size, 1))
    for a0 in range(0, angles.size, chunk):
        cc, ss = c[a0:a0 + chunk, None], s[a0:a0 + chunk, None]
        pos = xs[None, :] * cc + ys[None, :] * ss + offset
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        base = (np.arange(cc.shape[0]) * n_rho)[:, None]
        flat = np.bincount((lo + base).ravel(), (vals * (1.0 - frac)).ravel(),
                           minlength=cc.shape[0] * n_rho)
        flat += np.bincount((lo + 1 + base).ravel(), (vals * frac).ravel(),
                            minlength=cc.shape[0] * n_rho)[:cc.shape[0] * n_rho]
        sino[a0:a0 + cc.shape[0]] = flat[:cc.shape[0] * n_rho].reshape(-1, n_rho)
    return Sinogram(sino.T.copy(), angles, offset, n)


def band_mask(angles: np.ndarray, band) -> np.ndarray:
    band = normalize_band(band)
    sel = np.zeros(angles.shape, dtype=bool)
    for lo, hi in band:
        sel |= (angles >= lo) & (angles <= hi)
    return sel


def _ramp(values: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    size = int(2 ** np.ceil(np.log2(2 * n)))
    freq = np.abs(np.fft.fftfreq(size))
    spec = np.fft.fft(values, n=size, axis=0) * freq[:, None]
    return np.real(np.fft.ifft(spec, axis=0))[:n]


def backproject(sino: Sinogram, band, ramp_filter: bool = False) -> np.ndarray:
    """Raw (un-normalised) backprojection restricted to the angles in ``band``."""
    n = sino.size
    sel = band_mask(sino.angles, band)
    out = np.zeros((n, n))
    if not sel.any():
        return out
    values = sino.values[:, sel]
    if ramp_filter:
        values = _ramp(values)
    angles = sino.angles[sel]
    step = np.deg2rad(np.median(np.diff(np.sort(sino.angles)))) if sino.angles.size > 1 else 1.0
    centre = (n - 1) / 2.0
    coords = np.arange(n) - centre
    xs = coords[None, :]
    ys = coords[:, None]
    c, s = _trig(angles)
    n_rho = values.shape[0]
    for j in range(angles.size):
        pos = xs * c[j] + ys * s[j] + sino.offset
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_rho - 2)
        frac = pos - lo
        col = values[:, j]
        out += col[lo] * (1.0 - frac) + col[lo + 1] * frac
    return out * step


def minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def controlled_iradon(sino: Sinogram, band, ramp_filter: bool = False) -> np.ndarray:
    """Backprojection over ``band`` only, min-max normalised to [0, 1].

    No ramp filter is applied unless ``ramp_filter`` is set.
    """
    band = normalize_band(band)
    if not band_mask(sino.angles, band).any():
        warnings.warn("empty angle band: controlled IRT returns a zero image", RuntimeWarning,
                      stacklevel=2)
        return np.zeros((sino.size, sino.size))
    return minmax(backproject(sino, band, ramp_filter))


def enhance_orientation(frame_dga: np.ndarray, band, sino: Optional[Sinogram] = None,
                        angle_step: float = 1.0, ramp_filter: bool = False) -> np.ndarray:
    """Mask the DGA-compensated frame with its band-limited reconstruction."""
    if sino is None:
        sino = radon(frame_dga, default_angles(angle_step))
    return np.clip(controlled_iradon(sino, band, ramp_filter) * frame_dga, 0.0, 1.0)


# ------------------------------------------------------------------ log-Gabor
def radial_frequency(shape) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Angular frequencies (rad/pixel): ``(u, v, |omega|)`` in FFT layout."""
    h, w = shape
    u = 2 * np.pi * np.fft.fftfreq(w)[None, :]
    v = 2 * np.pi * np.fft.fftfreq(h)[:, None]
    return u, v, np.sqrt(u * u + v * v)


def log_gabor_gain(omega, omega0: float, sigma0: float) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    out = np.zeros_like(omega)
    pos = omega > 0
    out[pos] = np.exp(-np.log(omega[pos] / omega0) ** 2 / (2 * np.log(sigma0) ** 2))
    return out


def log_gabor_response(image: np.ndarray, lambda0: float, sigma0: float = 0.55) -> np.ndarray:
    """Band-pass ``image`` around wavelength ``lambda0`` pixels.

    ``lambda0 == 0`` is the pass-through channel and returns the image unchanged.
    """
    if lambda0 < 0:
        raise ValueError("lambda0 must be >= 0")
    if not 0 < sigma0 < 1:
        raise ValueError("sigma0 must lie in (0, 1)")
    image = np.asarray(image, dtype=np.float64)
    if lambda0 == 0:
        return image.copy()
    _, _, omega = radial_frequency(image.shape)
    gain = log_gabor_gain(omega, 2 * np.pi / lambda0, sigma0)
    return np.real(np.fft.ifft2(np.fft.fft2(image) * gain))


# ------------------------------------------------------- local phase tensor
def _derivatives(img: np.ndarray):
    iy, ix = np.gradient(img)
    ixy, ixx = np.gradient(ix)
    iyy, iyx = np.gradient(iy)
    hxy = 0.5 * (ixy + iyx)
    lap = ixx + iyy
    ly, lx = np.gradient(lap)
    return ix, iy, ixx, hxy, iyy, lx, ly


def phase_tensors(img: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Frobenius norms of the even (Hessian) and odd (gradient x grad-Laplacian) tensors."""
    ix, iy, a, b, d, lx, ly = _derivatives(np.asarray(img, dtype=np.float64))
    # H H^T for symmetric H = [[a, b], [b, d]]
    e11 = a * a + b * b
    e12 = b * (a + d)
    e22 = b * b + d * d
    t_even = np.sqrt(e11 ** 2 + 2 * e12 ** 2 + e22 ** 2)
    # -0.5 (g l^T + l g^T)
    o11 = -ix * lx
    o12 = -0.5 * (ix * ly + iy * lx)
    o22 = -iy * ly
    t_odd = np.sqrt(o11 ** 2 + 2 * o12 ** 2 + o22 ** 2)
    return t_even, t_odd


def local_phase_tensor(img: np.ndarray) -> np.ndarray:
    """``sqrt(Te^2 + To^2) * cos(phi)`` with ``phi = atan2(To, Te)``."""
    t_even, t_odd = phase_tensors(img)
    phi = np.arctan2(t_odd, t_even)
    return np.sqrt(t_even ** 2 + t_odd ** 2) * np.cos(phi)


def monogenic(lpt: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(M1, M2, M3)``: the input and its Riesz pair (x kernel, y kernel)."""
    lpt = np.asarray(lpt, dtype=np.float64)
    u, v, omega = radial_frequency(lpt.shape)
    safe = np.where(omega > 0, omega, 1.0)
    spec = np.fft.fft2(lpt)
    ku = np.where(omega > 0, -1j * u / safe, 0.0)
    kv = np.where(omega > 0, -1j * v / safe, 0.0)
    m2 = np.real(np.fft.ifft2(spec * ku))
    m3 = np.real(np.fft.ifft2(spec * kv))
    return lpt.copy(), m2, m3


# ------------------------------------------------------------- LP, FS, IBS
def local_phase(m1, m2, m3) -> np.ndarray:
    """``1 - arctan(|M2, M3| / M1)`` affinely mapped from (1-pi/2, 1+pi/2) to [0, 1]."""
    amp = np.sqrt(m2 * m2 + m3 * m3)
    ang = np.arctan2(amp, m1)
    ang = np.where(ang > np.pi / 2, ang - np.pi, ang)   # arctan of the ratio
    return np.clip((np.pi / 2 - ang) / np.pi, 0.0, 1.0)


def feature_symmetry(t_even, t_odd, m1, m2, m3, tau: Optional[float] = None,
                     tau_percentile: float = 10.0) -> np.ndarray:
    diff = t_even - t_odd
    if tau is None:
        tau = float(np.percentile(diff, tau_percentile))
    num = np.maximum(diff - tau, 0.0)
    return np.clip(num / (m1 * m1 + m2 * m2 + m3 * m3 + EPS), 0.0, 1.0)


def integrated_backscatter(image: np.ndarray) -> np.ndarray:
    """Running sum of squared intensity down each column, scaled by the column total."""
    sq = np.asarray(image, dtype=np.float64) ** 2
    cum = np.cumsum(sq, axis=0)
    total = cum[-1:, :]
    return np.divide(cum, total, out=np.zeros_like(cum), where=total > 0)


def lp_fs_ibs(m1, m2, m3, image, tau: Optional[float] = None, bandpassed=None,
              tau_percentile: float = 10.0):
    """Return ``(LP, FS, IBS)``.

    Phase tensors for FS come from ``bandpassed`` (defaults to ``image``); IBS
    always uses ``image``.
    """
    if tau is not None and tau < 0:
        raise ValueError("tau must be >= 0")
    t_even, t_odd = phase_tensors(image if bandpassed is None else bandpassed)
    lp = local_phase(m1, m2, m3)
    fs = feature_symmetry(t_even, t_odd, m1, m2, m3, tau, tau_percentile)
    return lp, fs, integrated_backscatter(image)


def probability_channel(enhanced: np.ndarray, lambda0: float, sigma0: float,
                        tau_percentile: float = 10.0) -> np.ndarray:
    """``LP * FS * (1 - IBS)`` for one enhanced image at one wavelength."""
    bp = log_gabor_response(enhanced, lambda0, sigma0)
    t_even, t_odd = phase_tensors(bp)
    lpt = np.sqrt(t_even ** 2 + t_odd ** 2) * np.cos(np.arctan2(t_odd, t_even))
    m1, m2, m3 = monogenic(lpt)
    lp = local_phase(m1, m2, m3)
    fs = feature_symmetry(t_even, t_odd, m1, m2, m3, None, tau_percentile)
    ibs = integrated_backscatter(enhanced)
    return np.clip(lp * fs * (1.0 - ibs), 0.0, 1.0)


# ------------------------------------------------------------------ pipeline
@dataclass
class FeatureProbabilityMap:
    channels: np.ndarray                 # [10, H, W] float32
    lambda0_per_channel: List[float]
    orientation_per_channel: List[str]


def resize(frame: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize (align-corners) to ``size x size``, clamped to [0, 1]."""
    from .numerics.layers import _interp_matrix

    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape == (size, size):
        return np.clip(frame, 0.0, 1.0)
    ah = _interp_matrix(frame.shape[0], size, np.float64)
    aw = _interp_matrix(frame.shape[1], size, np.float64)
    return np.clip(ah @ frame @ aw.T, 0.0, 1.0)


def enhanced_pair(frame: np.ndarray, config: RTFPMConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Resize, apply DGA, and return the (horizontal, vertical) enhanced images."""
    img = resize(frame, config.size)
    if config.dga:
        img = apply_dga(img, dga_mask(config.size, config.a, config.flip))
    if not config.radon:
        return img, img
    sino = radon(img, default_angles(config.angle_step))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        horiz = enhance_orientation(img, config.horizontal_band, sino, ramp_filter=config.ramp_filter)
        vert = enhance_orientation(img, config.vertical_band, sino, ramp_filter=config.ramp_filter)
    return horiz, vert


def fpm(frame: np.ndarray, config: Optional[RTFPMConfig] = None) -> FeatureProbabilityMap:
    """Compute the full feature probability map of one raw frame."""
    config = config or RTFPMConfig()
    horiz, vert = enhanced_pair(frame, config)
    chans, lams, oris = [], [], []
    for name, img in (("horizontal", horiz), ("vertical", vert)):
        for lam in config.lambda0:
            chans.append(probability_channel(img, lam, config.sigma0, config.tau_percentile))
            lams.append(lam)
            oris.append(name)
    return FeatureProbabilityMap(np.stack(chans).astype(np.float32), lams, oris)


def normalization_channels(frame: np.ndarray, size: Optional[int] = None,
                           mus: Optional[Sequence[float]] = None, sigma: float = 0.5) -> np.ndarray:
    """Ablation input: ``clip((frame - mu_c) / sigma, 0, 1)`` for 10 linearly spaced means."""
    img = np.asarray(frame, dtype=np.float64)
    if size is not None:
        img = resize(img, size)
    mus = np.linspace(0.3, 0.7, 10) if mus is None else np.asarray(mus, dtype=np.float64)
    out = np.clip((img[None] - mus[:, None, None]) / sigma, 0.0, 1.0)
    return out.astype(np.float32)
