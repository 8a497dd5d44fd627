"""Evaluation: SNR, Fourier shell correlation, deformation errors, registration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .deformation import DeformationParams, GroundTruthDeformations, warp_coords
from .geometry import VolumeGrid, pixel_grid

METHODS = ("EST", "EST-W/O", "FBP")
TABLE1_COLUMNS = ("method", "shift_px", "rot_deg", "local_px", "warp_px", "proj_snr_db")


def snr_db(s, s_true) -> float:
    """10 log10(Var(s_true) / Var(s - s_true)); +inf when the residual is constant."""
    s, s_true = np.asarray(s, dtype=np.float64), np.asarray(s_true, dtype=np.float64)
    if s.shape != s_true.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {s_true.shape}")
    resid = np.var(s - s_true)
    if resid == 0:
        return float("inf")
    return float(10.0 * np.log10(np.var(s_true) / resid))


def variance_ratio_db(s, s_true) -> float:
    """10 log10(Var(s) / Var(s_true)).

    Reported next to ``snr_db`` for comparison only: it ignores the residual, so a
    noisy image with equal noise and signal power reads about +3 dB instead of 0.
    """
    return float(10.0 * np.log10(np.var(np.asarray(s, dtype=np.float64)) / np.var(np.asarray(s_true, dtype=np.float64))))


def mean_image_snr(images, reference) -> float:
    """Average per-image SNR of a stack (M, N, N) against its reference."""
    return float(np.mean([snr_db(a, b) for a, b in zip(images, reference)]))


def normalized_cross_correlation(a, b) -> float:
    """Pearson correlation of two arrays."""
    a = np.asarray(a, dtype=np.float64).ravel() - np.mean(a)
    b = np.asarray(b, dtype=np.float64).ravel() - np.mean(b)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


@dataclass
class FSCCurve:
    frequency: np.ndarray   # shell centers, cycles per unit length
    correlation: np.ndarray
    counts: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(self.correlation.shape, dtype=bool)


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, VolumeGrid) else np.asarray(v, dtype=np.float64)


def fsc(v1, v2, shells: int | None = None) -> FSCCurve:
    """Correlation of 3D DFT coefficients over integer-radius shells (one per radius, N/2 by default)."""
    a, b = _as_array(v1), _as_array(v2)
    if a.shape != b.shape or a.ndim != 3 or len(set(a.shape)) != 1:
        raise ValueError("FSC needs two cubic volumes of equal shape")
    n = a.shape[0]
    shells = shells or n // 2
    f1, f2 = np.fft.fftn(a), np.fft.fftn(b)
    k = np.fft.fftfreq(n) * n
    kz, ky, kx = np.meshgrid(k, k, k, indexing="ij")
    radius = np.sqrt(kx**2 + ky**2 + kz**2)
    if shells == n // 2:
        shell = np.rint(radius).astype(np.intp)
        centers = np.arange(shells, dtype=np.float64)
    else:
        width = (n / 2.0) / shells
        shell = np.floor(radius / width).astype(np.intp)
        centers = (np.arange(shells) + 0.5) * width
    valid = shell < shells
    idx = shell[valid]
    cross = np.bincount(idx, weights=np.real(f1 * np.conj(f2))[valid], minlength=shells)
    e1 = np.bincount(idx, weights=(np.abs(f1) ** 2)[valid], minlength=shells)
    e2 = np.bincount(idx, weights=(np.abs(f2) ** 2)[valid], minlength=shells)
    counts = np.bincount(idx, minlength=shells)
    den = np.sqrt(e1 * e2)
    degenerate = den == 0
    corr = np.where(degenerate, 0.0, cross / np.where(degenerate, 1.0, den))
    # index k on a box of length 2 is k/2 cycles per unit
    return FSCCurve(centers / 2.0, corr, counts, degenerate)


def resolution_at_threshold(curve: FSCCurve, t: float = 0.5) -> float:
    """First frequency where the curve drops below ``t``, linearly interpolated; inf if never."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    c, f = curve.correlation, curve.frequency
    below = np.flatnonzero(c < t)
    if below.size == 0:
        return float("inf")
    i = below[0]
    if i == 0:
        return float(f[0])
    return float(f[i - 1] + (c[i - 1] - t) / (c[i - 1] - c[i]) * (f[i] - f[i - 1]))


def register_volumes(est, ref, max_shift: int | None = None) -> tuple[VolumeGrid, tuple[int, int, int]]:
    """Integer translation of ``est`` maximizing its normalized cross-correlation with ``ref``.

    Exhaustive over +-max_shift voxels per axis (default N/8), zero padded.
    Returns the shifted volume and the applied shift as (dx, dy, dz).
    """
    e, r = _as_array(est), _as_array(ref)
    if e.shape != r.shape:
        raise ValueError("volumes must have equal shapes")
    n = e.shape[0]
    s = n // 8 if max_shift is None else int(max_shift)
    size = (2 * n,) * 3
    ax = (0, 1, 2)
    fe = np.fft.rfftn(e, size, ax)
    cross = np.fft.irfftn(np.fft.rfftn(r, size, ax) * np.conj(fe), size, ax)
    box = np.zeros(size)
    box[:n, :n, :n] = 1.0
    energy = np.fft.irfftn(np.fft.rfftn(box, size, ax) * np.conj(np.fft.rfftn(e * e, size, ax)), size, ax)
    shifts = np.arange(-s, s + 1)
    ix = np.ix_(shifts % (2 * n), shifts % (2 * n), shifts % (2 * n))
    c, en = cross[ix], np.maximum(energy[ix], 0.0)
    # the reference norm is constant over shifts and drops out of the argmax
    usable = en > 1e-12 * max(float(en.max()), 1e-300)
    score = np.full(c.shape, -np.inf)
    score[usable] = c[usable] / np.sqrt(en[usable])
    # prefer the smallest shift among numerically tied maxima
    best = score.max()
    tied = np.argwhere(score >= best - 1e-12 * abs(best))
    dist = np.abs(tied - s).sum(axis=1)
    dz, dy, dx = (tied[np.argmin(dist)] - s).tolist()
    return VolumeGrid(shift_volume(e, (dz, dy, dx))), (dx, dy, dz)


def shift_volume(vol: np.ndarray, shift_zyx) -> np.ndarray:
    """out[i] = vol[i - shift], zero filled."""
    out = np.zeros_like(vol)
    src, dst = [], []
    for d, n in zip(shift_zyx, vol.shape):
        if d >= 0:
            src.append(slice(0, n - d))
            dst.append(slice(d, n))
        else:
            src.append(slice(-d, n))
            dst.append(slice(0, n + d))
    out[tuple(dst)] = vol[tuple(src)]
    return out


@dataclass
class MetricsReport:
    method: str
    shift_px: float
    rot_deg: float
    local_px: float
    warp_px: float
    proj_snr_db: float = float("nan")

    def row(self) -> list:
        return [getattr(self, c) for c in TABLE1_COLUMNS]

    def as_dict(self) -> dict:
        return asdict(self)


def deformation_errors(true: GroundTruthDeformations, est: DeformationParams | GroundTruthDeformations | None,
                       method: str = "EST", n: int | None = None) -> MetricsReport:
    """Mean errors in pixels/degrees against the ground truth; ``est=None`` means identity estimates."""
    n = n or true.n
    m = true.m
    if est is not None and est.m != m:
        raise ValueError(f"{est.m} estimated tilts vs {m} true tilts")
    px = n / 2.0
    grid = pixel_grid(n)
    shift, rot, local, warp = [], [], [], []
    for i in range(m):
        if est is None:
            a_hat, t_hat, l_hat = 0.0, np.zeros(2), np.zeros((n, n, 2))
            w_hat = grid
        elif isinstance(est, GroundTruthDeformations):
            a_hat, t_hat = est.alpha_deg[i], est.tau[i]
            l_hat, w_hat = est.local_normalized(i), est.warp_grid(i)
        else:
            a_hat, t_hat = est.alpha_deg[i], est.tau[i].values
            l_hat = est.local_displacement(i, grid)
            w_hat = warp_coords(est, i, grid)
        shift.append(np.linalg.norm(t_hat - true.tau[i]) * px)
        rot.append(abs(a_hat - true.alpha_deg[i]))
        local.append(np.mean(np.linalg.norm(l_hat - true.local_normalized(i), axis=-1)) * px)
        warp.append(np.mean(np.linalg.norm(w_hat - true.warp_grid(i), axis=-1)) * px)
    return MetricsReport(method, float(np.mean(shift)), float(np.mean(rot)), float(np.mean(local)), float(np.mean(warp)))


def warp_error_bound(true: GroundTruthDeformations, est: DeformationParams) -> float:
    """Upper bound on the composed warp error from the per-component errors (pixels)."""
    n = true.n
    grid = pixel_grid(n)
    total = []
    for i in range(true.m):
        v = grid + true.local_normalized(i) + true.tau[i]
        dalpha = np.deg2rad(abs(est.alpha_deg[i] - true.alpha_deg[i]))
        rot = 2.0 * np.sin(dalpha / 2.0) * np.linalg.norm(v, axis=-1)
        dl = np.linalg.norm(est.local_displacement(i, grid) - true.local_normalized(i), axis=-1)
        dt = np.linalg.norm(est.tau[i].values - true.tau[i])
        total.append(np.mean(dl + dt + rot))
    return float(np.mean(total) * n / 2.0)

