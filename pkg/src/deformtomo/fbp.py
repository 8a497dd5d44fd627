"""Filtered back-projection for single-axis tilt series, slice by slice."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TiltGeometry, VolumeGrid, voxel_centers

FILTER_KINDS = ("ram-lak", "hann")


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "hann"
    cutoff: float = 1.0  # fraction of Nyquist

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"filter kind must be one of {FILTER_KINDS}")
        if not 0 < self.cutoff <= 1:
            raise ValueError("cutoff must lie in (0, 1]")


def ramp_response(length: int, spec: FilterSpec, spacing: float = 1.0) -> np.ndarray:
    f = np.fft.fftfreq(length, d=spacing)
    nyq = 0.5 / spacing
    fc = spec.cutoff * nyq
    h = np.abs(f)
    if spec.kind == "hann":
        h = h * 0.5 * (1.0 + np.cos(np.pi * f / fc))
    return np.where(np.abs(f) <= fc, h, 0.0)


def ramp_filter(rows, spec: FilterSpec = FilterSpec(), spacing: float = 1.0) -> np.ndarray:
    """Multiply each row's DFT by |f| (cycles per unit of ``spacing``), optionally Hann-windowed."""
    rows = np.asarray(rows, dtype=np.float64)
    h = ramp_response(rows.shape[-1], spec, spacing)
    return np.real(np.fft.ifft(np.fft.fft(rows, axis=-1) * h, axis=-1))


def angular_weight(angles_deg: np.ndarray) -> float:
    """Quadrature weight per view: the angular spacing in radians (pi for a single view)."""
    if angles_deg.size < 2:
        return np.pi
    return float(np.deg2rad(np.mean(np.diff(np.sort(angles_deg)))))


def fbp_reconstruct(images, geom: TiltGeometry, spec: FilterSpec = FilterSpec(), pad: bool = True) -> VolumeGrid:
    """Per y-slice parallel-beam FBP; detector rows are zero-padded to >= 2N before filtering.

    Deformations are ignored and the missing wedge is not compensated.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape != (geom.m, geom.n, geom.n):
        raise ValueError(f"images {images.shape} do not match geometry")
    n = geom.n
    h = 2.0 / n
    length = int(2 ** np.ceil(np.log2(2 * n))) if pad else n
    padded = np.zeros(images.shape[:2] + (length,))
    padded[..., :n] = images
    filtered = ramp_filter(padded, spec, spacing=h)[..., :n]  # (M, y, x_d)

    c = voxel_centers(n)
    zz, xx = np.meshgrid(c, c, indexing="ij")
    weight = angular_weight(geom.angles)
    vol = np.zeros((n, n, n))  # z, y, x
    for q, theta in zip(filtered, np.deg2rad(geom.angles)):
        xd = xx * np.cos(theta) + zz * np.sin(theta)  # (z, x)
        idx = (xd + 1.0) * (n / 2.0) - 0.5
        i0 = np.floor(idx).astype(np.intp)
        frac = idx - i0
        for di, w in ((0, 1.0 - frac), (1, frac)):
            i = i0 + di
            valid = (i >= 0) & (i < n)
            vals = q[:, np.clip(i, 0, n - 1)]  # (y, z, x)
            vol += np.where(valid, w, 0.0)[:, None, :] * vals.transpose(1, 0, 2)
    return VolumeGrid(vol * weight)
