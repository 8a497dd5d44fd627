"""Single-axis tilt geometry, trilinear volume sampling, projection and its adjoint.

Conventions: coordinates are normalized to [-1, 1] on every axis, volumes are
indexed ``[z, y, x]``, images ``[y, x]``; the tilt axis is y and the beam runs
along z of the detector frame. A projection at tilt theta integrates the
volume along ``R_{-theta}(x_d, y_d, t)`` for t in [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# float64 bytes of field features held in memory per projection chunk
_CHUNK_BYTES = 64 * 2**20


def voxel_centers(n: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def pixel_grid(n: int) -> np.ndarray:
    """(n, n, 2) array of (x, y) detector coordinates, indexed [y, x]."""
    c = voxel_centers(n)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx, yy], axis=-1)


def rotate_coords_3d(x, theta_deg):
    """Rotate points (..., 3) about the y axis by ``theta_deg`` (counterclockwise seen from +y)."""
    x = np.asarray(x, dtype=np.float64)
    th = np.deg2rad(theta_deg)
    c, s = np.cos(th), np.sin(th)
    out = np.empty(np.broadcast_shapes(x.shape, np.shape(c) + (3,)))
    out[..., 0] = x[..., 0] * c + x[..., 2] * s
    out[..., 1] = x[..., 1]
    out[..., 2] = -x[..., 0] * s + x[..., 2] * c
    return out


@dataclass(frozen=True)
class TiltGeometry:
    angles: np.ndarray
    n: int
    samples: int = 0
    axis: str = "y"

    def __post_init__(self):
        angles = np.atleast_1d(np.asarray(self.angles, dtype=np.float64))
        if angles.size < 1:
            raise ValueError("need at least one tilt angle")
        if np.any(angles < -90) or np.any(angles >= 90):
            raise ValueError("tilt angles must lie in [-90, 90)")
        samples = self.samples or 2 * self.n
        if samples < self.n:
            raise ValueError("samples per ray must be >= n")
        if self.axis != "y":
            raise ValueError("only the y tilt axis is supported")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "samples", int(samples))

    @classmethod
    def uniform(cls, m: int, n: int, lo: float = -70.0, hi: float = 70.0, samples: int = 0) -> "TiltGeometry":
        return cls(np.linspace(lo, hi, m), n, samples)

    @property
    def m(self) -> int:
        return self.angles.size

    @property
    def ray_nodes(self) -> np.ndarray:
        """Midpoint quadrature nodes on [-1, 1]."""
        return voxel_centers(self.samples)

    @property
    def dt(self) -> float:
        return 2.0 / self.samples


@dataclass
class VolumeGrid:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise ValueError(f"volume must be cubic, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume has non-finite values")
        self.data = data

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def spacing(self) -> float:
        return 2.0 / self.n


def inside_cube(pts: np.ndarray) -> np.ndarray:
    return np.all(np.abs(pts) <= 1.0, axis=-1)


def _trilinear_corners(pts: np.ndarray, n: int):
    """Yield (flat voxel index, weight) for the 8 interpolation corners of each point.

    Corners off the lattice and points outside the cube get weight 0 (index
    clipped to a valid slot so gathers stay in bounds).
    """
    pts = pts.reshape(-1, 3)
    idx = (pts + 1.0) * (n / 2.0) - 0.5
    base = np.floor(idx)
    frac = idx - base
    base = base.astype(np.intp)
    inside = inside_cube(pts)
    for dz in (0, 1):
        iz = base[:, 2] + dz
        wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
        for dy in (0, 1):
            iy = base[:, 1] + dy
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dx in (0, 1):
                ix = base[:, 0] + dx
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                valid = inside & (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n) & (iz >= 0) & (iz < n)
                flat = (np.clip(iz, 0, n - 1) * n + np.clip(iy, 0, n - 1)) * n + np.clip(ix, 0, n - 1)
                yield flat, np.where(valid, wz * wy * wx, 0.0)


def trilinear_sample(data: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    n = data.shape[0]
    flat_data = data.reshape(-1)
    out = np.zeros(pts.size // 3)
    for flat, w in _trilinear_corners(pts, n):
        out += w * flat_data[flat]
    return out.reshape(pts.shape[:-1])


def trilinear_adjoint(values, pts, n: int) -> np.ndarray:
    """Transpose of :func:`trilinear_sample`: scatter ``values`` into an n^3 grid."""
    pts = np.asarray(pts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    out = np.zeros(n ** 3)
    for flat, w in _trilinear_corners(pts, n):
        out += np.bincount(flat, weights=w * values, minlength=n ** 3)
    return out.reshape(n, n, n)


def sample_volume(vol, pts) -> np.ndarray:
    """Density at points (..., 3): trilinear with zero padding for grids, V(psi) for fields."""
    pts = np.asarray(pts, dtype=np.float64)
    if isinstance(vol, VolumeGrid):
        return trilinear_sample(vol.data, pts)
    if isinstance(vol, np.ndarray):
        return trilinear_sample(vol, pts)
    return np.asarray(vol(pts))


def ray_points(xy, theta_deg, nodes) -> np.ndarray:
    """Volume-frame sample points (P, S, 3) of the rays through detector points ``xy`` (P, 2)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    det = np.empty((xy.shape[0], nodes.size, 3))
    det[..., 0] = xy[:, None, 0]
    det[..., 1] = xy[:, None, 1]
    det[..., 2] = nodes[None, :]
    return rotate_coords_3d(det, -theta_deg)


def project_points(vol, xy, theta_deg: float, geom: TiltGeometry) -> np.ndarray:
    """Line integrals through detector points ``xy`` (P, 2) at one tilt."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    nodes = geom.ray_nodes
    if hasattr(vol, "encoding"):
        per_point = 8 * (vol.encoding.out_dim + 2 * vol.arch.hidden_width)
    else:
        per_point = 8 * 3 * 8
    chunk = max(1, _CHUNK_BYTES // (per_point * nodes.size))
    out = np.empty(xy.shape[0])
    for start in range(0, xy.shape[0], chunk):
        pts = ray_points(xy[start:start + chunk], theta_deg, nodes)
        dens = sample_volume(vol, pts)
        if not isinstance(vol, (VolumeGrid, np.ndarray)):
            dens = np.where(inside_cube(pts), dens, 0.0)
        out[start:start + chunk] = dens.sum(axis=1) * geom.dt
    return out


def project_tilt(vol, theta_deg: float, geom: TiltGeometry) -> np.ndarray:
    xy = pixel_grid(geom.n).reshape(-1, 2)
    return project_points(vol, xy, theta_deg, geom).reshape(geom.n, geom.n)


def project_series(vol, geom: TiltGeometry) -> np.ndarray:
    return np.stack([project_tilt(vol, th, geom) for th in geom.angles])


def backproject(images, geom: TiltGeometry) -> VolumeGrid:
    """Exact adjoint of ``vol -> project_series(vol, geom)`` for grid volumes."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape != (geom.m, geom.n, geom.n):
        raise ValueError(f"expected images of shape {(geom.m, geom.n, geom.n)}, got {images.shape}")
    n = geom.n
    xy = pixel_grid(n).reshape(-1, 2)
    nodes = geom.ray_nodes
    out = np.zeros((n, n, n))
    for img, th in zip(images, geom.angles):
        pts = ray_points(xy, th, nodes)
        vals = np.repeat(img.reshape(-1) * geom.dt, nodes.size)
        out += trilinear_adjoint(vals, pts, n)
    return VolumeGrid(out)
