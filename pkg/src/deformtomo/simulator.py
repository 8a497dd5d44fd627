"""Phantoms and synthetic deformed, noisy tilt series."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom

from .deformation import GroundTruthDeformations, bilinear_sample
from .geometry import TiltGeometry, VolumeGrid, project_series, voxel_centers

PHANTOM_KINDS = ("gaussian-blobs", "shepp-logan-3d", "from-mrc")
SUPPORT_RADIUS = 0.88

# (a, b, c, x0, y0, z0, phi_deg, value): 3D Shepp-Logan ellipsoids, modified contrast
_SHEPP_LOGAN = np.array([
    [0.69, 0.92, 0.90, 0.0, 0.0, 0.0, 0.0, 1.0],
    [0.6624, 0.874, 0.88, 0.0, -0.0184, 0.0, 0.0, -0.8],
    [0.11, 0.31, 0.22, 0.22, 0.0, 0.0, -18.0, -0.2],
    [0.16, 0.41, 0.28, -0.22, 0.0, 0.0, 18.0, -0.2],
    [0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0, 0.1],
    [0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0, 0.1],
    [0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0, 0.1],
    [0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0, 0.1],
    [0.023, 0.023, 0.02, 0.0, -0.606, 0.0, 0.0, 0.1],
    [0.023, 0.046, 0.02, 0.06, -0.605, 0.0, 0.0, 0.1],
])


def _lattice(n: int):
    c = voxel_centers(n)
    return np.meshgrid(c, c, c, indexing="ij")  # z, y, x


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]  # (x, y, z)
    sigma: float
    amplitude: float

    def line_integral_z(self, x: float, y: float) -> float:
        """Integral over z of the blob along the beam line through (x, y)."""
        r2 = (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2
        return self.amplitude * np.sqrt(2 * np.pi) * self.sigma * np.exp(-r2 / (2 * self.sigma**2))


def random_blobs(seed: int, count: int = 24, radius: float = 0.55, sigma=(0.04, 0.12), amp=(0.5, 1.0)) -> list[Blob]:
    rng = np.random.default_rng(seed)
    blobs = []
    while len(blobs) < count:
        c = rng.uniform(-radius, radius, size=3)
        if np.linalg.norm(c) > radius:
            continue
        blobs.append(Blob(tuple(c), float(rng.uniform(*sigma)), float(rng.uniform(*amp))))
    return blobs


def blob_volume(n: int, blobs) -> np.ndarray:
    zz, yy, xx = _lattice(n)
    vol = np.zeros((n, n, n))
    for b in blobs:
        r2 = (xx - b.center[0]) ** 2 + (yy - b.center[1]) ** 2 + (zz - b.center[2]) ** 2
        vol += b.amplitude * np.exp(-r2 / (2 * b.sigma**2))
    return vol


def shepp_logan_3d(n: int, scale: float = 0.9) -> np.ndarray:
    zz, yy, xx = _lattice(n)
    vol = np.zeros((n, n, n))
    for a, b, c, x0, y0, z0, phi, val in _SHEPP_LOGAN:
        a, b, c, x0, y0, z0 = (v * scale for v in (a, b, c, x0, y0, z0))
        p = np.deg2rad(phi)
        dx, dy = xx - x0, yy - y0
        u = dx * np.cos(p) + dy * np.sin(p)
        v = -dx * np.sin(p) + dy * np.cos(p)
        inside = (u / a) ** 2 + (v / b) ** 2 + ((zz - z0) / c) ** 2 <= 1.0
        vol[inside] += val
    return np.clip(vol, 0.0, None)


def _support_mask(n: int, radius: float = SUPPORT_RADIUS) -> np.ndarray:
    zz, yy, xx = _lattice(n)
    return (xx**2 + yy**2 + zz**2) <= radius**2


def generate_phantom(n: int, kind: str = "gaussian-blobs", seed: int = 0, path=None, **kwargs) -> VolumeGrid:
    """Nonnegative density supported in a ball of radius 0.88 (inside [-0.9, 0.9]^3)."""
    if kind == "gaussian-blobs":
        vol = blob_volume(n, random_blobs(seed, **kwargs))
    elif kind == "shepp-logan-3d":
        vol = shepp_logan_3d(n)
    elif kind == "from-mrc":
        from .io import read_mrc

        if path is None:
            raise FileNotFoundError("from-mrc phantom needs a path")
        data = read_mrc(path)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise ValueError(f"{path}: expected a cubic volume, got shape {data.shape}")
        if data.shape[0] != n:
            data = zoom(data, n / data.shape[0], order=1)
        data = data - data.min()
        peak = data.max()
        vol = data / peak if peak > 0 else data
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    return VolumeGrid(np.where(_support_mask(n), vol, 0.0))


@dataclass(frozen=True)
class NoiseModel:
    snr_db: float = 0.0  # inf: no noise
    seed: int = 0
    scope: str = "per-image"

    def __post_init__(self):
        if self.scope not in ("per-image", "global"):
            raise ValueError("noise scope must be 'per-image' or 'global'")
        if np.isnan(self.snr_db):
            raise ValueError("snr_db must not be NaN")


@dataclass
class TiltSeries:
    images: np.ndarray
    geometry: TiltGeometry
    clean: np.ndarray | None = None            # P(R_theta rho)
    deformed_clean: np.ndarray | None = None   # D_m(P(R_theta rho))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.shape != (self.geometry.m, self.geometry.n, self.geometry.n):
            raise ValueError(f"images {self.images.shape} do not match geometry (M={self.geometry.m}, N={self.geometry.n})")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("tilt series has non-finite values")


def add_noise_to_snr(images, snr_db: float, seed: int = 0, scope: str = "per-image") -> np.ndarray:
    """Add zero-mean Gaussian noise with variance Var(image) * 10^(-snr_db / 10).

    Per-image scope calibrates each image separately with its own RNG stream
    derived from (seed, m); ``snr_db = inf`` returns the input unchanged.
    """
    images = np.asarray(images, dtype=np.float64)
    if np.isinf(snr_db) and snr_db > 0:
        return images.copy()
    ratio = 10.0 ** (-snr_db / 10.0)
    stack = images.reshape((-1,) + images.shape[-2:])
    out = np.empty_like(stack)
    global_var = stack.var()
    for m, img in enumerate(stack):
        var = img.var() if scope == "per-image" else global_var
        if var == 0:
            raise ValueError(f"image {m} has zero variance; SNR is undefined")
        rng = np.random.default_rng([seed, m])
        out[m] = img + rng.normal(0.0, np.sqrt(var * ratio), size=img.shape)
    return out.reshape(images.shape)


def synthesize_tilt_series(vol: VolumeGrid, geom: TiltGeometry, deformations: GroundTruthDeformations,
                           noise: NoiseModel, metadata: dict | None = None) -> TiltSeries:
    """y_m = D_m(P(R_theta_m rho)) + noise, keeping both clean intermediates."""
    if deformations.m != geom.m:
        raise ValueError(f"{deformations.m} deformations for {geom.m} tilts")
    if deformations.n != geom.n:
        raise ValueError("deformation fields do not match the detector size")
    clean = project_series(vol, geom)
    deformed = np.stack([bilinear_sample(clean[m], deformations.warp_grid(m)) for m in range(geom.m)])
    noisy = add_noise_to_snr(deformed, noise.snr_db, noise.seed, noise.scope)
    meta = {"noise": {"snr_db": noise.snr_db, "seed": noise.seed, "scope": noise.scope},
            "deformation": dict(deformations.config)}
    meta.update(metadata or {})
    return TiltSeries(noisy, geom, clean, deformed, meta)
