"""Per-tilt image deformations as coordinate pull-backs.

A deformed image at detector point x is the undeformed image sampled at

    w(x) = R_{-alpha}(x + l(x) + tau)

with ``l`` a local displacement (a small network per tilt when estimating, a
dense smooth random field when simulating), ``tau`` a 2D shift and ``alpha``
an in-plane rotation. Coordinates are normalized; one pixel is 2/N.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from . import diff_core as dc
from .diff_core import ParamBlock
from .geometry import pixel_grid, voxel_centers
from .neural_field import WarpNetSpec, init_weights, mlp_eval


def rotate_2d(v, alpha_deg):
    """Apply R_{-alpha} to points (..., 2)."""
    v = np.asarray(v, dtype=np.float64)
    a = np.deg2rad(alpha_deg)
    c, s = np.cos(a), np.sin(a)
    out = np.empty(np.broadcast_shapes(v.shape, np.shape(c) + (2,)))
    out[..., 0] = c * v[..., 0] + s * v[..., 1]
    out[..., 1] = -s * v[..., 0] + c * v[..., 1]
    return out


@dataclass(frozen=True)
class GlobalDeformParams:
    alpha_deg: float = 0.0
    tau: tuple[float, float] = (0.0, 0.0)


@dataclass
class DeformationParams:
    """Estimated per-tilt parameters: alpha (radians), tau (normalized), local warp net weights."""

    spec: WarpNetSpec
    alpha: list[ParamBlock]
    tau: list[ParamBlock]
    gamma: list[list[ParamBlock]]

    @classmethod
    def identity(cls, m: int, spec: WarpNetSpec | None = None, seed: int = 0) -> "DeformationParams":
        spec = spec or WarpNetSpec.create(seed=seed)
        alpha = [ParamBlock.from_array(np.zeros(1), f"alpha[{i}]") for i in range(m)]
        tau = [ParamBlock.from_array(np.zeros(2), f"tau[{i}]") for i in range(m)]
        gamma = [init_weights(spec.arch, seed + 1 + i, "zero-last-layer", prefix=f"gamma[{i}].") for i in range(m)]
        return cls(spec, alpha, tau, gamma)

    @property
    def m(self) -> int:
        return len(self.alpha)

    @property
    def alpha_deg(self) -> np.ndarray:
        return np.rad2deg(np.array([a.values[0] for a in self.alpha]))

    @property
    def tau_array(self) -> np.ndarray:
        return np.array([t.values for t in self.tau])

    def with_globals(self, alpha_deg, tau) -> "DeformationParams":
        alpha = [a.replace(np.deg2rad([v])) for a, v in zip(self.alpha, np.asarray(alpha_deg, dtype=float))]
        tau_blocks = [t.replace(v) for t, v in zip(self.tau, np.asarray(tau, dtype=float))]
        return DeformationParams(self.spec, alpha, tau_blocks, [list(g) for g in self.gamma])

    def local_displacement(self, m: int, xy) -> np.ndarray:
        """l_gamma(x) in normalized units for points (..., 2), gauge-centered when ``spec.anchor_grid`` is set."""
        xy = np.asarray(xy, dtype=np.float64)
        raw = mlp_eval(self.spec.arch, self.gamma[m], self.spec.features(xy))
        if not self.spec.anchor_grid:
            return raw
        ra = mlp_eval(self.spec.arch, self.gamma[m], self.spec.features(self.spec.anchors()))
        mx, my, omega = ra.reshape(-1) @ self.spec.gauge_matrix()
        out = np.empty_like(raw)
        out[..., 0] = raw[..., 0] - mx + omega * xy[..., 1]
        out[..., 1] = raw[..., 1] - my - omega * xy[..., 0]
        return out


def warp_coords(phi: DeformationParams, m: int, x) -> np.ndarray:
    """w_phi(x) = R_{-alpha}(x + l_gamma(x) + tau) for tilt ``m`` and points (..., 2)."""
    x = np.asarray(x, dtype=np.float64)
    v = x + phi.local_displacement(m, x) + phi.tau[m].values
    return rotate_2d(v, phi.alpha_deg[m])


def tilt_groups(tilt: np.ndarray) -> list[tuple[int, int, int]]:
    """Contiguous (m, lo, hi) runs of a sorted tilt-index array."""
    tilt = np.asarray(tilt)
    if tilt.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(tilt)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [tilt.size]])
    return [(int(tilt[lo]), int(lo), int(hi)) for lo, hi in zip(starts, stops)]


def stacked_gamma(phi: DeformationParams) -> list[np.ndarray]:
    """Per-layer arrays with a leading tilt axis."""
    return [np.stack([g[k].array for g in phi.gamma]) for k in range(len(phi.gamma[0]))]


def _grouped_net(spec: WarpNetSpec, feats: np.ndarray, gamma, groups):
    h = feats
    for k in range(spec.arch.depth):
        h = dc.grouped_affine(h, gamma[2 * k], gamma[2 * k + 1], groups)
        if k < spec.arch.depth - 1:
            h = dc.relu(h)
    return h


def warp_batch(x, tilt, spec: WarpNetSpec, alpha, tau, gamma, local_fields=None):
    """Differentiable warp of detector points ``x`` (B, 2) sorted by ``tilt`` (B,).

    ``alpha`` (M,), ``tau`` (M, 2) and each entry of ``gamma`` (M, ...) may be
    tape Tensors. When ``local_fields`` (B, 2 normalized) is given it replaces
    the networks (used to freeze in known displacements).
    """
    x = np.asarray(x, dtype=np.float64)
    if local_fields is not None:
        v = dc.add(x + local_fields, dc.gather_rows(tau, tilt))
    else:
        groups = tilt_groups(tilt)
        h = _grouped_net(spec, spec.features(x), gamma, groups)
        if spec.anchor_grid:
            a = spec.anchors()
            p = a.shape[0]
            anchor_groups = [(m, k * p, (k + 1) * p) for k, (m, _, _) in enumerate(groups)]
            ha = _grouped_net(spec, np.tile(spec.features(a), (len(groups), 1)), gamma, anchor_groups)
            coef = dc.matmul(ha.reshape(len(groups), 2 * p), spec.gauge_matrix())  # (T, 3)
            which = np.repeat(np.arange(len(groups)), [hi - lo for _, lo, hi in groups])
            rows = dc.gather_rows(coef, which)
            jx = np.stack([-x[:, 1], x[:, 0]], axis=1)
            h = h - rows[:, :2] - rows[:, 2:3] * jx
        v = dc.add(dc.add(x, h), dc.gather_rows(tau, tilt))
    return dc.rotate2d(v, dc.gather_rows(alpha, tilt))


# --- image resampling -------------------------------------------------------

def bilinear_sample(img: np.ndarray, pts) -> np.ndarray:
    """Sample image [y, x] at normalized points (..., 2) = (x, y); zero outside [-1, 1]^2."""
    img = np.asarray(img, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    n = img.shape[0]
    idx = (pts + 1.0) * (n / 2.0) - 0.5
    # grid-aligned points must reproduce pixel values exactly
    snapped = np.round(idx)
    idx = np.where(np.abs(idx - snapped) < 1e-9, snapped, idx)
    base = np.floor(idx)
    frac = idx - base
    base = base.astype(np.intp)
    inside = np.all(np.abs(pts) <= 1.0, axis=-1)
    out = np.zeros(pts.shape[:-1])
    for dy in (0, 1):
        iy = base[..., 1] + dy
        wy = frac[..., 1] if dy else 1.0 - frac[..., 1]
        for dx in (0, 1):
            ix = base[..., 0] + dx
            wx = frac[..., 0] if dx else 1.0 - frac[..., 0]
            valid = inside & (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
            w = wy * wx
            vals = img[np.clip(iy, 0, n - 1), np.clip(ix, 0, n - 1)]
            out += np.where(valid & (w != 0), w * vals, 0.0)
    return out


def deform_image(image, warp, n: int | None = None) -> np.ndarray:
    """Deformed image: output at pixel x equals ``image`` sampled at ``warp(x)``.

    ``image`` is an array (bilinear, zero padded) or a callable sampler on
    points (..., 2). ``warp`` is a callable on (n, n, 2) coordinates or a
    precomputed (n, n, 2) array of warped coordinates.
    """
    if n is None:
        n = np.asarray(image).shape[0] if not callable(image) else np.shape(warp)[0]
    grid = pixel_grid(n)
    w = warp(grid) if callable(warp) else np.asarray(warp, dtype=np.float64)
    if callable(image):
        return np.asarray(image(w))
    return bilinear_sample(image, w)


# --- ground-truth deformations ---------------------------------------------

@dataclass(frozen=True)
class ElasticFieldConfig:
    grid: int = 5
    sigma: float | None = None  # pixels; None -> n / 8
    amax: float = 3.0           # pixels
    seed: int = 0

    def __post_init__(self):
        if self.grid < 2:
            raise ValueError("control grid must be at least 2x2")
        if self.amax < 0:
            raise ValueError("amax must be >= 0")


def sample_elastic_field(cfg: ElasticFieldConfig, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Smooth random displacement field (n, n, 2) in pixels, max vector norm = ``cfg.amax``.

    Gaussian control-point displacements on a g x g grid spanning the image,
    Gaussian smoothing (sigma in pixels, converted to control-grid units),
    then bilinear upsampling.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    g = cfg.grid
    ctrl = rng.normal(size=(2, g, g))
    if cfg.amax == 0:
        return np.zeros((n, n, 2))
    sigma_px = n / 8.0 if cfg.sigma is None else cfg.sigma
    spacing = n / (g - 1)
    ctrl = np.stack([gaussian_filter(c, sigma_px / spacing, mode="nearest") for c in ctrl])
    pos = (voxel_centers(n) + 1.0) / 2.0 * (g - 1)
    yy, xx = np.meshgrid(pos, pos, indexing="ij")
    dense = np.stack([map_coordinates(c, [yy, xx], order=1, mode="nearest") for c in ctrl], axis=-1)
    peak = np.max(np.linalg.norm(dense, axis=-1))
    if peak == 0:
        return np.zeros((n, n, 2))
    return dense * (cfg.amax / peak)


def jacobian_sup_norm(fld: np.ndarray) -> float:
    """max over pixels and components of |d l_i / d x_j| (pixels per pixel)."""
    grads = [np.gradient(fld[..., i], axis=a) for i in range(2) for a in range(2)]
    return float(max(np.max(np.abs(g)) for g in grads))


@dataclass
class GroundTruthDeformations:
    """Simulated per-tilt deformations: alpha (degrees), tau (normalized), dense fields (pixels)."""

    alpha_deg: np.ndarray
    tau: np.ndarray
    fields: np.ndarray
    config: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, m: int, n: int) -> "GroundTruthDeformations":
        return cls(np.zeros(m), np.zeros((m, 2)), np.zeros((m, n, n, 2)))

    @property
    def m(self) -> int:
        return self.alpha_deg.size

    @property
    def n(self) -> int:
        return self.fields.shape[1]

    def local_normalized(self, m: int) -> np.ndarray:
        return self.fields[m] * (2.0 / self.n)

    def warp_grid(self, m: int) -> np.ndarray:
        """w(x) at every pixel center, (n, n, 2)."""
        v = pixel_grid(self.n) + self.local_normalized(m) + self.tau[m]
        return rotate_2d(v, self.alpha_deg[m])


def sample_random_deformations(m: int, n: int, cfg: ElasticFieldConfig | None = None, seed: int = 0,
                               max_shift_frac: float = 0.1, max_rot_deg: float = 10.0) -> GroundTruthDeformations:
    """Independent per-tilt deformations: elastic field, shift within +-max_shift_frac of the
    image size per axis, in-plane rotation within +-max_rot_deg."""
    if m < 1:
        raise ValueError("need at least one tilt")
    cfg = cfg or ElasticFieldConfig()
    alpha = np.empty(m)
    tau = np.empty((m, 2))
    fields = np.empty((m, n, n, 2))
    for i in range(m):
        rng = np.random.default_rng([seed, i])
        fields[i] = sample_elastic_field(cfg, n, rng)
        tau[i] = rng.uniform(-2.0 * max_shift_frac, 2.0 * max_shift_frac, size=2)
        alpha[i] = rng.uniform(-max_rot_deg, max_rot_deg)
    meta = {"grid": cfg.grid, "sigma": cfg.sigma, "amax": cfg.amax, "seed": seed,
            "max_shift_frac": max_shift_frac, "max_rot_deg": max_rot_deg}
    return GroundTruthDeformations(alpha, tau, fields, meta)


__all__ = [
    "DeformationParams", "ElasticFieldConfig", "GlobalDeformParams", "GroundTruthDeformations",
    "bilinear_sample", "deform_image", "jacobian_sup_norm", "rotate_2d", "sample_elastic_field",
    "sample_random_deformations", "stacked_gamma", "tilt_groups", "warp_batch", "warp_coords",
]
