"""Joint estimation of the density field and per-tilt deformations from a tilt series.

The objective is the pixel-space mean square error between observed pixels
and line integrals of the neural field along rays through the warped
detector coordinate w_phi(x). Mode ``est`` learns the field and every
deformation; ``est-wo`` keeps deformations at identity and learns only the
field.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diff_core as dc
from .deformation import DeformationParams, tilt_groups, warp_batch, warp_coords
from .diff_core import AdamState, DivergenceError, ParamBlock, Tensor
from .geometry import TiltGeometry, VolumeGrid, pixel_grid, voxel_centers
from .neural_field import TWO_PI, NeuralVolume, WarpNetSpec, mlp_eval

log = logging.getLogger(__name__)

MODES = ("est", "est-wo")
_CHUNK_BYTES = 48 * 2**20


@dataclass(frozen=True)
class ModelConfig:
    ff_k: int = 256
    ff_sigma: float = 8.0
    width: int = 128
    depth: int = 4
    warp_k: int = 16
    warp_sigma: float = 1.0
    warp_width: int = 32
    warp_depth: int = 2
    warp_anchor_grid: int = 8  # 0: no gauge centering of local warps


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_pixels: int = 1024
    tilts_per_batch: int = 0  # 0: pixels drawn uniformly over all (m, x)
    lr_volume: float = 1e-3
    lr_global: float = 1e-3
    lr_local: float = 1e-4
    seed: int = 0
    mode: str = "est"
    samples: int = 0  # 0: geometry default (2N)
    log_every: int = 100
    divergence_factor: float = 1.5
    c2f_iterations: int = 0  # volume frequencies phased in by norm over this many iterations; 0: off

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.iterations < 0 or self.batch_pixels < 1 or self.log_every < 1 or self.c2f_iterations < 0:
            raise ValueError("iteration and batch counts must be positive")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, iteration: int, last_good: "TrainState | None"):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good


@dataclass
class TrainState:
    volume: NeuralVolume
    deform: DeformationParams
    adam: dict = field(default_factory=dict)
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    trace: list = field(default_factory=list)  # (iteration, loss, wall seconds)

    def snapshot(self) -> "TrainState":
        return TrainState(copy.copy(self.volume), copy.copy(self.deform), dict(self.adam), self.iteration,
                          list(self.loss_history), list(self.trace))


def init_state(m: int, model: ModelConfig, seed: int = 0) -> TrainState:
    volume = NeuralVolume.create(model.ff_k, model.ff_sigma, model.width, model.depth, seed=seed)
    spec = WarpNetSpec.create(model.warp_k, model.warp_sigma, model.warp_width, model.warp_depth, seed=seed + 7,
                               anchor_grid=model.warp_anchor_grid)
    return TrainState(volume, DeformationParams.identity(m, spec, seed=seed + 11))


class Renderer:
    """Line integrals of a neural field along parallel rays, differentiable in the field
    weights and in the detector coordinates the rays pass through."""

    def __init__(self, volume: NeuralVolume, geom: TiltGeometry):
        if volume.encoding.dim != 3:
            raise ValueError("volume field must take 3D coordinates")
        self.volume = volume
        self.geom = geom
        B = volume.encoding.B
        th = np.deg2rad(geom.angles)
        self.cos_t, self.sin_t = np.cos(th), np.sin(th)
        # phase(x, t) = 2 pi [wx * u_m + wy * By] + t * d_m
        self.u = B[None, :, 0] * self.cos_t[:, None] + B[None, :, 2] * self.sin_t[:, None]
        self.by = B[:, 1]
        d = TWO_PI * (B[None, :, 2] * self.cos_t[:, None] - B[None, :, 0] * self.sin_t[:, None])
        self.nodes = geom.ray_nodes
        td = self.nodes[None, :, None] * d[:, None, :]
        self.ray_cos, self.ray_sin = np.cos(td), np.sin(td)
        self.band = None  # optional (2K,) feature weights, see band_weights

    @property
    def K(self) -> int:
        return self.by.size

    def ray_mask(self, w: np.ndarray, tilt: np.ndarray) -> np.ndarray:
        """Ray samples inside the unit cube, (B, S)."""
        c, s = self.cos_t[tilt][:, None], self.sin_t[tilt][:, None]
        t = self.nodes[None, :]
        px = w[:, 0:1] * c - t * s
        pz = w[:, 0:1] * s + t * c
        return (np.abs(px) <= 1.0) & (np.abs(pz) <= 1.0) & (np.abs(w[:, 1:2]) <= 1.0)

    def ray_features(self, w, tilt: np.ndarray, groups) -> Tensor:
        """Fourier features of every ray sample, (B, S, 2K), cosines first."""
        w = dc.as_tensor(w)
        wv = w.value
        K = self.K
        a = TWO_PI * (wv[:, 0:1] * self.u[tilt] + wv[:, 1:2] * self.by[None, :])
        ca, sa = np.cos(a), np.sin(a)
        out = np.empty((wv.shape[0], self.nodes.size, 2 * K))
        for m, lo, hi in groups:
            C, S = self.ray_cos[m][None], self.ray_sin[m][None]
            cam, sam = ca[lo:hi, None, :], sa[lo:hi, None, :]
            out[lo:hi, :, :K] = cam * C - sam * S
            out[lo:hi, :, K:] = sam * C + cam * S

        def back(g):
            da = np.empty_like(a)
            for m, lo, hi in groups:
                C, S = self.ray_cos[m], self.ray_sin[m]
                gc, gs = g[lo:hi, :, :K], g[lo:hi, :, K:]
                p_cc = np.einsum("bsk,sk->bk", gc, C)
                p_cs = np.einsum("bsk,sk->bk", gc, S)
                p_sc = np.einsum("bsk,sk->bk", gs, C)
                p_ss = np.einsum("bsk,sk->bk", gs, S)
                da[lo:hi] = -sa[lo:hi] * (p_cc + p_ss) + ca[lo:hi] * (p_sc - p_cs)
            gw = np.stack([TWO_PI * np.einsum("bk,bk->b", da, self.u[tilt]),
                           TWO_PI * (da @ self.by)], axis=1)
            return (gw,)

        return dc.node(out, (w,), back)

    def render(self, weights, w, tilt: np.ndarray, groups=None) -> Tensor:
        """Projection values at warped detector points ``w`` (B, 2) of tilts ``tilt`` (sorted)."""
        if groups is None:
            groups = tilt_groups(tilt)
        w = dc.as_tensor(w)
        feats = self.ray_features(w, tilt, groups)
        if self.band is not None:
            feats = dc.mul(feats, self.band)
        b, s = feats.shape[0], feats.shape[1]
        dens = mlp_eval(self.volume.arch, weights, feats.reshape(b * s, 2 * self.K))
        mask = self.ray_mask(w.value, tilt).reshape(b * s, 1)
        dens = dc.mul(dc.as_tensor(dens), mask * self.geom.dt)
        return dens.reshape(b, s).sum(axis=1)

    def render_array(self, w: np.ndarray, tilt: np.ndarray, weights=None) -> np.ndarray:
        """No-gradient rendering in memory-bounded chunks; ``tilt`` need not be sorted."""
        weights = self.volume.weights if weights is None else weights
        w = np.asarray(w, dtype=np.float64).reshape(-1, 2)
        tilt = np.broadcast_to(np.asarray(tilt), (w.shape[0],))
        order = np.argsort(tilt, kind="stable")
        per_pixel = 8 * self.nodes.size * (2 * self.K + 2 * self.volume.arch.hidden_width)
        chunk = max(1, _CHUNK_BYTES // per_pixel)
        out = np.empty(w.shape[0])
        for start in range(0, w.shape[0], chunk):
            idx = order[start:start + chunk]
            t = tilt[idx]
            out[idx] = self.render(weights, w[idx], t, tilt_groups(t)).value
        return out


def band_weights(B: np.ndarray, progress: float, width: float = 0.25) -> np.ndarray | None:
    """Coarse-to-fine feature weights, (2K,), for ``progress`` in [0, 1].

    A frequency whose norm is a fraction z of the largest norm is off until
    progress reaches z / (1 + width), then ramps in with a raised cosine; every
    weight is 1 at progress 1, where None is returned.
    """
    if progress >= 1.0:
        return None
    norm = np.linalg.norm(B, axis=1)
    z = norm / norm.max()
    ramp = np.clip((progress * (1.0 + width) - z) / width, 0.0, 1.0)
    w = 0.5 * (1.0 - np.cos(np.pi * ramp))
    return np.concatenate([w, w])


@dataclass
class Batch:
    tilt: np.ndarray    # (B,) sorted
    iy: np.ndarray
    ix: np.ndarray
    xy: np.ndarray      # (B, 2) detector coordinates


def sample_batch(rng: np.random.Generator, m: int, n: int, size: int, tilts_per_batch: int = 0) -> Batch:
    if tilts_per_batch and tilts_per_batch < m:
        tilts = np.sort(rng.choice(m, tilts_per_batch, replace=False))
        flat = np.sort(tilts[rng.integers(0, tilts_per_batch, size)] * n * n + rng.integers(0, n * n, size))
    else:
        flat = np.sort(rng.integers(0, m * n * n, size))
    tilt, rem = np.divmod(flat, n * n)
    iy, ix = np.divmod(rem, n)
    c = voxel_centers(n)
    return Batch(tilt, iy, ix, np.stack([c[ix], c[iy]], axis=1))


def make_batch(tilt, iy, ix, n: int) -> Batch:
    tilt, iy, ix = (np.asarray(a, dtype=np.intp) for a in (tilt, iy, ix))
    order = np.argsort(tilt, kind="stable")
    tilt, iy, ix = tilt[order], iy[order], ix[order]
    c = voxel_centers(n)
    return Batch(tilt, iy, ix, np.stack([c[ix], c[iy]], axis=1))


def _batch_problem(state: TrainState, renderer: Renderer, batch: Batch, observations: np.ndarray,
                   mode: str, local_fields=None):
    """Closure and parameter list for one minibatch of the pixel objective."""
    m_total = state.deform.m
    if batch.tilt.size == 0:
        raise ValueError("empty batch")
    if batch.tilt.min() < 0 or batch.tilt.max() >= m_total:
        raise IndexError(f"tilt index outside [0, {m_total})")
    y = observations[batch.tilt, batch.iy, batch.ix]
    psi = list(state.volume.weights)
    params = list(psi)
    touched = np.unique(batch.tilt) if mode == "est" else np.empty(0, dtype=int)
    compact = np.searchsorted(touched, batch.tilt)
    d = state.deform
    n_layers = len(d.gamma[0])
    if mode == "est":
        params += [d.alpha[t] for t in touched] + [d.tau[t] for t in touched]
        if local_fields is None:
            params += [g for t in touched for g in d.gamma[t]]
    n_psi, n_t = len(psi), touched.size
    groups = tilt_groups(batch.tilt)

    def closure(*leaves):
        weights = leaves[:n_psi]
        if mode == "est":
            alpha = dc.stack(leaves[n_psi:n_psi + n_t]).reshape(n_t)
            tau = dc.stack(leaves[n_psi + n_t:n_psi + 2 * n_t])
            gamma = None
            lf = None
            if local_fields is None:
                flat = leaves[n_psi + 2 * n_t:]
                gamma = [dc.stack(flat[k::n_layers]) for k in range(n_layers)]
            else:
                lf = local_fields[batch.tilt, batch.iy, batch.ix] * (2.0 / observations.shape[-1])
            w = warp_batch(batch.xy, compact, d.spec, alpha, tau, gamma, local_fields=lf)
        else:
            w = batch.xy
        pred = renderer.render(weights, w, batch.tilt, groups)
        return dc.tmean(dc.square(dc.add(pred, -y)))

    return closure, params


def loss_batch(state: TrainState, batch: Batch, observations, geom: TiltGeometry, mode: str = "est",
               renderer: Renderer | None = None) -> float:
    """Mean squared residual over the batch pixels."""
    renderer = renderer or Renderer(state.volume, geom)
    closure, params = _batch_problem(state, renderer, batch, np.asarray(observations), mode)
    return float(dc.as_tensor(closure(*[Tensor(p.array) for p in params])).value)


def _lr_for(tag: str, cfg: TrainConfig) -> float:
    if tag.startswith("psi."):
        return cfg.lr_volume
    if tag.startswith(("alpha[", "tau[")):
        return cfg.lr_global
    return cfg.lr_local


def train(cfg: TrainConfig, observations, geom: TiltGeometry, state: TrainState | None = None,
          model: ModelConfig | None = None, local_fields=None, callback=None) -> TrainState:
    """Minimize the pixel objective with Adam. Deterministic for a fixed ``cfg.seed``.

    ``local_fields`` (M, N, N, 2; pixels) freezes the local displacements to a
    known dense field instead of learning networks.
    """
    observations = np.asarray(observations, dtype=np.float64)
    if observations.shape != (geom.m, geom.n, geom.n):
        raise ValueError(f"observations {observations.shape} do not match geometry")
    if cfg.samples and cfg.samples != geom.samples:
        geom = TiltGeometry(geom.angles, geom.n, cfg.samples)
    state = state or init_state(geom.m, model or ModelConfig(), seed=cfg.seed)
    if state.deform.m != geom.m:
        raise ValueError("deformation count does not match tilt count")
    rng = np.random.default_rng(cfg.seed)
    vol = state.volume
    deform = state.deform
    adam = dict(state.adam)
    blocks: dict[str, ParamBlock] = {w.tag: w for w in vol.weights}
    for i in range(deform.m):
        blocks[deform.alpha[i].tag] = deform.alpha[i]
        blocks[deform.tau[i].tag] = deform.tau[i]
        for g in deform.gamma[i]:
            blocks[g.tag] = g
    last_good = state.snapshot()
    t0 = time.perf_counter()
    history = list(state.loss_history)
    trace = list(state.trace)
    best_window = np.inf
    start = state.iteration
    renderer = Renderer(vol, geom)

    for it in range(start, start + cfg.iterations):
        batch = sample_batch(rng, geom.m, geom.n, cfg.batch_pixels, cfg.tilts_per_batch)
        if cfg.c2f_iterations:
            renderer.band = band_weights(vol.encoding.B, it / cfg.c2f_iterations)
        cur = TrainState(vol, deform)
        closure, params = _batch_problem(cur, renderer, batch, observations, cfg.mode, local_fields)
        try:
            loss, grads = dc.forward_backward(closure, params, context={"iteration": it})
        except DivergenceError as err:
            raise TrainingAborted(f"non-finite loss at iteration {it}", it, last_good) from err
        for p, g in zip(params, grads):
            st = adam.get(p.tag) or AdamState.fresh(p, lr=_lr_for(p.tag, cfg))
            blocks[p.tag], adam[p.tag] = dc.adam_step(p, g, st)
        vol = NeuralVolume(vol.encoding, vol.arch, [blocks[w.tag] for w in vol.weights], vol.seed)
        if cfg.mode == "est":
            deform = DeformationParams(
                deform.spec,
                [blocks[a.tag] for a in deform.alpha],
                [blocks[t.tag] for t in deform.tau],
                [[blocks[g.tag] for g in gs] for gs in deform.gamma],
            )
        history.append(loss)
        if (it + 1) % cfg.log_every == 0:
            trace.append((it + 1, float(np.mean(history[-cfg.log_every:])), time.perf_counter() - t0))
            window = float(np.mean(history[-100:]))
            if window > cfg.divergence_factor * best_window:
                raise TrainingAborted(
                    f"smoothed loss rose from {best_window:.4g} to {window:.4g} at iteration {it + 1}",
                    it, last_good)
            best_window = min(best_window, window)
            last_good = TrainState(vol, deform, dict(adam), it + 1, list(history), list(trace))
            log.debug("iter %d loss %.5g", it + 1, window)
            if callback is not None:
                callback(last_good)
    return TrainState(vol, deform, adam, start + cfg.iterations, history, trace)


def voxelize(volume: NeuralVolume, n: int) -> VolumeGrid:
    """Field values at the n^3 voxel centers of [-1, 1]^3, indexed [z, y, x]."""
    if n < 2:
        raise ValueError("n must be >= 2")
    c = voxel_centers(n)
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    per_point = 8 * (volume.encoding.out_dim + 2 * volume.arch.hidden_width)
    chunk = max(1, _CHUNK_BYTES // per_point)
    out = np.concatenate([volume(pts[i:i + chunk]) for i in range(0, pts.shape[0], chunk)])
    return VolumeGrid(out.reshape(n, n, n))


def render_projections(state: TrainState, geom: TiltGeometry, with_deformation: bool = True) -> np.ndarray:
    """Full-frame predicted images (M, N, N), optionally through the estimated warps."""
    renderer = Renderer(state.volume, geom)
    grid = pixel_grid(geom.n).reshape(-1, 2)
    images = np.empty((geom.m, geom.n, geom.n))
    for m in range(geom.m):
        w = warp_coords(state.deform, m, grid) if with_deformation else grid
        images[m] = renderer.render_array(w, np.full(grid.shape[0], m)).reshape(geom.n, geom.n)
    return images
