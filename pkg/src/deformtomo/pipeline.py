"""Pipeline stages over a run bundle directory: simulate, reconstruct, fbp, evaluate."""
from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig
from .deformation import ElasticFieldConfig, GroundTruthDeformations, sample_random_deformations
from .fbp import FilterSpec, fbp_reconstruct
from .geometry import TiltGeometry, project_series
from .metrics import (FSCCurve, MetricsReport, deformation_errors, fsc, mean_image_snr, register_volumes,
                      resolution_at_threshold, variance_ratio_db)
from .neural_field import load_field, save_field
from .reconstruct import TrainingAborted, TrainState, render_projections, train, voxelize
from .simulator import NoiseModel, generate_phantom, synthesize_tilt_series

log = logging.getLogger(__name__)

# method label -> artifact subdirectory of a bundle
METHOD_DIRS = {"EST": "recon-est", "EST-W/O": "recon-est-wo", "FBP": "fbp"}
MODE_LABELS = {"est": "EST", "est-wo": "EST-W/O"}


def _write_config(directory: Path, cfg: RunConfig) -> None:
    io.atomic_write_text(directory / "config.ini", cfg.to_ini())


def simulate(cfg: RunConfig, out) -> Path:
    out = Path(out)
    p, g, d = cfg.phantom, cfg.geometry, cfg.deformation
    vol = generate_phantom(p.n, p.kind, p.seed, path=p.path or None)
    geom = TiltGeometry.uniform(g.m, p.n, g.tilt_min, g.tilt_max, g.samples)
    if d.enabled:
        ecfg = ElasticFieldConfig(d.grid, d.sigma_px or None, d.amax_px, d.seed)
        gt = sample_random_deformations(g.m, p.n, ecfg, d.seed, d.max_shift_frac, d.max_rot_deg)
    else:
        gt = GroundTruthDeformations.identity(g.m, p.n)
    noise = NoiseModel(cfg.noise.snr_db, cfg.noise.seed, cfg.noise.scope)
    series = synthesize_tilt_series(vol, geom, gt, noise, {"phantom": {"kind": p.kind, "seed": p.seed}})
    measured = mean_image_snr(series.images, series.deformed_clean) if np.isfinite(cfg.noise.snr_db) else float("inf")
    series.metadata["measured_snr_db"] = measured
    io.write_bundle(out, series, vol.data, gt, cfg.to_ini())
    log.info("simulated %d tilts at N=%d, measured SNR %.3f dB", g.m, p.n, measured)
    return out


def reconstruct(cfg: RunConfig, bundle, mode: str = "est", out=None) -> Path:
    """Train the neural field (and, for ``est``, deformations) on a bundle's noisy tilts."""
    bundle = Path(bundle)
    label = MODE_LABELS[mode]
    out = Path(out) if out is not None else bundle / METHOD_DIRS[label]
    series, _, _ = io.read_bundle(bundle)
    tcfg = replace(cfg.train, mode=mode)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg.override("train", mode=mode))
    try:
        state = train(tcfg, series.images, series.geometry, model=cfg.model)
    except TrainingAborted as err:
        if err.last_good is not None:
            _save_state(out, err.last_good, series.geometry.n)
        raise
    _save_state(out, state, series.geometry.n)
    return out


def _save_state(out: Path, state: TrainState, n: int) -> None:
    save_field(out / "field.ckpt", state.volume)
    io.save_deformations(out / "deform.ckpt", state.deform)
    io.write_mrc(voxelize(state.volume, n).data, out / "volume.mrc")
    rows = [(str(i), loss, wall) for i, loss, wall in state.trace]
    io.atomic_write_text(out / "loss.csv", io.csv_text(("iteration", "loss", "wall_s"), rows))


def run_fbp(cfg: RunConfig, bundle, out=None) -> Path:
    bundle = Path(bundle)
    out = Path(out) if out is not None else bundle / METHOD_DIRS["FBP"]
    series, _, _ = io.read_bundle(bundle)
    vol = fbp_reconstruct(series.images, series.geometry, FilterSpec(cfg.fbp.kind, cfg.fbp.cutoff))
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg)
    io.write_mrc(vol.data, out / "volume.mrc")
    return out


def evaluate(cfg: RunConfig, bundle, out=None, methods=None) -> tuple[list[MetricsReport], dict[str, FSCCurve]]:
    """Compare every reconstruction found in the bundle against the ground truth."""
    bundle = Path(bundle)
    out = Path(out) if out is not None else bundle / "report"
    series, truth, gt = io.read_bundle(bundle)
    geom = series.geometry
    n = geom.n
    found = [m for m in (methods or METHOD_DIRS) if (bundle / METHOD_DIRS[m] / "volume.mrc").exists()]
    if not found:
        raise FileNotFoundError(f"{bundle}: no reconstructions to evaluate")
    max_shift = None if cfg.metrics.max_shift < 0 else cfg.metrics.max_shift
    reference = series.clean if series.clean is not None else series.deformed_clean
    tilt0 = int(np.argmin(np.abs(geom.angles)))

    reports, curves, extra = [], {}, {}
    slices = {"true": truth[n // 2]}
    panels = {"clean": reference[tilt0], "deformed": series.deformed_clean[tilt0], "observed": series.images[tilt0]}
    for method in found:
        d = bundle / METHOD_DIRS[method]
        vol = io.read_mrc(d / "volume.mrc")
        if method == "FBP":
            proj = project_series(vol, geom)
            row = deformation_errors(gt, None, method, n)
        else:
            state = TrainState(load_field(d / "field.ckpt"), io.load_deformations(d / "deform.ckpt"))
            proj = render_projections(state, geom, with_deformation=False)
            row = deformation_errors(gt, state.deform if method == "EST" else None, method, n)
        row.proj_snr_db = mean_image_snr(proj, reference)
        shift = (0, 0, 0)
        if cfg.metrics.register:
            registered, shift = register_volumes(vol, truth, max_shift)
            vol = registered.data
        curve = fsc(vol, truth)
        reports.append(row)
        curves[method] = curve
        extra[method] = {"registration_shift_xyz": list(shift),
                         "proj_variance_ratio_db": float(np.mean([variance_ratio_db(a, b) for a, b in zip(proj, reference)])),
                         "resolution": resolution_at_threshold(curve, cfg.metrics.fsc_threshold)}
        key = method.lower().replace("/", "")
        slices[key] = vol[n // 2]
        panels[key] = proj[tilt0]

    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg)
    io.write_report(out, reports, curves, slices, panels)
    summary = {"methods": {r.method: {**r.as_dict(), **extra[r.method]} for r in reports},
               "raw": {"shift_px": float(np.mean(np.linalg.norm(gt.tau, axis=1)) * n / 2),
                       "rot_deg": float(np.mean(np.abs(gt.alpha_deg)))},
               "measured_snr_db": series.metadata.get("measured_snr_db"),
               "fsc_threshold": cfg.metrics.fsc_threshold}
    io.atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_num))
    return reports, curves


def _num(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def run_pipeline(cfg: RunConfig, out, modes=("est", "est-wo")) -> tuple[list[MetricsReport], dict[str, FSCCurve]]:
    out = Path(out)
    simulate(cfg, out)
    for mode in modes:
        reconstruct(cfg, out, mode)
    run_fbp(cfg, out)
    return evaluate(cfg, out)


def validate_outputs(directory, names) -> list[str]:
    """Names of expected files that are missing or empty."""
    d = Path(directory)
    return [n for n in names if not (d / n).is_file() or (d / n).stat().st_size == 0]
