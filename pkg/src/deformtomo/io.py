"""Files: MRC2014 volumes and stacks, binary dumps, run bundles, CSV reports, PNG slices."""
from __future__ import annotations

import csv
import io as _io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .deformation import DeformationParams, GroundTruthDeformations
from .diff_core import ParamBlock
from .geometry import TiltGeometry
from .neural_field import FourierEncoding, WarpNetSpec, read_blob, write_blob
from .simulator import TiltSeries

HEADER_BYTES = 1024


class MrcError(ValueError):
    pass


class MrcFormatError(MrcError):
    pass


class MrcModeError(MrcError):
    pass


class MrcTruncatedError(MrcError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# --- MRC2014 ------------------------------------------------------------------

def mrc_header(shape_zyx, data: np.ndarray, voxel_size: float = 1.0, is_stack: bool = False,
               byteorder: str = "<") -> bytes:
    nz, ny, nx = shape_zyx
    h = bytearray(HEADER_BYTES)
    e = byteorder
    struct.pack_into(e + "3i", h, 0, nx, ny, nz)
    struct.pack_into(e + "i", h, 12, 2)
    struct.pack_into(e + "3i", h, 28, nx, ny, nz)
    struct.pack_into(e + "3f", h, 40, nx * voxel_size, ny * voxel_size, nz * voxel_size)
    struct.pack_into(e + "3f", h, 52, 90.0, 90.0, 90.0)
    struct.pack_into(e + "3i", h, 64, 1, 2, 3)
    struct.pack_into(e + "3f", h, 76, float(data.min()), float(data.max()), float(data.mean(dtype=np.float64)))
    struct.pack_into(e + "i", h, 88, 0 if is_stack else 1)
    struct.pack_into(e + "i", h, 108, 20140)
    h[208:212] = b"MAP "
    h[212:216] = b"\x44\x44\x00\x00" if e == "<" else b"\x11\x11\x00\x00"
    struct.pack_into(e + "f", h, 216, float(data.std(dtype=np.float64)))
    struct.pack_into(e + "i", h, 220, 1)
    label = b"deformtomo".ljust(80)
    h[224:304] = label
    return bytes(h)


def write_mrc(data, path, voxel_size: float = 1.0, is_stack: bool | None = None, byteorder: str = "<") -> None:
    """Mode-2 MRC: 1024-byte header then 32-bit reals, x fastest, z slowest."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError("MRC data must be 2D or 3D")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite data")
    arr32 = np.ascontiguousarray(arr, dtype=byteorder + "f4")
    if is_stack is None:
        is_stack = len(set(arr.shape)) != 1
    header = mrc_header(arr.shape, arr32.astype(np.float64), voxel_size, is_stack, byteorder)
    atomic_write_bytes(path, header + arr32.tobytes())


def read_mrc_header(raw: bytes) -> dict:
    if len(raw) < HEADER_BYTES:
        raise MrcTruncatedError(f"header needs {HEADER_BYTES} bytes, file has {len(raw)}")
    if raw[208:212] != b"MAP ":
        raise MrcFormatError(f"bad map stamp {raw[208:212]!r}")
    stamp = raw[212]
    if stamp == 0x44:
        e = "<"
    elif stamp == 0x11:
        e = ">"
    else:
        nx_le = struct.unpack_from("<i", raw, 0)[0]
        e = "<" if 0 < nx_le < 1 << 16 else ">"
    nx, ny, nz, mode = struct.unpack_from(e + "4i", raw, 0)
    if min(nx, ny, nz) <= 0:
        raise MrcFormatError(f"non-positive dimensions {(nx, ny, nz)}")
    dmin, dmax, dmean = struct.unpack_from(e + "3f", raw, 76)
    (nsymbt,) = struct.unpack_from(e + "i", raw, 92)
    return {"nx": nx, "ny": ny, "nz": nz, "mode": mode, "byteorder": e, "nsymbt": nsymbt,
            "dmin": dmin, "dmax": dmax, "dmean": dmean, "cella": struct.unpack_from(e + "3f", raw, 40)}


def read_mrc(path, with_header: bool = False):
    raw = Path(path).read_bytes()
    hdr = read_mrc_header(raw)
    if hdr["mode"] != 2:
        raise MrcModeError(f"{path}: unsupported MRC mode {hdr['mode']} (only mode 2, 32-bit real)")
    offset = HEADER_BYTES + max(hdr["nsymbt"], 0)
    count = hdr["nx"] * hdr["ny"] * hdr["nz"]
    expected = offset + 4 * count
    if len(raw) < expected:
        raise MrcTruncatedError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=hdr["byteorder"] + "f4", count=count, offset=offset)
    data = data.astype(np.float64).reshape(hdr["nz"], hdr["ny"], hdr["nx"])
    return (data, hdr) if with_header else data


# --- binary dumps -------------------------------------------------------------

_GT_MAGIC = b"DTGT"
_DEFORM_MAGIC = b"DTDP"


def write_ground_truth(path, gt: GroundTruthDeformations) -> None:
    """Per tilt: alpha (deg), tau_x, tau_y (normalized), then the N x N x 2 field (pixels)."""
    header = {"kind": "ground-truth-deformations", "m": gt.m, "n": gt.n, "config": gt.config,
              "layout": "per tilt: alpha_deg, tau_x, tau_y, field[y, x, (dx, dy)] in pixels"}
    per_tilt = [np.concatenate([[gt.alpha_deg[i]], gt.tau[i], gt.fields[i].ravel()]) for i in range(gt.m)]
    write_blob(path, _GT_MAGIC, header, per_tilt)


def read_ground_truth(path) -> GroundTruthDeformations:
    header, payload = read_blob(path, _GT_MAGIC)
    m, n = header["m"], header["n"]
    rows = payload.reshape(m, 3 + n * n * 2)
    return GroundTruthDeformations(rows[:, 0].copy(), rows[:, 1:3].copy(), rows[:, 3:].reshape(m, n, n, 2).copy(),
                                   header.get("config", {}))


def save_deformations(path, d: DeformationParams) -> None:
    arch = d.spec.arch
    header = {"kind": "deformation-params", "m": d.m, "warp_k": d.spec.encoding.K,
              "warp_sigma": d.spec.encoding.scale, "width": d.spec.width, "depth": d.spec.depth,
              "anchor_grid": d.spec.anchor_grid,
              "gamma_shapes": [list(g.shape) for g in d.gamma[0]], "gamma_tags": [g.tag.split(".", 1)[1] for g in d.gamma[0]],
              "input_dim": arch.input_dim}
    arrays = [d.spec.encoding.B]
    for i in range(d.m):
        arrays += [d.alpha[i].values, d.tau[i].values] + [g.values for g in d.gamma[i]]
    write_blob(path, _DEFORM_MAGIC, header, arrays)


def load_deformations(path) -> DeformationParams:
    header, payload = read_blob(path, _DEFORM_MAGIC)
    k = header["warp_k"]
    B = payload[:2 * k].reshape(k, 2)
    spec = WarpNetSpec(FourierEncoding(B, header["warp_sigma"]), header["width"], header["depth"],
                       header["anchor_grid"])
    off = 2 * k
    alpha, tau, gamma = [], [], []
    for i in range(header["m"]):
        alpha.append(ParamBlock(payload[off:off + 1].copy(), (1,), f"alpha[{i}]"))
        tau.append(ParamBlock(payload[off + 1:off + 3].copy(), (2,), f"tau[{i}]"))
        off += 3
        blocks = []
        for tag, shape in zip(header["gamma_tags"], header["gamma_shapes"]):
            size = int(np.prod(shape))
            blocks.append(ParamBlock(payload[off:off + size].copy(), tuple(shape), f"gamma[{i}].{tag}"))
            off += size
        gamma.append(blocks)
    if off != payload.size:
        raise ValueError(f"{path}: {payload.size - off} unexpected trailing values")
    return DeformationParams(spec, alpha, tau, gamma)


# --- bundles ------------------------------------------------------------------

def write_bundle(directory, series: TiltSeries, truth_volume: np.ndarray, gt: GroundTruthDeformations,
                 config_text: str | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_mrc(series.images, d / "tilts.mrc", is_stack=True)
    if series.clean is not None:
        write_mrc(series.clean, d / "clean.mrc", is_stack=True)
    if series.deformed_clean is not None:
        write_mrc(series.deformed_clean, d / "deformed_clean.mrc", is_stack=True)
    write_mrc(truth_volume, d / "volume_true.mrc")
    write_ground_truth(d / "deformations.gt", gt)
    meta = {"angles_deg": [float(a) for a in series.geometry.angles], "n": series.geometry.n,
            "samples": series.geometry.samples, "metadata": series.metadata}
    atomic_write_text(d / "meta.json", json.dumps(meta, indent=2, sort_keys=True, default=_json_default))
    if config_text is not None:
        atomic_write_text(d / "config.ini", config_text)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def read_bundle(directory):
    """Returns (TiltSeries, true volume array, ground-truth deformations)."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    geom = TiltGeometry(np.array(meta["angles_deg"]), meta["n"], meta["samples"])
    clean = read_mrc(d / "clean.mrc") if (d / "clean.mrc").exists() else None
    deformed = read_mrc(d / "deformed_clean.mrc") if (d / "deformed_clean.mrc").exists() else None
    series = TiltSeries(read_mrc(d / "tilts.mrc"), geom, clean, deformed, meta.get("metadata", {}))
    return series, read_mrc(d / "volume_true.mrc"), read_ground_truth(d / "deformations.gt")


# --- reports ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def to_uint8(img) -> np.ndarray:
    """Linear map of [min, max] onto [0, 255]."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_png(img, path) -> None:
    from PIL import Image

    buf = _io.BytesIO()
    Image.fromarray(to_uint8(img), mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_report(directory, reports, curves: dict, slices: dict | None = None, panels: dict | None = None) -> None:
    """table1.csv, fsc.csv and PNG images of slices and projection panels."""
    from .metrics import TABLE1_COLUMNS

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_text(d / "table1.csv", csv_text(TABLE1_COLUMNS, [r.row() for r in reports]))
    rows = []
    for method, curve in curves.items():
        for i, (f, c) in enumerate(zip(curve.frequency, curve.correlation)):
            rows.append([method, str(i), f, c])
    atomic_write_text(d / "fsc.csv", csv_text(("method", "shell", "frequency", "correlation"), rows))
    for name, img in (slices or {}).items():
        write_png(img, d / f"slice_{name}.png")
    for name, img in (panels or {}).items():
        write_png(img, d / f"panel_{name}.png")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
