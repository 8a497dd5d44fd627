"""Coordinate networks: Fourier-feature encodings and small dense MLPs.

Used both for the volume density field (R^3 -> R, softplus output) and for
the per-tilt local warp networks (R^2 -> R^2, linear output).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diff_core as dc
from .diff_core import ParamBlock, Tensor

TWO_PI = 2.0 * np.pi
FINAL_ACTIVATIONS = ("linear", "softplus")
INIT_SCHEMES = ("fan-in-uniform", "zero-last-layer")


@dataclass(frozen=True)
class FourierEncoding:
    """Frequencies ``B`` (K x d) in cycles per unit coordinate."""

    B: np.ndarray
    scale: float

    def __post_init__(self):
        B = np.asarray(self.B, dtype=np.float64)
        if B.ndim != 2 or B.shape[0] < 1:
            raise ValueError("B must be a K x d matrix with K >= 1")
        if not np.all(np.isfinite(B)):
            raise ValueError("non-finite frequencies")
        object.__setattr__(self, "B", B)

    @classmethod
    def gaussian(cls, K: int, dim: int, scale: float, seed: int) -> "FourierEncoding":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(K, dim)), scale)

    @property
    def K(self) -> int:
        return self.B.shape[0]

    @property
    def dim(self) -> int:
        return self.B.shape[1]

    @property
    def out_dim(self) -> int:
        return 2 * self.K


def fourier_encode(x, enc: FourierEncoding):
    """``[cos(2 pi B x), sin(2 pi B x)]`` along the last axis, cosines first.

    Accepts a plain array (returns an array) or a tape ``Tensor``.
    """
    if isinstance(x, Tensor):
        phase = dc.matmul(x.reshape(-1, enc.dim), TWO_PI * enc.B.T)
        out = dc.concat([dc.cos(phase), dc.sin(phase)], axis=-1)
        return out.reshape(x.shape[:-1] + (enc.out_dim,))
    x = np.asarray(x, dtype=np.float64)
    phase = TWO_PI * (x @ enc.B.T)
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=-1)


@dataclass(frozen=True)
class MLPArchitecture:
    """Dense ReLU network. ``depth`` counts affine layers, so depth=1 is a single affine map."""

    input_dim: int
    output_dim: int
    hidden_width: int
    depth: int
    final: str = "linear"
    zero_init_last: bool = False

    def __post_init__(self):
        if self.depth < 1 or min(self.input_dim, self.output_dim, self.hidden_width) < 1:
            raise ValueError("depth and widths must be >= 1")
        if self.final not in FINAL_ACTIVATIONS:
            raise ValueError(f"final activation must be one of {FINAL_ACTIVATIONS}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * (self.depth - 1) + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


def init_weights(arch: MLPArchitecture, seed: int, scheme: str | None = None, prefix: str = "") -> list[ParamBlock]:
    """Weights as ``[W0, b0, W1, b1, ...]``; ``W`` is (fan_in, fan_out).

    fan-in-uniform draws W ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)), i.e. variance
    1/fan_in, with zero biases. zero-last-layer does the same and then zeroes
    the final affine map.
    """
    if scheme is None:
        scheme = "zero-last-layer" if arch.zero_init_last else "fan-in-uniform"
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    blocks = []
    shapes = arch.layer_shapes()
    for i, (fan_in, fan_out) in enumerate(shapes):
        bound = np.sqrt(3.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        if scheme == "zero-last-layer" and i == len(shapes) - 1:
            W = np.zeros_like(W)
        blocks.append(ParamBlock.from_array(W, f"{prefix}W{i}"))
        blocks.append(ParamBlock.from_array(b, f"{prefix}b{i}"))
    return blocks


def mlp_eval(arch: MLPArchitecture, weights, z):
    """Feed-forward pass. ``weights`` may be ParamBlocks, arrays, or tape Tensors.

    Returns an array when nothing is on the tape, a ``Tensor`` otherwise.
    """
    ws = [w.array if isinstance(w, ParamBlock) else w for w in weights]
    if len(ws) != 2 * arch.depth:
        raise ValueError(f"expected {2 * arch.depth} weight arrays, got {len(ws)}")
    for (fan_in, fan_out), W in zip(arch.layer_shapes(), ws[::2]):
        if tuple(W.shape) != (fan_in, fan_out):
            raise ValueError(f"layer weight shape {tuple(W.shape)} != {(fan_in, fan_out)}")
    on_tape = isinstance(z, Tensor) or any(isinstance(w, Tensor) for w in ws)
    zshape = z.shape
    if zshape[-1] != arch.input_dim:
        raise ValueError(f"input length {zshape[-1]} != {arch.input_dim}")
    h = z.reshape(-1, arch.input_dim) if on_tape else dc.as_tensor(np.reshape(z, (-1, arch.input_dim)))
    for i in range(arch.depth):
        h = dc.affine(h, ws[2 * i], ws[2 * i + 1])
        if i < arch.depth - 1:
            h = dc.relu(h)
    if arch.final == "softplus":
        h = dc.softplus(h)
    h = h.reshape(tuple(zshape[:-1]) + (arch.output_dim,))
    return h if on_tape else h.value


@dataclass
class NeuralVolume:
    """Density field V(psi): R^3 -> R with Fourier-feature input."""

    encoding: FourierEncoding
    arch: MLPArchitecture
    weights: list[ParamBlock]
    seed: int = 0

    @classmethod
    def create(cls, K: int = 256, scale: float = 8.0, width: int = 128, depth: int = 4, seed: int = 0,
               scheme: str = "fan-in-uniform") -> "NeuralVolume":
        enc = FourierEncoding.gaussian(K, 3, scale, seed)
        arch = MLPArchitecture(2 * K, 1, width, depth, final="softplus", zero_init_last=scheme == "zero-last-layer")
        return cls(enc, arch, init_weights(arch, seed + 1, scheme, prefix="psi."), seed)

    def __call__(self, pts, weights=None):
        """Density at ``pts`` (..., 3); pass tape leaves as ``weights`` to differentiate."""
        w = self.weights if weights is None else weights
        out = mlp_eval(self.arch, w, fourier_encode(pts, self.encoding))
        return out[..., 0] if not isinstance(out, Tensor) else out.reshape(out.shape[:-1])


@dataclass
class WarpNetSpec:
    """Architecture shared by all per-tilt local warp networks: [x, fourier(x)] -> R^2.

    ``anchor_grid`` > 0 removes the mean and the infinitesimal rotation of each
    local field, measured on a fixed anchor_grid x anchor_grid lattice, so that
    shifts and rotations are carried by the global parameters only.
    """

    encoding: FourierEncoding
    arch: MLPArchitecture = field(init=False)
    width: int = 32
    depth: int = 2
    anchor_grid: int = 8

    def __post_init__(self):
        self.arch = MLPArchitecture(2 + self.encoding.out_dim, 2, self.width, self.depth, "linear", True)
        if self.anchor_grid < 0 or self.anchor_grid == 1:
            raise ValueError("anchor_grid must be 0 (off) or >= 2")

    @classmethod
    def create(cls, K: int = 16, scale: float = 1.0, width: int = 32, depth: int = 2, seed: int = 0,
               anchor_grid: int = 8) -> "WarpNetSpec":
        return cls(FourierEncoding.gaussian(K, 2, scale, seed), width, depth, anchor_grid)

    def features(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return np.concatenate([xy, fourier_encode(xy, self.encoding)], axis=-1)

    def anchors(self) -> np.ndarray:
        """Anchor points (G*G, 2), symmetric about the detector center."""
        c = (2.0 * np.arange(self.anchor_grid) + 1.0) / self.anchor_grid - 1.0
        yy, xx = np.meshgrid(c, c, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=-1)

    def gauge_matrix(self) -> np.ndarray:
        """(2P, 3) map from flattened anchor displacements to (mean x, mean y, rotation rate)."""
        a = self.anchors()
        p = a.shape[0]
        c = np.zeros((2 * p, 3))
        c[0::2, 0] = 1.0 / p
        c[1::2, 1] = 1.0 / p
        c[:, 2] = np.stack([-a[:, 1], a[:, 0]], axis=1).ravel() / np.sum(a * a)
        return c


# --- checkpoint format ------------------------------------------------------
# magic(4) | header length uint32 LE | JSON header | float64 LE payload

_FIELD_MAGIC = b"DTNF"


def write_blob(path, magic: bytes, header: dict, arrays) -> None:
    from .io import atomic_write_bytes

    head = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    atomic_write_bytes(path, magic + struct.pack("<I", len(head)) + head + payload)


def read_blob(path, magic: bytes) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n].decode())
    payload = np.frombuffer(raw[8 + n:], dtype="<f8").astype(np.float64)
    return header, payload


def save_field(path, vol: NeuralVolume) -> None:
    header = {
        "kind": "neural-volume",
        "arch": asdict(vol.arch),
        "K": vol.encoding.K,
        "dim": vol.encoding.dim,
        "sigma_ff": vol.encoding.scale,
        "seed": vol.seed,
        "tags": [w.tag for w in vol.weights],
        "shapes": [list(w.shape) for w in vol.weights],
    }
    write_blob(path, _FIELD_MAGIC, header, [vol.encoding.B] + [w.values for w in vol.weights])


def load_field(path) -> NeuralVolume:
    header, payload = read_blob(path, _FIELD_MAGIC)
    K, dim = header["K"], header["dim"]
    B = payload[:K * dim].reshape(K, dim)
    offset = K * dim
    weights = []
    for tag, shape in zip(header["tags"], header["shapes"]):
        n = int(np.prod(shape))
        weights.append(ParamBlock(payload[offset:offset + n].copy(), tuple(shape), tag))
        offset += n
    if offset != payload.size:
        raise ValueError(f"{path}: payload has {payload.size - offset} trailing values")
    arch = MLPArchitecture(**header["arch"])
    return NeuralVolume(FourierEncoding(B, header["sigma_ff"]), arch, weights, header["seed"])
