"""Run configuration: dataclass sections read from and written to INI files."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import os
from dataclasses import dataclass, field, fields, replace

from .reconstruct import ModelConfig, TrainConfig

SCHEMA_VERSION = 1
SEED_ENV = "DEFORMTOMO_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    schema_version: int = SCHEMA_VERSION
    name: str = "run"


@dataclass(frozen=True)
class PhantomConfig:
    kind: str = "gaussian-blobs"
    n: int = 64
    seed: int = 0
    path: str = ""


@dataclass(frozen=True)
class GeometryConfig:
    m: int = 41
    tilt_min: float = -70.0
    tilt_max: float = 70.0
    samples: int = 0  # 0: 2N nodes per ray


@dataclass(frozen=True)
class DeformationConfig:
    enabled: bool = True
    grid: int = 5
    sigma_px: float = 0.0  # 0: N/8
    amax_px: float = 3.0
    max_shift_frac: float = 0.1
    max_rot_deg: float = 10.0
    seed: int = 1


@dataclass(frozen=True)
class NoiseConfig:
    snr_db: float = 0.0
    seed: int = 2
    scope: str = "per-image"


@dataclass(frozen=True)
class FBPConfig:
    kind: str = "hann"
    cutoff: float = 1.0


@dataclass(frozen=True)
class MetricsConfig:
    fsc_threshold: float = 0.5
    max_shift: int = -1  # -1: N/8
    register: bool = True


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    deformation: DeformationConfig = field(default_factory=DeformationConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fbp: FBPConfig = field(default_factory=FBPConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in fields(self):
            body = getattr(self, sec.name)
            cp[sec.name] = {f.name: _format(getattr(body, f.name)) for f in fields(body)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        """Derive every stage seed from one integer."""
        return replace(
            self,
            phantom=replace(self.phantom, seed=seed),
            deformation=replace(self.deformation, seed=seed + 1),
            noise=replace(self.noise, seed=seed + 2),
            train=replace(self.train, seed=seed + 3),
        )

    def override(self, section: str, **values) -> "RunConfig":
        return replace(self, **{section: replace(getattr(self, section), **values)})


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, typ, where: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse INI text; unknown sections or keys are errors, missing keys take defaults."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    base = RunConfig()
    known = {f.name: f for f in fields(base)}
    sections = {}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"{source}: unknown section [{name}]")
        body = getattr(base, name)
        ftypes = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(body)}
        values = {}
        for key, raw in cp[name].items():
            if key not in ftypes:
                raise ConfigError(f"{source}: unknown key '{key}' in [{name}]")
            values[key] = _parse(raw, ftypes[key], f"{source} [{name}] {key}")
        try:
            sections[name] = replace(body, **values)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"{source} [{name}]: {err}") from None
    cfg = dataclasses.replace(base, **sections)
    if cfg.run.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: schema version {cfg.run.schema_version}, expected {SCHEMA_VERSION}")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from .fbp import FILTER_KINDS
    from .simulator import PHANTOM_KINDS

    checks = [
        (cfg.phantom.kind in PHANTOM_KINDS, f"phantom kind must be one of {PHANTOM_KINDS}"),
        (cfg.phantom.kind != "from-mrc" or bool(cfg.phantom.path), "from-mrc phantom needs a path"),
        (cfg.phantom.n >= 4, "phantom n must be >= 4"),
        (cfg.geometry.m >= 1, "geometry m must be >= 1"),
        (-90 <= cfg.geometry.tilt_min <= cfg.geometry.tilt_max < 90, "tilt range must satisfy -90 <= min <= max < 90"),
        (cfg.geometry.samples == 0 or cfg.geometry.samples >= cfg.phantom.n, "samples must be 0 or >= n"),
        (cfg.deformation.grid >= 2, "deformation grid must be >= 2"),
        (cfg.deformation.amax_px >= 0, "amax_px must be >= 0"),
        (cfg.noise.scope in ("per-image", "global"), "noise scope must be per-image or global"),
        (cfg.fbp.kind in FILTER_KINDS, f"fbp kind must be one of {FILTER_KINDS}"),
        (0 < cfg.fbp.cutoff <= 1, "fbp cutoff must lie in (0, 1]"),
        (0 < cfg.metrics.fsc_threshold < 1, "fsc threshold must lie in (0, 1)"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def load_config(path=None, seed: int | None = None, env=None) -> RunConfig:
    """Read a config file (defaults when ``path`` is None) and apply seed overrides.

    An explicit ``seed`` wins over the DEFORMTOMO_SEED environment variable.
    """
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        cfg = parse_config(text, str(path))
    env = os.environ if env is None else env
    if seed is None and env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return cfg.with_seed(seed) if seed is not None else cfg
