"""Pipeline settings, dataset presets and the key=value run-config format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .fpfh import FpfhError, FpfhParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    gamma_iters: int = 16
    n_super: int = 256
    k1: int = 32
    k2: int = 24
    sh_iters: int = 5
    ot_eps: float = 1.0
    ot_iters: int = 5
    ms_iters: int = 40
    bandwidth_rank: int = 16
    agg_passes: int = 1
    blend: float = 1.0
    fps_start: int = 0
    recompute_scales: bool = True
    coord_kernel: str = "tanh"
    nms_require_both: bool = True

    def __post_init__(self):
        for name in ("gamma_iters", "n_super", "k1", "k2", "sh_iters", "ot_iters",
                     "ms_iters", "bandwidth_rank", "agg_passes", "fps_start"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.n_super < 1 or self.k1 < 1 or self.k2 < 1:
            raise ConfigError("n_super, k1 and k2 must be at least 1")
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigError(f"blend must lie in [0, 1], got {self.blend}")
        if not self.ot_eps > 0:
            raise ConfigError(f"ot_eps must be positive, got {self.ot_eps}")
        if self.coord_kernel not in ("tanh", "softmax"):
            raise ConfigError(f"coord_kernel must be 'tanh' or 'softmax', got {self.coord_kernel!r}")

    def check_cloud_size(self, n: int):
        for name in ("n_super", "k1", "k2"):
            if getattr(self, name) > n:
                raise ConfigError(f"{name}={getattr(self, name)} exceeds point count N={n}")
        if self.fps_start >= n:
            raise ConfigError(f"fps_start={self.fps_start} out of range for N={n}")


_OBJECT = dict(gamma_iters=16, n_super=256, k1=32, k2=24)
_OBJECT_FPFH = dict(m_ref=512, k3=32, k4=100, r1=0.04, r2=0.08)

PRESETS: dict[str, tuple[dict, dict]] = {
    "modelnet40": (_OBJECT, _OBJECT_FPFH),
    "objectscannn": (_OBJECT, _OBJECT_FPFH),
    "shapenetpart": (_OBJECT, _OBJECT_FPFH),
    "scannet": (dict(gamma_iters=8, n_super=3000, k1=48, k2=32),
                dict(m_ref=4800, k3=32, k4=100, r1=0.05, r2=0.10)),
    "nuscenes": (dict(gamma_iters=8, n_super=2400, k1=48, k2=32),
                 dict(m_ref=5200, k3=32, k4=100, r1=0.05, r2=0.10)),
}


def preset(name: str) -> tuple[PipelineConfig, FpfhParams]:
    try:
        pipe, geo = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return PipelineConfig(**pipe), FpfhParams(**geo)


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig
    fpfh: FpfhParams
    preset: str | None = None


_PIPE_FIELDS = {f.name: f.type for f in fields(PipelineConfig)}
_FPFH_FIELDS = {f.name: f.type for f in fields(FpfhParams)}


def _coerce(key: str, raw: str, typ: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None


def parse_run_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    A ``preset`` line seeds every value from the named dataset row; other keys
    override it regardless of their position in the file. Unknown keys are
    errors.
    """
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key != "preset" and key not in _PIPE_FIELDS and key not in _FPFH_FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw

    name = values.pop("preset", None)
    if name is not None:
        pipe, geo = preset(name)
    else:
        pipe, geo = PipelineConfig(), FpfhParams()
    pipe_over = {k: _coerce(k, v, _PIPE_FIELDS[k]) for k, v in values.items() if k in _PIPE_FIELDS}
    geo_over = {k: _coerce(k, v, _FPFH_FIELDS[k]) for k, v in values.items() if k in _FPFH_FIELDS}
    try:
        return RunConfig(replace(pipe, **pipe_over), replace(geo, **geo_over), name)
    except FpfhError as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text())


def format_run_config(cfg: RunConfig) -> str:
    """Serialize every field, so a written config needs no preset to reload."""
    lines = []
    for obj in (cfg.pipeline, cfg.fpfh):
        for f in fields(obj):
            val = getattr(obj, f.name)
            lines.append(f"{f.name} = {str(val).lower() if isinstance(val, bool) else val}")
    return "\n".join(lines) + "\n"
