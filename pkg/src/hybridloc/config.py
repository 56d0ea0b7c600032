"""Run configuration: a flat ``key = value`` text format with dotted keys.

Grammar (one statement per line)::

    line    := blank | comment | key '=' value [comment]
    comment := '#' anything
    key     := ident ('.' ident)*
    value   := number | bool | word | list
    list    := value (',' value)+

Every key is looked up in :data:`KEYS`; unknown keys, malformed values and
missing required keys raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .association import AssocConfig, SeedConfig
from .errors import ConfigError
from .estimator import BLOCK_NAMES, WindowConfig
from .imu import ImuNoiseParams
from .pipeline import BACKENDS, MODES, LocalizerConfig
from .sim import SURFACES, SimConfig, TrajectoryConfig, WorldConfig

REQUIRED = ("mode", "sim.trajectory.kind")
_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*$")


@dataclass(frozen=True)
class BenchConfig:
    assoc_components: tuple = (100, 1000)
    assoc_features: int = 100
    assoc_frames: int = 10
    reps: int = 30
    warmup: int = 1
    opt_windows: int = 20


@dataclass(frozen=True)
class RunConfig:
    mode: str
    sim: SimConfig
    loc: LocalizerConfig
    bench: BenchConfig = field(default_factory=BenchConfig)
    map_path: str | None = None


# ---------------------------------------------------------------- value casting

def _num(key, s):
    try:
        return float(s)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {s!r}") from None


def _pos(key, s):
    v = _num(key, s)
    if not v > 0:
        raise ConfigError(key, f"must be positive, got {s}")
    return v


def _nonneg(key, s):
    v = _num(key, s)
    if v < 0:
        raise ConfigError(key, f"must be non-negative, got {s}")
    return v


def _frac(key, s):
    v = _num(key, s)
    if not 0 <= v < 1:
        raise ConfigError(key, f"must be in [0, 1), got {s}")
    return v


def _int(key, s):
    try:
        return int(s)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {s!r}") from None


def _pos_int(key, s):
    v = _int(key, s)
    if v <= 0:
        raise ConfigError(key, f"must be a positive integer, got {s}")
    return v


def _bool(key, s):
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(key, f"expected true/false, got {s!r}")


def _vec3(key, s):
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 3:
        raise ConfigError(key, f"expected 3 comma-separated numbers, got {s!r}")
    return tuple(_num(key, p) for p in parts)


def _pos_vec3(key, s):
    v = _vec3(key, s)
    if min(v) <= 0:
        raise ConfigError(key, f"entries must be positive, got {s!r}")
    return v


def _pos_ints(key, s):
    return tuple(_pos_int(key, p.strip()) for p in s.split(","))


def _choice(*options):
    def cast(key, s):
        if s not in options:
            raise ConfigError(key, f"expected one of {', '.join(options)}; got {s!r}")
        return s
    return cast


def _subset(options):
    def cast(key, s):
        items = tuple(p.strip() for p in s.split(",") if p.strip())
        bad = [i for i in items if i not in options]
        if bad or not items:
            raise ConfigError(key, f"entries must be from {', '.join(options)}; got {s!r}")
        return items
    return cast


def _text(key, s):
    return s


# key -> (section, field, caster). Sections are assembled into dataclasses.
KEYS = {
    "mode": ("top", "mode", _choice(*MODES)),
    "map.path": ("top", "map_path", _text),
    "map.voxel_size": ("loc", "voxel_size", _pos),
    "map.rel_mass": ("loc", "voxel_rel_mass", _frac),

    "sim.seed": ("sim", "rng_seed", _int),
    "sim.duration": ("sim", "duration", _pos),
    "sim.imu_rate": ("sim", "imu_rate", _pos),
    "sim.cam_rate": ("sim", "cam_rate", _pos),
    "sim.pixel_sigma": ("sim", "pixel_sigma", _nonneg),
    "sim.imu_noise": ("sim", "imu_noise", _bool),
    "sim.imu_model": ("sim", "imu_model", _choice("consistent", "analytic")),
    "sim.bias_g": ("sim", "bias_g", _vec3),
    "sim.bias_a": ("sim", "bias_a", _vec3),
    "sim.init_sigma_t": ("sim", "init_sigma_t", _nonneg),
    "sim.init_sigma_phi": ("sim", "init_sigma_phi", _nonneg),
    "sim.t_cb": ("sim", "t_CB", _vec3),
    "sim.imu.sigma_g": ("imu", "sigma_g", _pos),
    "sim.imu.sigma_a": ("imu", "sigma_a", _pos),
    "sim.imu.sigma_bg": ("imu", "sigma_bg", _pos),
    "sim.imu.sigma_ba": ("imu", "sigma_ba", _pos),

    "sim.trajectory.kind": ("traj", "kind", _choice("circle", "lissajous")),
    "sim.trajectory.center": ("traj", "center", _vec3),
    "sim.trajectory.radius": ("traj", "radius", _nonneg),
    "sim.trajectory.period": ("traj", "period", _pos),
    "sim.trajectory.yaw_offset": ("traj", "yaw_offset", _num),
    "sim.trajectory.amplitudes": ("traj", "amplitudes", _vec3),
    "sim.trajectory.frequencies": ("traj", "frequencies", _vec3),
    "sim.trajectory.phases": ("traj", "phases", _vec3),
    "sim.trajectory.z_amp": ("traj", "z_amp", _num),
    "sim.trajectory.z_freq": ("traj", "z_freq", _nonneg),
    "sim.trajectory.yaw0": ("traj", "yaw0", _num),
    "sim.trajectory.yaw_amp": ("traj", "yaw_amp", _num),
    "sim.trajectory.yaw_freq": ("traj", "yaw_freq", _nonneg),
    "sim.trajectory.pitch_amp": ("traj", "pitch_amp", _num),
    "sim.trajectory.pitch_freq": ("traj", "pitch_freq", _nonneg),
    "sim.trajectory.roll_amp": ("traj", "roll_amp", _num),
    "sim.trajectory.roll_freq": ("traj", "roll_freq", _nonneg),

    "sim.world.room": ("world", "room", _pos_vec3),
    "sim.world.surfaces": ("world", "surfaces", _subset(SURFACES)),
    "sim.world.n_components": ("world", "n_components", _pos_int),
    "sim.world.thickness": ("world", "component_thickness", _pos),
    "sim.world.overlap": ("world", "overlap", _pos),
    "sim.world.n_landmarks": ("world", "n_landmarks", _pos_int),
    "sim.world.dropout": ("world", "landmark_dropout", _frac),
    "sim.world.offset_sigma": ("world", "landmark_offset_sigma", _nonneg),
    "sim.world.edge_margin": ("world", "landmark_edge_margin", _nonneg),

    "assoc.gate": ("assoc", "gate", _pos),
    "assoc.max_range": ("assoc", "max_range", _pos),
    "assoc.top_k": ("assoc", "top_k", _pos_int),
    "assoc.proj_gate": ("assoc", "proj_gate", _pos),
    "assoc.occlusion_margin": ("assoc", "occlusion_margin", _nonneg),
    "seeds.parallax_px": ("seeds", "min_parallax_px", _pos),
    "seeds.min_obs": ("seeds", "min_obs", _pos_int),

    "window.size": ("window", "size", _pos_int),
    "window.max_iters": ("window", "max_iters", _pos_int),
    "window.tol": ("window", "convergence_tol", _pos),
    "window.fix_oldest": ("window", "fix_oldest", _bool),
    "window.fix_blocks": ("window", "fix_oldest_blocks", _subset(BLOCK_NAMES)),

    "opt.backend": ("loc", "backend", _choice(*BACKENDS)),
    "opt.refine_landmarks": ("loc", "refine_landmarks", _bool),
    "loc.max_reproj_px": ("loc", "max_reproj_px", _pos),
    "loc.init_sigma_t": ("loc", "init_sigma_t", _pos),
    "loc.init_sigma_phi": ("loc", "init_sigma_phi", _pos),
    "loc.init_sigma_v": ("loc", "init_sigma_v", _pos),
    "loc.init_sigma_bg": ("loc", "init_sigma_bg", _pos),
    "loc.init_sigma_ba": ("loc", "init_sigma_ba", _pos),

    "bench.assoc.components": ("bench", "assoc_components", _pos_ints),
    "bench.assoc.features": ("bench", "assoc_features", _pos_int),
    "bench.assoc.frames": ("bench", "assoc_frames", _pos_int),
    "bench.reps": ("bench", "reps", _pos_int),
    "bench.warmup": ("bench", "warmup", _int),
    "bench.opt.windows": ("bench", "opt_windows", _pos_int),
}


# ---------------------------------------------------------------- parsing

def parse_text(text: str, source: str = "<config>") -> dict:
    """Raw ``{key: value-string}`` from config text; later lines win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not _KEY_RE.match(key):
            raise ConfigError(f"{source}:{lineno}", f"malformed key {key!r}")
        if not value:
            raise ConfigError(key, "empty value")
        out[key] = value
    return out


def build(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Validate raw key/value strings and assemble a :class:`RunConfig`."""
    raw = dict(raw)
    raw.update(overrides or {})
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(key, "required key is missing")
    sections: dict = {s: {} for s in ("top", "sim", "imu", "traj", "world", "assoc",
                                      "seeds", "window", "loc", "bench")}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(key, "unknown key")
        sec, name, cast = KEYS[key]
        sections[sec][name] = cast(key, str(value))

    def make(cls, sec, prefix):
        try:
            return cls(**sections[sec])
        except (ValueError, TypeError) as exc:
            raise ConfigError(prefix, str(exc)) from None

    traj = make(TrajectoryConfig, "traj", "sim.trajectory")
    world = make(WorldConfig, "world", "sim.world")
    imu = make(ImuNoiseParams, "imu", "sim.imu")
    sim = make(lambda **kw: SimConfig(trajectory=traj, world=world, imu_params=imu, **kw),
               "sim", "sim")
    window = make(WindowConfig, "window", "window")
    assoc = make(AssocConfig, "assoc", "assoc")
    seeds = make(SeedConfig, "seeds", "seeds")
    top = sections["top"]
    loc = make(lambda **kw: LocalizerConfig(mode=top["mode"], window=window, assoc=assoc,
                                            seeds=seeds, **kw), "loc", "loc")
    bench = make(BenchConfig, "bench", "bench")
    return RunConfig(mode=top["mode"], sim=sim, loc=loc, bench=bench,
                     map_path=top.get("map_path"))


def load(path, overrides: dict | None = None) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return build(parse_text(text, str(p)), overrides)


def with_workers(cfg: RunConfig, workers: int) -> RunConfig:
    assoc = replace(cfg.loc.assoc, workers=workers)
    return replace(cfg, loc=replace(cfg.loc, assoc=assoc))
