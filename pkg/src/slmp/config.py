"""Line-oriented run configuration: ``section.key = value`` with typed
fields, compiled-in defaults, and unknown-key rejection."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import combat as cb
from . import distill as di
from . import motion as mo
from . import physics as ph
from . import tracking as tr


class ConfigError(ValueError):
    pass


@dataclass
class PhysicsSection:
    gravity: float = 9.81
    hz: float = 60.0
    substeps: int = 4
    contact_kn: float = 1e4
    contact_dn: float = 100.0
    contact_kt: float = 2e3
    friction_mu: float = 0.8
    fall_frac: float = 0.4
    tau_max: float = 200.0
    contact_radius: float = 0.05
    character: str = ""  # optional JSON character file; empty = built-in

    def build(self) -> tuple[ph.CharacterSpec, ph.PhysicsConfig]:
        spec = (
            ph.character_from_json(self.character)
            if self.character
            else ph.default_character()
        )
        spec = replace(spec, tau_max=self.tau_max, contact_radius=self.contact_radius)
        cfg = ph.default_config(
            spec,
            gravity=self.gravity, hz=self.hz, substeps=self.substeps,
            contact_kn=self.contact_kn, contact_dn=self.contact_dn,
            contact_kt=self.contact_kt, friction_mu=self.friction_mu,
            fall_frac=self.fall_frac,
        )
        return spec, cfg


@dataclass
class DataSection:
    hz: float = 30.0
    duration: float = 10.0
    idle: int = 10
    footwork: int = 10
    jab: int = 5
    hook: int = 5
    kick: int = 5
    combo: int = 5

    def counts(self) -> dict[str, int]:
        return {f: getattr(self, f) for f in mo.FAMILIES}


@dataclass
class EvalSection:
    trials: int = 200
    horizons: tuple[float, ...] = (5.0, 10.0, 20.0, 30.0)
    resample_period: float = 1.0
    fixed_z: bool = False
    samples: int = 512
    clusters: int = 6
    e_div: float = 0.5


@dataclass
class RunConfig:
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    data: DataSection = field(default_factory=DataSection)
    ppo: tr.PpoConfig = field(default_factory=tr.PpoConfig)
    slmp: di.SlmpConfig = field(default_factory=di.SlmpConfig)
    combat: cb.CombatConfig = field(default_factory=cb.CombatConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0


_SECTIONS = ("physics", "data", "ppo", "slmp", "combat", "eval")


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from e
    if isinstance(default, tuple):
        elem = float if (default and isinstance(default[0], float)) else int
        try:
            return tuple(elem(p) for p in raw.split(",") if p.strip())
        except ValueError as e:
            raise ConfigError(f"{where}: expected comma-separated values, got {raw!r}") from e
    return raw


def load_config(path: str | Path | None) -> RunConfig:
    """Parse ``section.key = value`` lines; later entries override earlier."""
    cfg = RunConfig()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    for ln, line in enumerate(p.read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        if not sep:
            raise ConfigError(f"{p}:{ln}: expected key = value, got {line!r}")
        key = key.strip()
        where = f"{p}:{ln}"
        if key == "seed":
            cfg.seed = _coerce(value, 0, where)
            continue
        section, dot, name = key.partition(".")
        if not dot or section not in _SECTIONS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        if name not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        default = getattr(target, name)
        setattr(target, name, _coerce(value, default, where))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    # re-run dataclass invariants after field mutation
    for section in ("ppo", "slmp"):
        obj = getattr(cfg, section)
        obj.__post_init__()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(cfg: RunConfig) -> str:
    """Effective configuration as parseable text (includes the seed)."""
    lines = []
    for section in _SECTIONS:
        target = getattr(cfg, section)
        for f in fields(target):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(target, f.name))}")
    lines.append(f"seed = {cfg.seed}")
    return "\n".join(lines) + "\n"


def write_echo(cfg: RunConfig, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo.txt").write_text(echo_config(cfg))
