"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Omitted keys take the defaults
below (the reference hyperparameters); command-line overrides beat the file.

Keys
----
loss                  dis | pis | dds | logvar
target                target spec string, e.g. ``gmm``, ``funnel:d=10,nu=3``
sigma_min, sigma_max  VP schedule endpoints (0.1, 10)
T, eta                VP terminal time and noise scale (1, 1)
pis_sigma, pis_T      half-bridge diffusivity and horizon (sqrt(0.2), 5)
batch_size            trajectories per gradient step (2048)
gradient_steps        K; 0 allowed; default 20000 (d <= 10) or 80000
lr, weight_decay      Adam learning rate and decoupled weight decay (0.005, 1e-7)
grad_clip             global l2-norm bound on gradients (1)
steps_schedule        ``N:fraction`` list (100:0.25,200:0.25,400:0.25,800:0.25)
clip_values           output clip bounds per phase (10,250,500)
clip_steps            last step of the first two phases (200,400)
ema_window, ema_every EMA over the final window, updated every k-th step (1500, 5)
scale_schedules       rescale clip_steps / ema_window by K / K_default (true)
width, phi2_width     network widths (64 or 128 by dimension; 64)
fourier               integer | random time features (integer)
detach_score          stop gradients through the interpolated score (true)
add_stochastic_integral  add the zero-mean Ito sum to the training loss (false)
seed                  integer seed (0)
precision             float64 | float32 (float64)
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, InputError
from .nn import NetConfig, default_width
from .sde import BrownianReference, VPSchedule
from .targets import parse_target

LOSS_NAMES = ("dis", "pis", "dds", "logvar")


def default_steps(dim: int) -> int:
    return 20000 if dim <= 10 else 80000


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "dis"
    target: str = "gmm"
    sigma_min: float = 0.1
    sigma_max: float = 10.0
    T: float = 1.0
    eta: float = 1.0
    pis_sigma: float = math.sqrt(0.2)
    pis_T: float = 5.0
    batch_size: int = 2048
    gradient_steps: int | None = None
    lr: float = 0.005
    weight_decay: float = 1e-7
    grad_clip: float = 1.0
    steps_schedule: tuple = ((100, 0.25), (200, 0.25), (400, 0.25), (800, 0.25))
    clip_values: tuple = (10.0, 250.0, 500.0)
    clip_steps: tuple = (200, 400)
    ema_window: int = 1500
    ema_every: int = 5
    scale_schedules: bool = True
    width: int | None = None
    phi2_width: int = 64
    fourier: str = "integer"
    detach_score: bool = True
    add_stochastic_integral: bool = False
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        try:
            self.target_density()
        except InputError as exc:
            raise ConfigError(f"target: {exc}") from exc
        if self.loss not in LOSS_NAMES:
            raise ConfigError(f"loss: expected one of {LOSS_NAMES}, got {self.loss!r}")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError("sigma_min/sigma_max: need 0 < sigma_min < sigma_max")
        if self.T <= 0 or self.eta <= 0 or self.pis_T <= 0 or self.pis_sigma <= 0:
            raise ConfigError("T, eta, pis_T, pis_sigma must be positive")
        if self.gradient_steps is not None and self.gradient_steps < 0:
            raise ConfigError("gradient_steps: must be >= 0")
        if self.batch_size < 1 or (self.loss == "logvar" and self.batch_size < 2):
            raise ConfigError("batch_size: must be >= 1 (>= 2 for logvar)")
        if not self.steps_schedule or any(n < 1 or frac <= 0 for n, frac in self.steps_schedule):
            raise ConfigError("steps_schedule: need positive step counts and fractions")
        if abs(sum(frac for _, frac in self.steps_schedule) - 1.0) > 1e-9:
            raise ConfigError("steps_schedule: fractions must sum to 1")
        if len(self.clip_values) != 3 or len(self.clip_steps) != 2:
            raise ConfigError("clip_values needs 3 entries and clip_steps 2")
        if self.ema_window < 1 or self.ema_every < 1:
            raise ConfigError("ema_window and ema_every must be positive")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision: float64 or float32")
        if self.lr <= 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive, weight_decay non-negative")
        NetConfig(self.resolved_width(), self.phi2_width, self.fourier)

    def target_density(self):
        return parse_target(self.target)

    @property
    def dim(self) -> int:
        return self.target_density().dim

    def resolved_width(self) -> int:
        return self.width if self.width is not None else default_width(self.dim)

    def net(self) -> NetConfig:
        return NetConfig(self.resolved_width(), self.phi2_width, self.fourier)

    def process(self):
        if self.loss == "pis":
            return BrownianReference(self.dim, self.pis_sigma, self.pis_T)
        return VPSchedule(self.dim, self.sigma_min, self.sigma_max, self.T, self.eta)

    @property
    def total_steps(self) -> int:
        return self.gradient_steps if self.gradient_steps is not None else default_steps(self.dim)

    @property
    def schedule_scale(self) -> float:
        return self.total_steps / default_steps(self.dim) if self.scale_schedules else 1.0

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_items(self):
        """(key, text) pairs in declaration order, in the file syntax."""
        return [(f.name, format_value(getattr(self, f.name))) for f in fields(self)]


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{a}:{b!r}" for a, b in v)
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    return str(v)


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_int(text):
    return None if text.lower() in ("auto", "none", "") else int(text)


def _parse_schedule(text):
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        n, sep, frac = item.partition(":")
        if not sep:
            raise ValueError(f"expected N:fraction, got {item!r}")
        out.append((int(n), float(frac)))
    return tuple(out)


def _float_tuple(text):
    return tuple(float(x) for x in text.split(","))


def _int_tuple(text):
    return tuple(int(x) for x in text.split(","))


_PARSERS = {
    "loss": str, "target": str, "fourier": str, "precision": str,
    "sigma_min": float, "sigma_max": float, "T": float, "eta": float,
    "pis_sigma": float, "pis_T": float, "lr": float, "weight_decay": float, "grad_clip": float,
    "batch_size": int, "ema_window": int, "ema_every": int, "phi2_width": int, "seed": int,
    "gradient_steps": _parse_optional_int, "width": _parse_optional_int,
    "steps_schedule": _parse_schedule, "clip_values": _float_tuple, "clip_steps": _int_tuple,
    "scale_schedules": _parse_bool, "detach_score": _parse_bool, "add_stochastic_integral": _parse_bool,
}
assert set(_PARSERS) == {f.name for f in fields(TrainConfig)}


def parse_lines(lines, source="<config>"):
    """Parse ``key = value`` lines into {key: (raw_value, where)}."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = (value.strip(), f"{source}:{lineno}")
    return out


def parse_overrides(pairs):
    out = {}
    for i, pair in enumerate(pairs or ()):
        key, eq, value = pair.partition("=")
        if not eq:
            raise ConfigError(f"override {pair!r}: expected key=value")
        out[key.strip()] = (value.strip(), f"override #{i + 1}")
    return out


def build_config(entries) -> TrainConfig:
    kwargs = {}
    for key, (raw, where) in entries.items():
        if key not in _PARSERS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            kwargs[key] = _PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc
    try:
        return TrainConfig(**kwargs)
    except ConfigError as exc:
        key = str(exc).split(":")[0].split("/")[0].split(",")[0].strip()
        where = entries[key][1] if key in entries else "defaults"
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(path=None, overrides=None) -> TrainConfig:
    """Resolve a config file plus ``key=value`` overrides (overrides win)."""
    entries = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {str(p)!r} does not exist")
        entries.update(parse_lines(p.read_text().splitlines(), str(p)))
    entries.update(parse_overrides(overrides))
    return build_config(entries)


def config_from_items(items) -> TrainConfig:
    """Rebuild a config from ``to_items()`` pairs (used by checkpoints)."""
    return build_config({k: (v, "checkpoint") for k, v in items})
