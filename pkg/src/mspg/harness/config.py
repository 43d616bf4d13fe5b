"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import importlib.resources
import math
import os
from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    pass


def _ints(text):
    return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = "ring"
    ring_modes: int = 8
    ring_radius: float = 2.0
    ring_std: float = 0.02
    # schedule
    rounds: int = 300
    seed: int = 0
    batch: int = 16
    eval_every: int = 10
    eval_samples: int = 256
    # optimization
    optimizer: str = "adamw"
    eta_g: float = 0.1
    eta_d: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    ema_decay: float = 0.9999
    dropout: float = 0.1
    gamma: float = 0.9
    step: int = 2
    steplr_every_round: bool = False
    # loss weights
    lambda_aux: float = 0.1
    lambda_fm: float = 1.0
    lambda_lgcl: float = 0.1
    lambda_fm_cap: float = 8.0
    tau: float = 0.1
    printed_aux: bool = False
    # stages
    early_frac: float = 0.2
    late_frac: float = 0.7
    smooth_target: float = 0.9
    instance_noise: float = 0.0
    late_reg: float = 1e-4
    d_steps_middle: int = 2
    # monitor
    monitor_window: int = 20
    strong_d: float = 0.8
    weak_g_dacc: float = 0.7
    stagnation_slope: float = -1e-3
    plateau_tol: float = 0.02
    # components
    apfl: bool = True
    balance: bool = True
    afe: bool = True
    # referee
    dqn_batch: int = 64
    dqn_warmup: int = 500
    dqn_capacity: int = 10000
    dqn_gamma: float = 0.95
    dqn_lr: float = 1e-3
    dqn_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    reward: str = "shaped"
    balance_lr_min: float = 1e-6
    balance_lr_max: float = 1.0
    # architecture
    latent_dim: int = 8
    channels: int = 6
    spatial: int = 4
    n_blocks: int = 2
    fusion: str = "additive"
    windows: tuple = (1, 2, 4)
    scales: tuple = (3, 5, 7)
    n_context: int = 4
    g_hidden: int = 64
    d_hidden: int = 64

    def with_overrides(self, **kw):
        return validate(replace(self, **kw))


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()

_RANGES = {
    "ring_modes": (2, None), "ring_radius": (0, None), "ring_std": (0, None),
    "rounds": (1, None), "seed": (0, 2 ** 64 - 1), "batch": (2, None), "eval_every": (1, None),
    "eval_samples": (1, None),
    "eta_g": (1e-6, 1.0), "eta_d": (1e-6, 1.0), "beta1": (0, 0.999999), "beta2": (0, 0.999999999),
    "adam_eps": (0, None), "weight_decay": (0, None), "ema_decay": (0, 1), "dropout": (0, 0.99),
    "gamma": (1e-12, 1), "step": (1, None),
    "lambda_aux": (0, 1), "lambda_fm": (0, None), "lambda_lgcl": (0, None), "lambda_fm_cap": (0, None),
    "tau": (1e-12, None), "early_frac": (0, 1), "late_frac": (0, 1), "smooth_target": (0, 1),
    "instance_noise": (0, None), "late_reg": (0, None), "d_steps_middle": (1, None),
    "monitor_window": (2, None), "strong_d": (0, 1), "weak_g_dacc": (0, 1), "plateau_tol": (0, None),
    "dqn_batch": (1, None), "dqn_warmup": (1, None), "dqn_capacity": (1, None), "dqn_gamma": (0, 1),
    "dqn_lr": (0, None), "dqn_sync": (1, None), "eps_start": (0, 1), "eps_end": (0, 1),
    "eps_decay_frac": (1e-9, 1), "balance_lr_min": (1e-6, 1.0), "balance_lr_max": (1e-6, 1.0),
    "latent_dim": (1, None), "channels": (1, None), "spatial": (1, None),
    "n_blocks": (1, None), "n_context": (2, None), "g_hidden": (1, None), "d_hidden": (1, None),
}
_CHOICES = {"optimizer": ("adamw", "sgd"), "reward": ("shaped", "quality"),
            "fusion": ("additive", "weighted")}


def _coerce(name, raw):
    default = getattr(_DEFAULTS, name)
    try:
        if isinstance(default, bool):
            return _bool(raw)
        if isinstance(default, int):
            return int(str(raw).strip())
        if isinstance(default, float):
            v = float(str(raw).strip())
            if not math.isfinite(v):
                raise ConfigError(f"{name} must be finite")
            return v
        if isinstance(default, tuple):
            return _ints(raw) if not isinstance(raw, tuple) else tuple(int(x) for x in raw)
        return str(raw).strip()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def validate(cfg):
    for name, (lo, hi) in _RANGES.items():
        v = getattr(cfg, name)
        if lo is not None and v < lo or hi is not None and v > hi:
            raise ConfigError(f"{name}={v} outside [{lo}, {hi}]")
    for name, options in _CHOICES.items():
        if getattr(cfg, name) not in options:
            raise ConfigError(f"{name} must be one of {options}")
    if not (cfg.dataset in ("ring", "shapes") or cfg.dataset.startswith("dir:")):
        raise ConfigError(f"dataset must be ring, shapes or dir:PATH, got {cfg.dataset!r}")
    if cfg.early_frac > cfg.late_frac:
        raise ConfigError("early_frac must not exceed late_frac")
    if cfg.channels % len(cfg.windows):
        raise ConfigError("channels must be divisible by the number of attention windows")
    if any(w < 1 or w > cfg.spatial for w in cfg.windows):
        raise ConfigError(f"windows {cfg.windows} must lie in [1, spatial={cfg.spatial}]")
    if not cfg.scales or any(k < 1 or k % 2 == 0 for k in cfg.scales):
        raise ConfigError("scales must be odd kernel sizes")
    if cfg.balance_lr_min > cfg.balance_lr_max:
        raise ConfigError("balance_lr_min must not exceed balance_lr_max")
    if cfg.eps_end > cfg.eps_start:
        raise ConfigError("eps_end must not exceed eps_start")
    return cfg


def parse(text, base=None):
    """Parse config text; unknown keys and out-of-range values raise ConfigError."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return validate(replace(base or _DEFAULTS, **values))


def find_config(name):
    """A path as given if it exists, else a packaged config by name (``ring`` or ``ring.cfg``)."""
    if os.path.exists(name):
        return name
    stem = os.path.basename(name)
    packaged = importlib.resources.files("mspg") / "configs" / (stem if stem.endswith(".cfg") else stem + ".cfg")
    if os.sep not in name and packaged.is_file():
        return str(packaged)
    raise ConfigError(f"config file {name!r} not found")


def load(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), base)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def serialize(cfg):
    return "".join(f"{f.name} = {_fmt(getattr(cfg, f.name))}\n" for f in fields(cfg))
