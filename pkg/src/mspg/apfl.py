"""Adaptive feedback loop: performance monitor, StepLR decay, staged curriculum
and the per-round D-then-G update.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .models import feature_matching_loss, loss_d_aux, loss_d_main, loss_g, loss_g_total
from .nn import bce_logits

LR_FLOOR = 1e-6
STAGES = ("early", "middle", "late")


class RoundAborted(RuntimeError):
    """A loss went non-finite; the round's updates were not applied."""

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = metrics


@dataclass
class RoundMetrics:
    L_G: float
    L_D: float
    L_FM: float
    L_LGCL: float
    d_acc_real: float
    d_acc_fake: float
    quality: float = 0.0
    coverage: float = 0.0
    L_G_adv: float = 0.0
    L_aux: float = 0.0

    @property
    def d_acc(self):
        return 0.5 * (self.d_acc_real + self.d_acc_fake)

    def is_finite(self):
        return all(math.isfinite(v) for v in asdict(self).values())


@dataclass
class MonitorConfig:
    window: int = 20
    strong_d: float = 0.8
    weak_g_dacc: float = 0.7
    stagnation_slope: float = -1e-3
    plateau_tol: float = 0.02
    lambda_fm_cap: float = 8.0
    cooldown: int | None = None       # defaults to the window length

    @property
    def cooldown_rounds(self):
        return self.window if self.cooldown is None else self.cooldown


@dataclass
class StageConfig:
    early_frac: float = 0.2
    late_frac: float = 0.7
    smooth_target: float = 0.9
    instance_noise: float = 0.0
    d_steps_early: int = 1
    d_steps_middle: int = 2
    d_steps_late: int = 2
    late_reg: float = 1e-4


@dataclass
class Adjustment:
    kind: str          # halve_eta_d | weak_generator | steplr
    round: int

    def __str__(self):
        return self.kind


@dataclass
class TrainerState:
    eta_g: float = 0.1
    eta_d: float = 0.1
    gamma: float = 0.9
    step: int = 2
    lambda_aux: float = 0.1
    lambda_fm: float = 1.0
    lambda_lgcl: float = 0.1
    stage: str = "early"
    round: int = 0
    total_rounds: int = 100
    seed: int = 0
    label_smoothing: bool = False
    d_steps_cap: int | None = None
    window: deque = field(default_factory=deque)
    last_fired: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["window"] = [asdict(m) for m in self.window]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        window = deque(RoundMetrics(**m) for m in d.pop("window"))
        st = cls(**d)
        st.window = window
        return st


def steplr_update(eta, gamma, step, floor=LR_FLOOR):
    """``eta * gamma ** (1/step)``, never below ``floor``."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return max(eta * gamma ** (1.0 / step), floor)


def _slope(values):
    n = len(values)
    if n < 2:
        return 0.0
    x = np.arange(n, dtype=np.float64)
    x -= x.mean()
    y = np.asarray(values, dtype=np.float64)
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def triggered_rules(window, cfg):
    """Rule names whose condition holds on a full metrics window (pure)."""
    window = list(window)
    if len(window) < cfg.window:
        return []
    mean_acc = float(np.mean([m.d_acc for m in window]))
    fired = []
    if mean_acc > cfg.strong_d:
        fired.append("halve_eta_d")
    if _slope([m.L_G for m in window]) >= cfg.stagnation_slope and mean_acc > cfg.weak_g_dacc:
        fired.append("weak_generator")
    q = [m.quality for m in window]
    if max(q) - min(q) < cfg.plateau_tol:
        fired.append("steplr")
    return fired


def monitor_update(state, metrics, cfg):
    """Push one round's metrics and return the adjustments due this round.

    A rule that fired is silenced for ``cfg.cooldown_rounds`` rounds.
    """
    if not metrics.is_finite():
        raise ValueError("metrics must be finite")
    state.window.append(metrics)
    while len(state.window) > cfg.window:
        state.window.popleft()
    out = []
    for kind in triggered_rules(state.window, cfg):
        last = state.last_fired.get(kind)
        if last is not None and state.round - last < cfg.cooldown_rounds:
            continue
        state.last_fired[kind] = state.round
        out.append(Adjustment(kind, state.round))
    return out


def apply_adjustments(state, adjustments, cfg):
    for adj in adjustments:
        if adj.kind == "halve_eta_d":
            state.eta_d = max(state.eta_d * 0.5, LR_FLOOR)
            state.d_steps_cap = 1
        elif adj.kind == "weak_generator":
            state.label_smoothing = True
            # the cap bounds growth; it never pulls an already larger weight down
            state.lambda_fm = max(state.lambda_fm, min(state.lambda_fm * 2.0, cfg.lambda_fm_cap))
        elif adj.kind == "steplr":
            state.eta_g = steplr_update(state.eta_g, state.gamma, state.step)
            state.eta_d = steplr_update(state.eta_d, state.gamma, state.step)
        else:
            raise ValueError(f"unknown adjustment {adj.kind!r}")


def stage_for_round(rnd, total, cfg):
    """Stage of 1-based round ``rnd``: middle from ceil(early_frac*total), late from ceil(late_frac*total)."""
    if rnd >= math.ceil(cfg.late_frac * total):
        return "late"
    if rnd >= math.ceil(cfg.early_frac * total):
        return "middle"
    return "early"


def stage_transition(state, cfg):
    """Advance ``state.stage`` for ``state.round``; stages never move backwards."""
    new = stage_for_round(state.round, state.total_rounds, cfg)
    if STAGES.index(new) < STAGES.index(state.stage):
        new = state.stage
    if new != state.stage:
        state.stage = new
        state.d_steps_cap = None
    return state.stage


@dataclass
class StageSettings:
    real_target: float
    d_steps: int
    noise: float
    reg: float
    aux_on: bool
    lgcl_on: bool


def stage_settings(state, cfg):
    stage = state.stage
    sigma = cfg.instance_noise
    if stage == "early":
        s = StageSettings(cfg.smooth_target, cfg.d_steps_early, sigma, 0.0, False, False)
    elif stage == "middle":
        s = StageSettings(1.0, cfg.d_steps_middle, sigma, 0.0, True, True)
    else:
        start = math.ceil(cfg.late_frac * state.total_rounds)
        span = max(state.total_rounds - start, 1)
        frac = min(max((state.total_rounds - state.round) / span, 0.0), 1.0)
        s = StageSettings(1.0, cfg.d_steps_late, sigma * frac, cfg.late_reg, True, True)
    if state.label_smoothing:
        s.real_target = cfg.smooth_target
    if state.d_steps_cap is not None:
        s.d_steps = min(s.d_steps, state.d_steps_cap)
    return s


class GanSystem:
    """Generator, discriminators, optimizers and random streams for one run."""

    def __init__(self, generator, discriminator, aux, opt_g, opt_d, ema, *, latent_rng,
                 noise_rng, afe=True, printed_aux=False):
        self.G, self.D, self.aux = generator, discriminator, aux
        self.opt_g, self.opt_d = opt_g, opt_d
        self.ema = ema
        self.latent_rng = latent_rng
        self.noise_rng = noise_rng
        self.afe = afe
        self.printed_aux = printed_aux

    def latent(self, n):
        return T.tensor(self.latent_rng.standard_normal((n, self.G.latent_dim)))

    def _noisy(self, x, sigma):
        if sigma <= 0:
            return x
        return x + T.tensor(self.noise_rng.standard_normal(x.shape) * sigma)

    def d_params(self):
        return self.opt_d.params


def _accuracy(logits, positive):
    return float(np.mean(logits.data > 0)) if positive else float(np.mean(logits.data < 0))


def _l2(params):
    total = None
    for p in params:
        if p.ndim < 2:
            continue
        t = T.sum(p * p)
        total = t if total is None else total + t
    return total


def _finite(name, t, partial):
    if not np.all(np.isfinite(t.data)):
        raise RoundAborted(f"non-finite {name} in round", partial)


def train_round(system, state, batch, stage_cfg):
    """One D-then-G round on ``batch`` (real samples, numpy array).

    Learning rates and loss weights are read from ``state``; returns the
    round's metrics (quality fields are filled in by the caller).
    """
    settings = stage_settings(state, stage_cfg)
    G, D, aux = system.G, system.D, system.aux
    use_aux = system.afe and settings.aux_on
    real = T.tensor(batch)
    B = real.shape[0]
    G.train(), D.train(), aux.train()
    system.opt_d.lr = state.eta_d
    system.opt_g.lr = state.eta_g

    l_d = l_aux = 0.0
    acc_r = acc_f = 0.0
    for _ in range(settings.d_steps):
        z = system.latent(B)
        with T.no_grad():
            fake, f_gen, _ = G(z)
        system.opt_d.zero_grad()
        r_logits, _ = D(system._noisy(real, settings.noise))
        f_logits, _ = D(system._noisy(fake, settings.noise))
        loss = loss_d_main(r_logits, f_logits, settings.real_target)
        l_d = float(loss.data)
        if use_aux:
            early = D.early(real).detach()
            la = loss_d_aux(aux(aux.encode_real(early)), aux(f_gen), printed=system.printed_aux)
            l_aux = float(la.data)
            loss = loss + la
        if settings.reg > 0:
            loss = loss + settings.reg * _l2(D.parameters())
        _finite("discriminator loss", loss, None)
        loss.backward()
        system.opt_d.step()
        acc_r, acc_f = _accuracy(r_logits, True), _accuracy(f_logits, False)

    z = system.latent(B)
    system.opt_g.zero_grad()
    fake, f_gen, lgcl = G(z)
    with T.no_grad():
        _, real_feats = D(system._noisy(real, settings.noise))
    f_logits, fake_feats = D(system._noisy(fake, settings.noise))
    l_g_adv = loss_g(f_logits)
    l_aux_g = bce_logits(aux(f_gen), 1.0) if use_aux else None
    total = loss_g_total(l_g_adv, l_aux_g, state.lambda_aux) if l_aux_g is not None else l_g_adv
    l_fm = feature_matching_loss(real_feats, fake_feats)
    if state.lambda_fm:
        total = total + l_fm * state.lambda_fm
    l_lgcl = 0.0
    if lgcl is not None:
        l_lgcl = float(lgcl.data)
        if settings.lgcl_on and state.lambda_lgcl:
            total = total + lgcl * state.lambda_lgcl
    _finite("generator loss", total, None)
    total.backward()
    system.opt_g.step()
    system.opt_d.zero_grad()
    system.ema.update(G.named_parameters())

    return RoundMetrics(
        L_G=float(total.data), L_D=l_d, L_FM=float(l_fm.data), L_LGCL=l_lgcl,
        d_acc_real=acc_r, d_acc_fake=acc_f, L_G_adv=float(l_g_adv.data), L_aux=l_aux)
