"""Build a run from a config, drive it round by round, persist and resume it."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict

import numpy as np

from .. import tensor as T
from ..apfl import (GanSystem, MonitorConfig, RoundAborted, RoundMetrics, StageConfig, TrainerState,
                    apply_adjustments, monitor_update, stage_transition, steplr_update, train_round)
from ..balance import BalanceConfig, Balancer, Transition
from ..models import AuxDiscriminator, Discriminator, Generator
from ..nn import EMA, SGD, AdamW
from . import checkpoint
from .config import RunConfig, parse, serialize
from .data import RingDataset, make_dataset, mode_coverage

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["round", "stage", "L_G", "L_D", "L_FM", "L_LGCL", "d_acc_real", "d_acc_fake",
                   "eta_G", "eta_D", "lambda_aux", "balance_action", "reward", "quality", "coverage"]
BALANCE_COLUMNS = ["round"] + [f"s{i}" for i in range(8)] + ["action", "reward", "epsilon", "td_loss"]
SCHEDULE_COLUMNS = ["round", "eta_G", "eta_D", "lambda_aux", "balance_action", "triggers"]
STREAMS = ("init", "data", "latent", "noise", "balance", "balance_net", "eval")


def fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".9g")


class Run:
    """Everything needed to train one configuration; one instance per process."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        seqs = np.random.SeedSequence(cfg.seed).spawn(len(STREAMS))
        self.rngs = {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(STREAMS, seqs)}
        self.dataset = make_dataset(cfg)
        kind = "ring" if isinstance(self.dataset, RingDataset) else "image"
        init = self.rngs["init"]
        noise = self.rngs["noise"]
        dema_kwargs = dict(scales=cfg.scales, windows=cfg.windows, n_context=cfg.n_context,
                           tau=cfg.tau, dropout=cfg.dropout)
        self.G = Generator(init, kind=kind, latent_dim=cfg.latent_dim, channels=cfg.channels,
                           spatial=cfg.spatial, n_blocks=cfg.n_blocks, fusion=cfg.fusion,
                           hidden=cfg.g_hidden, dema_kwargs=dema_kwargs, noise_rng=noise)
        self.D = Discriminator(init, kind=kind, hidden=cfg.d_hidden, dropout=cfg.dropout, noise_rng=noise)
        self.aux = AuxDiscriminator(self.G.feature_shape, self.D.early_dim, init)
        d_params = self.D.parameters() + self.aux.parameters()
        if cfg.optimizer == "adamw":
            kw = dict(betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
            opt_g = AdamW(self.G.parameters(), lr=cfg.eta_g, **kw)
            opt_d = AdamW(d_params, lr=cfg.eta_d, **kw)
        else:
            opt_g, opt_d = SGD(self.G.parameters(), cfg.eta_g), SGD(d_params, cfg.eta_d)
        ema = EMA(self.G.named_parameters(), cfg.ema_decay)
        self.system = GanSystem(self.G, self.D, self.aux, opt_g, opt_d, ema,
                                latent_rng=self.rngs["latent"], noise_rng=noise,
                                afe=cfg.afe, printed_aux=cfg.printed_aux)
        self.state = TrainerState(eta_g=cfg.eta_g, eta_d=cfg.eta_d, gamma=cfg.gamma, step=cfg.step,
                                  lambda_aux=cfg.lambda_aux, lambda_fm=cfg.lambda_fm,
                                  lambda_lgcl=cfg.lambda_lgcl, total_rounds=cfg.rounds, seed=cfg.seed)
        self.stage_cfg = StageConfig(early_frac=cfg.early_frac, late_frac=cfg.late_frac,
                                     smooth_target=cfg.smooth_target, instance_noise=cfg.instance_noise,
                                     d_steps_middle=cfg.d_steps_middle, d_steps_late=cfg.d_steps_middle,
                                     late_reg=cfg.late_reg)
        self.monitor_cfg = MonitorConfig(window=cfg.monitor_window, strong_d=cfg.strong_d,
                                         weak_g_dacc=cfg.weak_g_dacc,
                                         stagnation_slope=cfg.stagnation_slope,
                                         plateau_tol=cfg.plateau_tol, lambda_fm_cap=cfg.lambda_fm_cap)
        bcfg = BalanceConfig(batch=cfg.dqn_batch, warmup=cfg.dqn_warmup, capacity=cfg.dqn_capacity,
                             gamma=cfg.dqn_gamma, lr=cfg.dqn_lr, sync_every=cfg.dqn_sync,
                             eps_start=cfg.eps_start, eps_end=cfg.eps_end,
                             eps_decay_frac=cfg.eps_decay_frac, reward=cfg.reward,
                             lr_min=cfg.balance_lr_min, lr_max=cfg.balance_lr_max)
        self.balancer = Balancer(bcfg, self.rngs["balance"], self.rngs["balance_net"])
        self.eval_z = self.rngs["eval"].standard_normal((cfg.eval_samples, cfg.latent_dim))
        self.last_quality = (0.0, 0)
        self.rows = []
        self.balance_rows = []
        self.schedule_rows = []

    # -- evaluation -----------------------------------------------------------------
    def generate(self, z=None, use_ema=False, n=None):
        """Samples from the live (or EMA) generator in eval mode, as numpy."""
        if z is None:
            z = self.eval_z if n is None else np.random.default_rng(0).standard_normal((n, self.cfg.latent_dim))
        backup = None
        if use_ema:
            backup = self.G.state_dict()
            self.G.load_state_dict(self.system.ema.shadow)
        self.G.eval()
        try:
            with T.no_grad():
                out, _, _ = self.G(T.tensor(z))
        finally:
            self.G.train()
            if backup is not None:
                self.G.load_state_dict(backup)
        return out.data.astype(np.float64)

    def evaluate(self, use_ema=False, z=None):
        return self.dataset.quality(self.generate(z=z, use_ema=use_ema))

    # -- main loop -----------------------------------------------------------------------
    def run(self, stop_after=None, on_row=None):
        """Train until ``cfg.rounds`` (or ``stop_after``); returns the list of metric rows."""
        cfg, state = self.cfg, self.state
        last = cfg.rounds if stop_after is None else min(stop_after, cfg.rounds)
        while state.round < last:
            state.round += 1
            r = state.round
            stage_transition(state, self.stage_cfg)
            used = (state.eta_g, state.eta_d, state.lambda_aux)
            batch = self.dataset.sample(cfg.batch, self.rngs["data"])
            try:
                m = train_round(self.system, state, batch, self.stage_cfg)
            except RoundAborted as exc:
                row = {c: "nan" for c in METRICS_COLUMNS}
                row.update(round=str(r), stage="aborted", eta_G=fmt(used[0]), eta_D=fmt(used[1]),
                           lambda_aux=fmt(used[2]), balance_action="-1")
                self.rows.append(row)
                if on_row:
                    on_row(row)
                raise RoundAborted(f"round {r}: {exc}", row) from None
            if r == 1 or r % cfg.eval_every == 0 or r == cfg.rounds:
                q, cov = self.evaluate()
                self.last_quality = (float(q), int(cov))
            m.quality, m.coverage = self.last_quality
            triggers = []
            if cfg.apfl:
                adj = monitor_update(state, m, self.monitor_cfg)
                apply_adjustments(state, adj, self.monitor_cfg)
                triggers = [a.kind for a in adj]
            if cfg.steplr_every_round:
                state.eta_g = steplr_update(state.eta_g, state.gamma, state.step)
                state.eta_d = steplr_update(state.eta_d, state.gamma, state.step)
            action, reward, eps, td = -1, 0.0, float("nan"), float("nan")
            if cfg.balance:
                action, reward, eps, td = self.balancer.step(state, m, done=(r == cfg.rounds))
                self.balance_rows.append(
                    [str(r)] + [fmt(v) for v in self.balancer.prev_obs] +
                    [str(action), fmt(reward), fmt(eps), fmt(td)])
            row = {
                "round": str(r), "stage": state.stage, "L_G": fmt(m.L_G), "L_D": fmt(m.L_D),
                "L_FM": fmt(m.L_FM), "L_LGCL": fmt(m.L_LGCL), "d_acc_real": fmt(m.d_acc_real),
                "d_acc_fake": fmt(m.d_acc_fake), "eta_G": fmt(used[0]), "eta_D": fmt(used[1]),
                "lambda_aux": fmt(used[2]), "balance_action": str(action), "reward": fmt(reward),
                "quality": fmt(m.quality), "coverage": fmt(m.coverage),
            }
            self.rows.append(row)
            self.schedule_rows.append({
                "round": str(r), "eta_G": row["eta_G"], "eta_D": row["eta_D"],
                "lambda_aux": row["lambda_aux"], "balance_action": row["balance_action"],
                "triggers": "|".join(triggers)})
            if on_row:
                on_row(row)
        return self.rows

    @property
    def finished(self):
        return self.state.round >= self.cfg.rounds

    # -- persistence ---------------------------------------------------------------------
    def _arrays(self):
        arrays = {}
        for prefix, mod in (("G", self.G), ("D", self.D), ("aux", self.aux)):
            for k, p in mod.named_parameters():
                arrays[f"{prefix}.{k}"] = p.data
        for k, v in self.system.ema.shadow.items():
            arrays[f"ema.{k}"] = v
        for name, opt in (("optG", self.system.opt_g), ("optD", self.system.opt_d),
                          ("optQ", self.balancer.qnet.optimizer)):
            st = opt.state()
            for i, (m, v) in enumerate(zip(st["m"], st["v"])):
                arrays[f"{name}.m.{i:04d}"] = m
                arrays[f"{name}.v.{i:04d}"] = v
        q = self.balancer.qnet
        for k, p in q.online.named_parameters():
            arrays[f"Q.online.{k}"] = p.data
        for k, v in q.target_state().items():
            arrays[f"Q.target.{k}"] = v
        items = self.balancer.buffer.items()
        if items:
            arrays["buffer.s"] = np.stack([t.state for t in items])
            arrays["buffer.a"] = np.array([t.action for t in items], dtype=np.float64)
            arrays["buffer.r"] = np.array([t.reward for t in items], dtype=np.float64)
            arrays["buffer.s2"] = np.stack([t.next_state for t in items])
            arrays["buffer.done"] = np.array([t.done for t in items], dtype=np.float64)
        return arrays

    def _header(self):
        b = self.balancer
        return {
            "config": serialize(self.cfg),
            "round": self.state.round,
            "trainer_state": self.state.to_dict(),
            "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "optimizers": {n: {"step": o.step_count, "lr": o.lr} for n, o in
                           (("optG", self.system.opt_g), ("optD", self.system.opt_d),
                            ("optQ", b.qnet.optimizer))},
            "balancer": {
                "prev_obs": None if b.prev_obs is None else [float(x) for x in b.prev_obs],
                "prev_action": b.prev_action,
                "prev_metrics": None if b.prev_metrics is None else asdict(b.prev_metrics),
                "updates": b.qnet.updates,
                "buffer_len": len(b.buffer),
            },
            "last_quality": list(self.last_quality),
            "rows": {"metrics": self.rows, "balance": self.balance_rows, "schedule": self.schedule_rows},
        }

    def save_checkpoint(self, path):
        return checkpoint.save(path, self._header(), self._arrays())

    def checkpoint_bytes(self):
        return checkpoint.encode(self._header(), self._arrays())

    @classmethod
    def from_checkpoint(cls, path):
        header, arrays = checkpoint.load(path)
        run = cls(parse(header["config"]))
        run._restore(header, arrays)
        return run

    def _restore(self, header, arrays):
        for prefix, mod in (("G", self.G), ("D", self.D), ("aux", self.aux)):
            mod.load_state_dict({k: arrays[f"{prefix}.{k}"] for k, _ in mod.named_parameters()})
        for k in self.system.ema.shadow:
            self.system.ema.shadow[k] = arrays[f"ema.{k}"].copy()
        for name, opt in (("optG", self.system.opt_g), ("optD", self.system.opt_d),
                          ("optQ", self.balancer.qnet.optimizer)):
            meta = header["optimizers"][name]
            n = len(opt.state()["m"])
            opt.load_state({"step": meta["step"], "lr": meta["lr"],
                            "m": [arrays[f"{name}.m.{i:04d}"] for i in range(n)],
                            "v": [arrays[f"{name}.v.{i:04d}"] for i in range(n)]})
        q = self.balancer.qnet
        q.online.load_state_dict({k: arrays[f"Q.online.{k}"] for k, _ in q.online.named_parameters()})
        q.load_target_state({k: arrays[f"Q.target.{k}"] for k in q.target_state()})
        bh = header["balancer"]
        q.updates = bh["updates"]
        if bh["buffer_len"]:
            s, a, r = arrays["buffer.s"], arrays["buffer.a"], arrays["buffer.r"]
            s2, d = arrays["buffer.s2"], arrays["buffer.done"]
            for i in range(len(a)):
                self.balancer.buffer.append(Transition(s[i].copy(), int(a[i]), float(r[i]),
                                                       s2[i].copy(), bool(d[i])))
        b = self.balancer
        b.prev_obs = None if bh["prev_obs"] is None else np.array(bh["prev_obs"], dtype=np.float64)
        b.prev_action = bh["prev_action"]
        b.prev_metrics = None if bh["prev_metrics"] is None else RoundMetrics(**bh["prev_metrics"])
        self.state = TrainerState.from_dict(header["trainer_state"])
        for k, st in header["rngs"].items():
            self.rngs[k].bit_generator.state = st
        self.last_quality = (float(header["last_quality"][0]), int(header["last_quality"][1]))
        self.rows = list(header["rows"]["metrics"])
        self.balance_rows = list(header["rows"]["balance"])
        self.schedule_rows = list(header["rows"]["schedule"])

    # -- final evaluation ------------------------------------------------------------------
    def final_evaluation(self, use_ema=True, n=None):
        """Coverage and quality of ``n`` samples (EMA weights by default)."""
        z = None
        if n is not None:
            z = np.random.default_rng(self.cfg.seed).standard_normal((n, self.cfg.latent_dim))
        x = self.generate(z=z, use_ema=use_ema)
        if isinstance(self.dataset, RingDataset):
            cov, frac = mode_coverage(x, self.dataset)
            return {"coverage": cov, "hq_fraction": frac, "quality": cov / self.dataset.modes * frac}
        q, cov = self.dataset.quality(x)
        return {"coverage": cov, "hq_fraction": float("nan"), "quality": float(q)}


# -- file sinks ------------------------------------------------------------------------------
def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] for c in columns] if isinstance(row, dict) else row)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row[c] for c in columns])
    return buf.getvalue()


def replay_schedule(cfg):
    """Re-run training without persisting anything; returns the schedule rows."""
    run = Run(cfg)
    try:
        run.run()
    except RoundAborted:
        pass
    return run.schedule_rows


def first_divergence(rows_a, rows_b, columns=("eta_G", "eta_D", "lambda_aux", "balance_action")):
    """First round where two row lists disagree on ``columns`` (None if identical)."""
    for a, b in zip(rows_a, rows_b):
        if any(a[c] != b[c] for c in columns):
            return int(a["round"])
    if len(rows_a) != len(rows_b):
        return min(len(rows_a), len(rows_b)) + 1
    return None


def finite_rows(rows):
    return all(math.isfinite(float(r[c])) for r in rows for c in METRICS_COLUMNS
               if c not in ("round", "stage", "balance_action"))


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
