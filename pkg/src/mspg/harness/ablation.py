"""The 2x2x2 component grid: APFL rules, BALANCE referee and AFE on or off."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ..apfl import RoundAborted
from .runner import Run

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ["label", "apfl", "balance", "afe", "seeds", "mean_coverage", "mean_hq_fraction",
                    "mean_quality", "successes", "aborted"]
PER_SEED_COLUMNS = ["label", "seed", "coverage", "hq_fraction", "quality", "aborted"]


def grid():
    """All eight ``(apfl, balance, afe)`` cells, full system first."""
    return [tuple(not b for b in bits) for bits in itertools.product((False, True), repeat=3)]


def label(apfl, balance, afe):
    return "+".join(n for n, on in (("apfl", apfl), ("balance", balance), ("afe", afe)) if on) or "baseline"


def run_cell(cfg, seed):
    """Train one ``(config, seed)`` to completion and evaluate it; never raises on divergence."""
    cfg = cfg.with_overrides(seed=seed)
    run = Run(cfg)
    try:
        run.run()
    except RoundAborted as exc:
        log.warning("seed %d aborted: %s", seed, exc)
        return {"coverage": 0, "hq_fraction": 0.0, "quality": 0.0, "aborted": True}
    res = run.final_evaluation()
    res["aborted"] = False
    return res


def success(res, min_coverage=7, min_hq=0.6):
    return res["coverage"] >= min_coverage and res["hq_fraction"] >= min_hq


def run_grid(cfg, seeds, jobs=1, cells=None, min_coverage=7, min_hq=0.6):
    """Returns ``(summary_rows, per_seed_rows)``; each cell uses the same seed list."""
    cells = grid() if cells is None else cells
    tasks = [(cell, s) for cell in cells for s in seeds]
    cfgs = [cfg.with_overrides(apfl=c[0], balance=c[1], afe=c[2]) for c, _ in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, cfgs, [s for _, s in tasks]))
    else:
        results = [run_cell(c, s) for c, (_, s) in zip(cfgs, tasks)]
    per_seed, summary = [], []
    for cell in cells:
        name = label(*cell)
        res = [r for (c, _), r in zip(tasks, results) if c == cell]
        for (c, s), r in zip(tasks, results):
            if c == cell:
                per_seed.append({"label": name, "seed": str(s), "coverage": str(r["coverage"]),
                                 "hq_fraction": f"{r['hq_fraction']:.6g}", "quality": f"{r['quality']:.6g}",
                                 "aborted": str(int(r["aborted"]))})
        summary.append({
            "label": name, "apfl": str(int(cell[0])), "balance": str(int(cell[1])), "afe": str(int(cell[2])),
            "seeds": str(len(res)),
            "mean_coverage": f"{np.mean([r['coverage'] for r in res]):.4g}",
            "mean_hq_fraction": f"{np.mean([r['hq_fraction'] for r in res]):.4g}",
            "mean_quality": f"{np.mean([r['quality'] for r in res]):.4g}",
            "successes": str(sum(success(r, min_coverage, min_hq) for r in res)),
            "aborted": str(sum(r["aborted"] for r in res)),
        })
    return summary, per_seed
