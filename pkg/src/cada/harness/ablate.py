"""Ablation suite and the source-only vs. full adaptation comparison.

Every run lives in its own directory under the suite's output root.  A run
whose ``final_metrics.json`` already exists is read back instead of being
retrained, so an interrupted suite can simply be started again.
"""
from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from pathlib import Path

from .config import RunConfig
from .train import init_state, train

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "source_only": dict(use_target=False, enc_enabled=False, se_enabled=False, num_dec_discs=0),
    "no_enc_ada": dict(enc_enabled=False),
    "no_se_ada": dict(se_enabled=False),
    "cada_2d": dict(num_dec_discs=1),
    "cada_3d": dict(num_dec_discs=2),
    "cada_4d": dict(num_dec_discs=3),
    "full": dict(),
}
METRIC_KEYS = ("dice_cup", "dice_disc", "gamma_cdr")
RUN_FIELDS = ["variant", "seed", "shift", *METRIC_KEYS, "seconds",
              "enc_disc_changed", "dec_discs_changed", "teacher_changed"]


def variant_config(base: RunConfig, name: str, **overrides) -> RunConfig:
    """Apply a named variant's switches to ``base``.  Switches always reset to full CADA first."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    full = dict(use_target=True, enc_enabled=True, se_enabled=True, num_dec_discs=4)
    return base.replace(**{**full, **VARIANTS[name], **overrides})


def _families_changed(cfg: RunConfig, state) -> dict:
    """Compare final parameter families against a freshly initialised state."""
    fresh = init_state(cfg)
    ad, ad0 = state.adaptors, fresh.adaptors
    return {
        "enc_disc_changed": int(not ad.enc_disc.equal(ad0.enc_disc)),
        "dec_discs_changed": sum(int(not a.equal(b)) for a, b in zip(ad.dec_discs, ad0.dec_discs)),
        "teacher_changed": int(not state.teacher.equal(fresh.teacher)),
    }


def run_one(cfg: RunConfig, variant: str) -> dict:
    run_dir = Path(cfg.out)
    done = run_dir / "run_summary.json"
    if done.exists():
        return json.loads(done.read_text())
    t0 = time.time()
    result = train(cfg)
    row = {"variant": variant, "seed": cfg.seed, "shift": cfg.shift,
           **{k: getattr(result.report, k) for k in METRIC_KEYS},
           "seconds": round(time.time() - t0, 1), **_families_changed(cfg, result.state)}
    done.write_text(json.dumps(row, indent=2))
    return row


def summarize(rows: list[dict], group=("variant",)) -> list[dict]:
    """Mean and sample standard deviation of each metric per group, in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[g] for g in group), []).append(r)
    out = []
    for key, members in groups.items():
        rec = dict(zip(group, key))
        rec["n"] = len(members)
        for m in METRIC_KEYS:
            vals = [float(r[m]) for r in members]
            rec[f"{m}_mean"] = statistics.fmean(vals)
            rec[f"{m}_sd"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append(rec)
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def ablate(base: RunConfig, variants=tuple(VARIANTS), seeds=(0,), out: str | Path | None = None,
           figures: bool = True) -> list[dict]:
    """Train every variant for every seed; write ``ablation_runs.csv`` and ``ablation.csv``."""
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    root = Path(out or base.out)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in variants:
        for s in seeds:
            cfg = variant_config(base, v, seed=s, out=str(root / v / f"seed{s}"))
            log.info("ablation: %s seed %d", v, s)
            rows.append(run_one(cfg, v))
    _write_csv(root / "ablation_runs.csv", [{k: r[k] for k in RUN_FIELDS} for r in rows])
    summary = summarize(rows)
    _write_csv(root / "ablation.csv", summary)
    if figures:
        from .report import ablation_bars
        ablation_bars(summary, root / "ablation.png")
    return summary


def trend(base: RunConfig, seeds=(0, 1, 2), shifts=(1.0, 0.0), out: str | Path | None = None,
          figures: bool = True) -> dict:
    """Full adaptation vs. source-only per seed and shift magnitude.

    Writes ``trend.csv`` (one row per run) and ``trend.json`` holding, per
    shift, the mean dice_cup gap (full minus source-only) and the number of
    seeds on which full adaptation wins.
    """
    root = Path(out or base.out)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for shift in shifts:
        for s in seeds:
            for v in ("source_only", "full"):
                cfg = variant_config(base, v, seed=s, shift=shift,
                                     out=str(root / f"shift{shift:g}" / v / f"seed{s}"))
                log.info("trend: shift %g %s seed %d", shift, v, s)
                rows.append(run_one(cfg, v))
    _write_csv(root / "trend.csv", [{k: r[k] for k in RUN_FIELDS} for r in rows])
    result = {}
    for shift in shifts:
        by = {(r["variant"], r["seed"]): float(r["dice_cup"]) for r in rows if float(r["shift"]) == shift}
        gaps = [by[("full", s)] - by[("source_only", s)] for s in seeds]
        result[f"{shift:g}"] = {
            "gaps": gaps,
            "mean_gap": statistics.fmean(gaps),
            "wins": sum(g > 0 for g in gaps),
            "full_mean": statistics.fmean(by[("full", s)] for s in seeds),
            "source_only_mean": statistics.fmean(by[("source_only", s)] for s in seeds),
        }
    (root / "trend.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    if figures:
        from .report import trend_plot
        trend_plot(rows, root / "trend.png")
    return result
