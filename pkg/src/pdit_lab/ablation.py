"""Ablation batch runner: four variants x shared seeds, one JSON report."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import AblationFlags, TrainConfig, config_to_dict
from .metrics import population_variance, stability_ratio, variance_reduction
from .trainer import train

log = logging.getLogger(__name__)

VARIANTS = {
    "full": AblationFlags(),
    "no_clip_align": AblationFlags(no_clip_align=True),
    "no_interleave": AblationFlags(no_interleave=True),
    "no_supervision": AblationFlags(no_supervision=True),
}


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    if base.arch != "pdit":
        base = replace(base, arch="pdit")
    return replace(base, ablation=VARIANTS[variant], seed=seed)


def _load_finished(run_dir: Path, config: TrainConfig) -> dict | None:
    """Reuse a finished run whose echoed config matches exactly."""
    cfg_path, eval_path = run_dir / "config.json", run_dir / "eval.json"
    if not (cfg_path.exists() and eval_path.exists()):
        return None
    try:
        if json.loads(cfg_path.read_text()) != json.loads(json.dumps(config_to_dict(config))):
            return None
        return json.loads(eval_path.read_text())
    except (OSError, json.JSONDecodeError):
        return None


def run_variant(config: TrainConfig, run_dir: Path, resume: bool = True) -> dict:
    if resume:
        done = _load_finished(run_dir, config)
        if done is not None:
            log.info("reusing finished run %s", run_dir)
            return done
    train(config, run_dir)
    return json.loads((run_dir / "eval.json").read_text())


def _safe(fn, *args):
    try:
        return fn(*args)
    except (ZeroDivisionError, ValueError):
        return None


def _median(values):
    vals = [math.inf if v is None else v for v in values]
    if not vals:
        return None
    m = float(np.median(vals))
    return None if math.isinf(m) else m


def _median_finite(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.median(vals)) if vals else None


def build_report(results: dict[str, dict[int, dict]], seeds: list[int], base: TrainConfig) -> dict:
    """Per-seed rows plus medians. ``results[variant][seed]`` is an eval.json dict.

    steps_to_threshold medians treat never-reached as +inf (reported as null).
    """
    variants = {}
    for name in VARIANTS:
        rows = []
        for seed in seeds:
            ev = results[name][seed]
            full = results["full"][seed]
            rewards = ev["trailing_episode_rewards"]
            rows.append({
                "seed": seed,
                "final_success": ev["final"]["success_rate"],
                "final_mean_reward": ev["final"]["mean_reward"],
                "convergence_step": ev["convergence_step"],
                "steps_to_threshold": ev["steps_to_threshold"],
                "reward_variance": population_variance(rewards),
                "stability_ratio_vs_full": _safe(stability_ratio, rewards, full["trailing_episode_rewards"]),
                "variance_reduction_vs_full": _safe(variance_reduction, rewards, full["trailing_episode_rewards"]),
                "env_steps": ev["env_steps"],
                "param_count": ev["param_count"],
                "arch": ev["arch"],
            })
        variants[name] = {
            "per_seed": rows,
            "median": {
                "final_success": _median_finite(r["final_success"] for r in rows),
                "convergence_step": _median(r["convergence_step"] for r in rows),
                "steps_to_threshold": _median(r["steps_to_threshold"] for r in rows),
                "reward_variance": _median_finite(r["reward_variance"] for r in rows),
                "stability_ratio_vs_full": _median_finite(r["stability_ratio_vs_full"] for r in rows),
                "variance_reduction_vs_full": _median_finite(r["variance_reduction_vs_full"] for r in rows),
            },
        }
    return {
        "seeds": seeds,
        "total_env_steps": base.total_env_steps,
        "success_threshold": base.success_threshold,
        "variance_estimator": f"population variance over the trailing {base.variance_window} training episodes",
        "stability_ratio_definition": "Var(variant rewards) / Var(full rewards), same seed",
        "variants": variants,
        "checks": directional_checks(variants),
    }


def directional_checks(variants: dict) -> dict:
    s = variants["no_interleave"]["median"]["stability_ratio_vs_full"]
    full_t = variants["full"]["median"]["steps_to_threshold"]
    nce_t = variants["no_clip_align"]["median"]["steps_to_threshold"]
    var_full = [r["reward_variance"] for r in variants["full"]["per_seed"]]
    var_stk = [r["reward_variance"] for r in variants["no_interleave"]["per_seed"]]
    wins = sum(b > a for a, b in zip(var_full, var_stk))
    return {
        "median_stability_ratio_stacked_vs_pdit": s,
        "stability_ratio_gt_1": s is not None and s > 1.0,
        "median_steps_to_threshold_full": full_t,
        "median_steps_to_threshold_no_clip_align": nce_t,
        # never reaching the threshold counts as infinitely many steps
        "alignment_not_slower": full_t is not None and (nce_t is None or full_t <= nce_t),
        "seeds_stacked_variance_higher": wins,
        "stacked_variance_higher_majority": wins > len(var_full) / 2,
    }


def run_ablation(base: TrainConfig, out_dir, n_seeds: int = 5, resume: bool = True) -> dict:
    """Train every variant on seeds base.seed .. base.seed + n_seeds - 1."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [base.seed + i for i in range(n_seeds)]
    results: dict[str, dict[int, dict]] = {name: {} for name in VARIANTS}
    for seed in seeds:
        for name in VARIANTS:
            cfg = variant_config(base, name, seed)
            log.info("ablation: %s seed %d", name, seed)
            results[name][seed] = run_variant(cfg, out / name / f"seed_{seed}", resume)
    report = build_report(results, seeds, base)
    (out / "ablation_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report
