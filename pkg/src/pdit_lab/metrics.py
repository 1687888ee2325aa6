"""Evaluation quantities (stability ratio, variance reduction, convergence
step) and the JSON-lines metrics log."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence, TextIO

import numpy as np

PAPER_STABILITY_RATIO = 1.73
PAPER_CONVERGENCE_STEPS = 160_000
PAPER_VARIANCE_REDUCTION = 42.0
PAPER_MEAN_REWARD = (0.27, 0.36)


@dataclass
class MetricsRecord:
    env_step: int
    update_index: int
    mean_reward: float
    success_rate: float
    reward_variance: float
    loss_ppo: float
    loss_value: float
    loss_entropy: float
    loss_infonce: float
    loss_imitation: float
    loss_total: float
    approx_kl: float
    grad_norm_thetaP: float
    grad_norm_thetaD: float
    wall_time: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        raw = json.loads(line)
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown metrics fields: {sorted(unknown)}")
        return cls(**raw)


class MetricsWriter:
    """Append-only JSON-lines writer; enforces strictly increasing env_step."""

    def __init__(self, fh: TextIO):
        self.fh = fh
        self.last_step = -1

    def write(self, rec: MetricsRecord) -> None:
        if rec.env_step <= self.last_step:
            raise ValueError(f"env_step must increase ({rec.env_step} after {self.last_step})")
        if rec.reward_variance < 0:
            raise ValueError("reward_variance must be >= 0")
        self.fh.write(rec.to_json() + "\n")
        self.fh.flush()
        self.last_step = rec.env_step


def read_metrics(lines: Iterable[str]) -> list[MetricsRecord]:
    return [MetricsRecord.from_json(line) for line in lines if line.strip()]


def population_variance(series: Sequence[float]) -> float:
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    return float(((arr - arr.mean()) ** 2).mean())


def stability_ratio(rewards_baseline: Sequence[float], rewards_pdit: Sequence[float]) -> float:
    """Var(baseline rewards) / Var(pdit rewards), population variances."""
    if len(rewards_baseline) < 2 or len(rewards_pdit) < 2:
        raise ValueError("stability_ratio needs at least 2 rewards per series")
    denom = population_variance(rewards_pdit)
    if denom == 0:
        raise ZeroDivisionError("stability_ratio: pdit reward variance is zero")
    return population_variance(rewards_baseline) / denom


def variance_reduction(rewards_baseline: Sequence[float], rewards_pdit: Sequence[float]) -> float:
    """Percent reduction of reward variance, 100 * (1 - Var_pdit / Var_baseline)."""
    if len(rewards_baseline) < 2 or len(rewards_pdit) < 2:
        raise ValueError("variance_reduction needs at least 2 rewards per series")
    base = population_variance(rewards_baseline)
    if base == 0:
        raise ZeroDivisionError("variance_reduction: baseline reward variance is zero")
    return 100.0 * (1.0 - population_variance(rewards_pdit) / base)


NOT_CONVERGED = None


def convergence_step(history: Sequence[tuple[int, float]], window: int = 10, frac: float = 0.95):
    """First env_step whose trailing-``window`` mean success reaches
    ``frac`` times the final trailing mean.

    ``history`` is a list of (env_step, success_rate) evaluations. Returns
    ``NOT_CONVERGED`` (None) when the final mean is zero.
    """
    if len(history) < window:
        raise ValueError(f"convergence_step needs >= {window} evaluations, got {len(history)}")
    rates = np.array([r for _, r in history], dtype=np.float64)
    trailing = np.convolve(rates, np.ones(window) / window, mode="valid")
    final = trailing[-1]
    if final <= 0:
        return NOT_CONVERGED
    for i, m in enumerate(trailing):
        if m >= frac * final - 1e-12:
            return history[i + window - 1][0]
    return NOT_CONVERGED


def steps_to_threshold(history: Sequence[tuple[int, float]], threshold: float) -> float:
    """First env_step at which an evaluation reaches ``threshold`` (inf if never)."""
    for step, rate in history:
        if rate >= threshold:
            return step
    return math.inf


def grad_norm(grads: Iterable[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
