import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdit_lab import metrics as M
from pdit_lab.metrics import (MetricsRecord, MetricsWriter, convergence_step, population_variance, read_metrics,
                              stability_ratio, steps_to_threshold, variance_reduction)


def series_with_variance(var, n=1000):
    # +-sqrt(var) alternating has population variance exactly var
    s = math.sqrt(var)
    return [s if i % 2 else -s for i in range(n)]


def test_stability_ratio_examples():
    a = [0.0, 1.0, 0.0, 1.0]
    assert stability_ratio(a, a) == 1.0
    assert stability_ratio(series_with_variance(0.5), series_with_variance(0.29)) == pytest.approx(0.5 / 0.29)
    assert round(0.5 / 0.29, 3) == 1.724
    assert M.PAPER_STABILITY_RATIO == 1.73


def test_stability_ratio_errors():
    with pytest.raises(ZeroDivisionError):
        stability_ratio([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        stability_ratio([1.0], [0.0, 1.0])


def test_variance_reduction_examples():
    a = [0.0, 1.0, 1.0, 0.0]
    assert variance_reduction(a, a) == 0.0
    assert variance_reduction(series_with_variance(1.0), series_with_variance(0.58)) == pytest.approx(42.0)
    with pytest.raises(ZeroDivisionError):
        variance_reduction([1.0, 1.0], [0.0, 1.0])


finite = st.floats(min_value=-100, max_value=100, allow_nan=False)
series = st.lists(finite, min_size=2, max_size=30).filter(lambda s: population_variance(s) > 1e-6)


@settings(max_examples=200, deadline=None)
@given(series, series)
def test_ratio_symmetry_and_reduction_identity(a, b):
    s = stability_ratio(a, b)
    assert s * stability_ratio(b, a) == pytest.approx(1.0, rel=1e-9)
    assert variance_reduction(a, b) == pytest.approx(100 * (1 - 1 / s), rel=1e-9, abs=1e-9)


def test_population_variance():
    assert population_variance([1.0, 3.0]) == 1.0
    assert population_variance([]) == 0.0
    x = np.random.default_rng(0).normal(size=50)
    assert population_variance(x) == pytest.approx(np.var(x))


def test_convergence_step():
    steps = [1000 * (i + 1) for i in range(30)]
    rates = [min(1.0, 0.05 * i) for i in range(30)]
    hist = list(zip(steps, rates))
    trailing = [np.mean(rates[i - 9:i + 1]) for i in range(9, 30)]
    final = trailing[-1]
    first = next(i for i, m in enumerate(trailing) if m >= 0.95 * final)
    assert convergence_step(hist) == steps[first + 9]
    assert convergence_step([(i, 0.0) for i in range(12)]) is M.NOT_CONVERGED
    with pytest.raises(ValueError):
        convergence_step([(0, 1.0)] * 9)
    assert M.PAPER_CONVERGENCE_STEPS == 160_000


def test_steps_to_threshold():
    assert steps_to_threshold([(10, 0.5), (20, 0.81), (30, 0.7)], 0.8) == 20
    assert math.isinf(steps_to_threshold([(10, 0.5)], 0.8))


def make_record(step, **kw):
    base = dict(env_step=step, update_index=step // 10, mean_reward=0.25, success_rate=0.25,
                reward_variance=0.1875, loss_ppo=-0.01, loss_value=0.3, loss_entropy=1.9, loss_infonce=2.1,
                loss_imitation=1.8, loss_total=1.2345678901234567, approx_kl=1e-3, grad_norm_thetaP=0.5,
                grad_norm_thetaD=0.7)
    base.update(kw)
    return MetricsRecord(**base)


def test_jsonl_roundtrip():
    buf = io.StringIO()
    w = MetricsWriter(buf)
    recs = [make_record(10), make_record(20, wall_time=3.25), make_record(30, loss_total=1e-300)]
    for r in recs:
        w.write(r)
    assert read_metrics(buf.getvalue().splitlines()) == recs


def test_writer_enforces_order_and_variance():
    w = MetricsWriter(io.StringIO())
    w.write(make_record(10))
    with pytest.raises(ValueError):
        w.write(make_record(10))
    with pytest.raises(ValueError):
        w.write(make_record(20, reward_variance=-1.0))


def test_unknown_field_rejected():
    with pytest.raises(ValueError):
        MetricsRecord.from_json('{"env_step": 1, "bogus": 2}')


def test_grad_norm():
    assert M.grad_norm([np.array([3.0]), np.array([[4.0]])]) == 5.0
