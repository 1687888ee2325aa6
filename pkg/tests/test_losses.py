import math

import numpy as np
import pytest

from pdit_lab import tensor as T
from pdit_lab.losses import (LossWeights, PPOTerms, entropy, gae, imitation_loss, infonce_loss, ppo_clip_loss,
                             total_loss, value_mse)


def gae_oracle(rewards, values, dones, bootstrap, gamma, lam):
    """Brute force: A_t = sum_k (gamma*lam)^k delta_{t+k}, truncated at the first done."""
    n = len(rewards)
    nxt = list(values[1:]) + [bootstrap]
    delta = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(n)]
    adv = []
    for t in range(n):
        total = 0.0
        for k in range(n - t):
            total += (gamma * lam) ** k * delta[t + k]
            if dones[t + k]:
                break
        adv.append(total)
    return np.array(adv)


def infonce_oracle(v, t, tau):
    """Double-loop symmetric InfoNCE on cosine similarities, float64."""
    n = len(v)
    vn = [vi / math.sqrt(sum(x * x for x in vi)) for vi in v]
    tn = [ti / math.sqrt(sum(x * x for x in ti)) for ti in t]
    sim = [[sum(a * b for a, b in zip(vn[i], tn[j])) / tau for j in range(n)] for i in range(n)]
    i2t = sum(-sim[i][i] + math.log(sum(math.exp(sim[i][j]) for j in range(n))) for i in range(n)) / n
    t2i = sum(-sim[j][j] + math.log(sum(math.exp(sim[i][j]) for i in range(n))) for j in range(n)) / n
    return 0.5 * (i2t + t2i)


def random_gae_case(rng):
    n = int(rng.integers(1, 33))
    return (rng.normal(size=n), rng.normal(size=n), rng.random(n) < 0.15, float(rng.normal()),
            float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.0, 1.0)))


def test_gae_matches_bruteforce_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r, v, d, boot, g, lam = random_gae_case(rng)
        adv, ret = gae(r, v, d, boot, g, lam)
        np.testing.assert_allclose(adv, gae_oracle(r, v, d, boot, g, lam), atol=1e-5)
        np.testing.assert_allclose(ret, adv + v, atol=1e-12)


def test_gae_examples():
    adv, _ = gae([1.0], [0.3], [True], 5.0, 0.99, 0.95)
    assert adv[0] == pytest.approx(0.7)
    r, v = np.array([0.0, 1.0, 0.5]), np.array([0.2, 0.4, 0.1])
    adv, _ = gae(r, v, [False, False, False], 0.3, 0.9, 0.0)
    np.testing.assert_allclose(adv, r + 0.9 * np.array([0.4, 0.1, 0.3]) - v, atol=1e-12)


def test_gae_no_leak_across_done():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=10), rng.normal(size=10)
    d = np.zeros(10, bool)
    d[4] = True
    whole, _ = gae(r, v, d, 0.7, 0.99, 0.95)
    first, _ = gae(r[:5], v[:5], d[:5], 123.0, 0.99, 0.95)  # bootstrap ignored after done
    second, _ = gae(r[5:], v[5:], d[5:], 0.7, 0.99, 0.95)
    np.testing.assert_allclose(whole, np.concatenate([first, second]), atol=1e-12)


def test_gae_multi_env_streams():
    rng = np.random.default_rng(2)
    r, v, d = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), rng.random((8, 3)) < 0.2
    boot = rng.normal(size=3)
    adv, _ = gae(r, v, d, boot, 0.99, 0.95)
    for j in range(3):
        np.testing.assert_allclose(adv[:, j], gae_oracle(r[:, j], v[:, j], d[:, j], boot[j], 0.99, 0.95), atol=1e-9)


def lp(values):
    return T.Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)


def test_ppo_clip_closed_form():
    new = lp([math.log(1.5)])
    loss = ppo_clip_loss(new, [0.0], [1.0], 0.2, normalize_advantages=False)
    assert float(loss.data) == pytest.approx(-1.2, abs=1e-6)
    new = lp([math.log(0.5)])
    loss = ppo_clip_loss(new, [0.0], [-1.0], 0.2, normalize_advantages=False)
    assert float(loss.data) == pytest.approx(0.8, abs=1e-6)


def test_ppo_ratio_one_gives_mean_advantage():
    adv = np.array([0.3, -1.2, 2.0, 0.1])
    loss = ppo_clip_loss(lp([-1.0, -2.0, -0.5, -3.0]), [-1.0, -2.0, -0.5, -3.0], adv, 0.2,
                         normalize_advantages=False)
    assert float(loss.data) == pytest.approx(-adv.mean(), abs=1e-6)


@pytest.mark.parametrize("ratio,adv", [(1.5, 1.0), (0.5, -1.0)])
def test_clip_region_gradient_is_zero(ratio, adv):
    new = lp([math.log(ratio)])
    with T.Tape() as tape:
        loss = ppo_clip_loss(new, [0.0], [adv], 0.2, normalize_advantages=False)
    T.backward(loss, tape, [new])
    assert new.grad[0] == 0.0


def test_unclipped_gradient_nonzero():
    new = lp([math.log(1.1)])
    with T.Tape() as tape:
        loss = ppo_clip_loss(new, [0.0], [1.0], 0.2, normalize_advantages=False)
    T.backward(loss, tape, [new])
    assert new.grad[0] == pytest.approx(-1.1, abs=1e-6)


def test_infonce_uniform_is_ln_n():
    v = T.Tensor(np.ones((4, 3), np.float32))
    assert float(infonce_loss(v, v, 0.1).data) == pytest.approx(math.log(4), abs=1e-6)
    one = T.Tensor(np.array([[0.3, -0.2]], np.float32))
    assert float(infonce_loss(one, one, 0.1).data) == pytest.approx(0.0, abs=1e-6)


def test_infonce_matches_double_loop_100():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, d = int(rng.integers(2, 9)), int(rng.integers(2, 6))
        v, t = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        got = float(infonce_loss(T.Tensor(v.astype(np.float32)), T.Tensor(t.astype(np.float32)), 0.1).data)
        want = infonce_oracle(v.astype(np.float32).astype(np.float64), t.astype(np.float32).astype(np.float64), 0.1)
        assert abs(got - want) <= 1e-6 * max(1.0, abs(want)), (got, want)


def test_infonce_nonnegative_and_zero_norm():
    rng = np.random.default_rng(4)
    for _ in range(20):
        v, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert float(infonce_loss(T.Tensor(v.astype(np.float32)), T.Tensor(t.astype(np.float32)), 0.1).data) >= 0
    with pytest.raises(ValueError):
        infonce_loss(T.Tensor(np.zeros((2, 3), np.float32)), T.Tensor(np.ones((2, 3), np.float32)), 0.1)


def test_imitation_and_entropy_closed_form():
    logits = T.Tensor(np.zeros((3, 7), np.float32))
    assert float(imitation_loss(logits, [0, 3, 6]).data) == pytest.approx(math.log(7), abs=1e-6)
    assert float(entropy(logits).data) == pytest.approx(math.log(7), abs=1e-6)
    sat = np.zeros((2, 7), np.float32)
    sat[0, 2] = sat[1, 5] = 20.0
    assert float(imitation_loss(T.Tensor(sat), [2, 5]).data) < 1e-6


def test_imitation_is_mean_of_rows():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(6, 7)).astype(np.float32)
    y = rng.integers(0, 7, size=6)
    rows = [float(imitation_loss(T.Tensor(logits[i:i + 1]), y[i:i + 1]).data) for i in range(6)]
    assert float(imitation_loss(T.Tensor(logits), y).data) == pytest.approx(np.mean(rows), abs=1e-6)


def _terms(seed=6):
    rng = np.random.default_rng(seed)
    logits = T.Tensor(rng.normal(size=(5, 7)).astype(np.float32))
    values = T.Tensor(rng.normal(size=5).astype(np.float32))
    new = T.log_softmax(logits)[np.arange(5), rng.integers(0, 7, size=5)]
    ppo = ppo_clip_loss(new, new.data - 0.05, rng.normal(size=5), 0.2)
    terms = PPOTerms(ppo, value_mse(values, rng.normal(size=5)), entropy(logits))
    nce = infonce_loss(T.Tensor(rng.normal(size=(5, 3)).astype(np.float32)),
                       T.Tensor(rng.normal(size=(5, 3)).astype(np.float32)), 0.1)
    return terms, nce, imitation_loss(logits, rng.integers(0, 7, size=5))


def test_total_loss_composition():
    terms, nce, imi = _terms()
    w = LossWeights()
    total = float(total_loss(terms, nce, imi, w).data)
    expect = (float(terms.policy.data) + 0.5 * float(terms.value.data) - 0.004 * float(terms.entropy.data)
              + 0.1 * float(nce.data) + 0.5 * float(imi.data))
    assert total == pytest.approx(expect, abs=1e-5)
    pure = float(total_loss(terms, nce, imi, LossWeights(lambda1=0, lambda2=0)).data)
    assert pure == pytest.approx(float(total_loss(terms, None, None, LossWeights(lambda1=0, lambda2=0)).data))
    doubled = float(total_loss(terms, nce, imi, LossWeights(lambda1=0.2)).data)
    assert doubled - total == pytest.approx(0.1 * float(nce.data), abs=1e-5)


def test_total_loss_rejects_nan():
    terms, nce, imi = _terms()
    bad = T.Tensor(np.float32(np.nan))
    with pytest.raises(T.NumericError):
        total_loss(terms, bad, imi, LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-0.1)
    with pytest.raises(ValueError):
        LossWeights(clip_epsilon=1.0)
    with pytest.raises(ValueError):
        LossWeights(gamma=1.5)
    with pytest.raises(ValueError):
        LossWeights(infonce_tau=0.0)


def test_total_gradient_reaches_both_groups():
    from pdit_lab.gradcheck import model_loss_fn
    f, params = model_loss_fn("pdit", hidden_dim=8, seed=1)
    with T.Tape() as tape:
        loss = f()
    T.backward(loss, tape, params.tensors.values())
    for names in (params.perception_names(), params.decision_names()):
        assert sum(float((params[n].grad ** 2).sum()) for n in names) > 0
