"""Training objectives: GAE, clipped PPO surrogate, symmetric InfoNCE,
imitation cross-entropy, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1  # contrastive alignment
    lambda2: float = 0.5  # imitation supervision
    value_coef: float = 0.5
    entropy_coef: float = 0.004
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    infonce_tau: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "value_coef", "entropy_coef"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss.{name}: must be >= 0")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("loss.clip_epsilon: must be in (0, 1)")
        if not 0 <= self.gamma <= 1:
            raise ValueError("loss.gamma: must be in [0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("loss.gae_lambda: must be in [0, 1]")
        if self.infonce_tau <= 0:
            raise ValueError("loss.infonce_tau: must be > 0")


def gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns along the leading (time) axis.

    Extra trailing axes are independent streams (e.g. one per environment).
    ``dones[t]`` marks that the episode ended at step t, so nothing after t
    leaks into step t.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("gae: rewards, values and dones must have equal shapes")
    n = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    next_adv = np.zeros_like(rewards[0]) if n else 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean() if adv.size else adv
    return (adv - adv.mean()) / (adv.std() + eps)


def ppo_clip_loss(new_logprobs: Tensor, old_logprobs, advantages, epsilon: float,
                  normalize_advantages: bool = True) -> Tensor:
    """Negated clipped surrogate ``-mean(min(r A, clip(r, 1-eps, 1+eps) A))``."""
    adv = np.asarray(advantages, dtype=np.float64)
    if normalize_advantages:
        adv = normalize(adv)
    adv_t = Tensor(adv.astype(np.float32))
    ratio = T.exp(new_logprobs - Tensor(np.asarray(old_logprobs, dtype=np.float32)))
    unclipped = ratio * adv_t
    clipped = T.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv_t
    return -T.mean(T.minimum(unclipped, clipped))


def _cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=-1)
    n = logits.shape[0]
    return -T.mean(logp[np.arange(n), targets])


def infonce_loss(v: Tensor, t: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarities; matched pairs on the diagonal."""
    if v.shape != t.shape or v.ndim != 2:
        raise ValueError(f"infonce: expected two [N, d] tensors, got {v.shape} and {t.shape}")
    vn = T.l2_normalize(v, axis=-1)
    tn = T.l2_normalize(t, axis=-1)
    logits = T.matmul(vn, T.transpose(tn)) * (1.0 / tau)
    diag = np.arange(v.shape[0])
    image_to_text = _cross_entropy_rows(logits, diag)
    text_to_image = _cross_entropy_rows(T.transpose(logits), diag)
    return (image_to_text + text_to_image) * 0.5


def imitation_loss(logits: Tensor, oracle_actions) -> Tensor:
    targets = np.asarray(oracle_actions, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ValueError("imitation: oracle action id out of range")
    return _cross_entropy_rows(logits, targets)


def entropy(logits: Tensor) -> Tensor:
    """Mean policy entropy over the batch."""
    logp = T.log_softmax(logits, axis=-1)
    p = T.exp(logp)
    return -T.mean(T.tsum(p * logp, axis=-1))


def value_mse(values: Tensor, returns) -> Tensor:
    diff = values - Tensor(np.asarray(returns, dtype=np.float32))
    return T.mean(diff * diff)


@dataclass
class PPOTerms:
    policy: Tensor  # ppo_clip_loss
    value: Tensor  # value MSE
    entropy: Tensor


def total_loss(ppo_terms: PPOTerms, infonce: Tensor | None, imitation: Tensor | None,
               weights: LossWeights) -> Tensor:
    """PPO + value_coef*V - entropy_coef*H + lambda1*InfoNCE + lambda2*imitation.

    A term whose weight is 0 may be passed as None.
    """
    terms = [ppo_terms.policy, ppo_terms.value, ppo_terms.entropy, infonce, imitation]
    for term in terms:
        if term is not None and not math.isfinite(float(term.data)):
            raise T.NumericError("non-finite loss term")
    total = ppo_terms.policy + ppo_terms.value * weights.value_coef - ppo_terms.entropy * weights.entropy_coef
    if weights.lambda1:
        if infonce is None:
            raise ValueError("total_loss: lambda1 > 0 but no InfoNCE term")
        total = total + infonce * weights.lambda1
    if weights.lambda2:
        if imitation is None:
            raise ValueError("total_loss: lambda2 > 0 but no imitation term")
        total = total + imitation * weights.lambda2
    return total
