"""Finite-difference checks for every differentiable op and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .env import EnvConfig, reset
from .losses import LossWeights, PPOTerms, entropy, imitation_loss, infonce_loss, ppo_clip_loss, total_loss, value_mse
from .model import ModelConfig, forward, init_params

TOLERANCE = 1e-3
# The full model has ~400 ReLU pre-activations per sample in its conv stem;
# a 1e-3 nudge to a stem bias moves all of them and some cross zero, which
# corrupts the difference quotient (not the gradient). The float64 oracle
# keeps roundoff negligible at a much smaller step.
MODEL_STEP = 1e-6


def _leaf(rng, *shape, positive=False):
    arr = rng.uniform(0.5, 1.5, size=shape) if positive else rng.normal(size=shape)
    return T.Tensor(arr.astype(np.float32), requires_grad=True)


def _case_builders() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], T.Tensor], list[T.Tensor]]]]:
    def unary(fn, positive=False, shape=(3, 4)):
        def build(rng):
            x = _leaf(rng, *shape, positive=positive)
            w = T.Tensor(rng.normal(size=shape).astype(np.float32))
            return (lambda: T.tsum(fn(x) * w)), [x]
        return build

    def binary(fn, sa=(3, 4), sb=(3, 4), positive_b=False):
        def build(rng):
            a, b = _leaf(rng, *sa), _leaf(rng, *sb, positive=positive_b)
            w = T.Tensor(rng.normal(size=np.broadcast_shapes(sa, sb)).astype(np.float32))
            return (lambda: T.tsum(fn(a, b) * w)), [a, b]
        return build

    def relu_case(rng):
        x = T.Tensor((rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.1).astype(np.float32),
                     requires_grad=True)
        x.data[np.abs(x.data) < 0.05] = 0.3  # keep clear of the kink
        w = T.Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return (lambda: T.tsum(T.relu(x) * w)), [x]

    def clip_case(rng):
        x = T.Tensor(rng.uniform(0.5, 1.5, size=(3, 4)).astype(np.float32), requires_grad=True)
        x.data[np.abs(x.data - 0.8) < 0.02] = 1.0
        x.data[np.abs(x.data - 1.2) < 0.02] = 1.0
        w = T.Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return (lambda: T.tsum(T.clip(x, 0.8, 1.2) * w)), [x]

    def minimum_case(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        b.data[np.abs(a.data - b.data) < 0.05] += 0.2
        w = T.Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return (lambda: T.tsum(T.minimum(a, b) * w)), [a, b]

    def getitem_case(rng):
        x = _leaf(rng, 4, 5)
        w = T.Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        return (lambda: T.tsum(x[1:3, ::2] * w)), [x]

    def fancy_case(rng):
        x = _leaf(rng, 4, 5)
        rows, cols = np.array([0, 1, 1, 3]), np.array([2, 2, 2, 4])
        return (lambda: T.tsum(T.square(x[rows, cols]))), [x]

    def concat_case(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
        w = T.Tensor(rng.normal(size=(2, 5)).astype(np.float32))
        return (lambda: T.tsum(T.concat([a, b], axis=1) * w)), [a, b]

    def embedding_case(rng):
        table = _leaf(rng, 5, 3)
        ids = rng.integers(0, 5, size=(2, 4))
        w = T.Tensor(rng.normal(size=(2, 4, 3)).astype(np.float32))
        return (lambda: T.tsum(T.embedding(table, ids) * w)), [table]

    def linear_case(rng):
        x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
        p = T.Tensor(rng.normal(size=(2, 3, 5)).astype(np.float32))
        return (lambda: T.tsum(T.linear(x, w, b) * p)), [x, w, b]

    def conv_case(rng):
        x, w, b = _leaf(rng, 2, 4, 4, 2), _leaf(rng, 3, 3, 2, 3), _leaf(rng, 3)
        p = T.Tensor(rng.normal(size=(2, 4, 4, 3)).astype(np.float32))
        return (lambda: T.tsum(T.conv2d(x, w, b, stride=1, padding=1) * p)), [x, w, b]

    def conv_stride_case(rng):
        x, w = _leaf(rng, 1, 5, 5, 2), _leaf(rng, 3, 3, 2, 2)
        p = T.Tensor(rng.normal(size=(1, 2, 2, 2)).astype(np.float32))
        return (lambda: T.tsum(T.conv2d(x, w, None, stride=2, padding=0) * p)), [x, w]

    def layer_norm_case(rng):
        x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
        p = T.Tensor(rng.normal(size=(3, 6)).astype(np.float32))
        return (lambda: T.tsum(T.layer_norm(x, g, b) * p)), [x, g, b]

    def attention_case(rng):
        q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 3)
        p = T.Tensor(rng.normal(size=(2, 3, 3)).astype(np.float32))
        return (lambda: T.tsum(T.attention(q, k, v)[0] * p)), [q, k, v]

    def masked_attention_case(rng):
        q, k, v = _leaf(rng, 3, 4), _leaf(rng, 4, 4), _leaf(rng, 4, 2)
        mask = np.array([[1, 0, 1, 1], [1, 1, 0, 0], [0, 0, 0, 1]], dtype=bool)
        p = T.Tensor(rng.normal(size=(3, 2)).astype(np.float32))
        return (lambda: T.tsum(T.attention(q, k, v, mask)[0] * p)), [q, k, v]

    def matmul_chain(rng):
        a, b, c = _leaf(rng, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5, 2)
        return (lambda: T.tsum(T.square(T.matmul(T.matmul(a, b), c)))), [a, b, c]

    def reduce_case(rng):
        x = _leaf(rng, 2, 3, 4)
        p = T.Tensor(rng.normal(size=(2, 4)).astype(np.float32))
        return (lambda: T.tsum(T.mean(x, axis=1) * p) + T.tsum(T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)))), [x]

    return {
        "add": binary(T.add, (3, 4), (4,)),
        "sub": binary(T.sub, (3, 1), (3, 4)),
        "mul": binary(T.mul),
        "div": binary(T.div, positive_b=True),
        "neg": unary(T.neg),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "sqrt": unary(T.sqrt, positive=True),
        "square": unary(T.square),
        "tanh": unary(T.tanh),
        "gelu": unary(T.gelu),
        "relu": relu_case,
        "clip": clip_case,
        "minimum": minimum_case,
        "sum_mean_reshape_transpose": reduce_case,
        "getitem": getitem_case,
        "getitem_fancy": fancy_case,
        "concat": concat_case,
        "embedding": embedding_case,
        "matmul_chain": matmul_chain,
        "linear": linear_case,
        "conv2d": conv_case,
        "conv2d_stride2": conv_stride_case,
        "softmax": unary(lambda x: T.softmax(x, axis=-1)),
        "log_softmax": unary(lambda x: T.log_softmax(x, axis=0)),
        "layer_norm": layer_norm_case,
        "l2_normalize": unary(lambda x: T.l2_normalize(x, axis=-1)),
        "attention": attention_case,
        "attention_masked": masked_attention_case,
    }


OP_CASES = _case_builders()


def op_error(name: str, seed: int, h: float = 1e-3, numeric_dtype=np.float64) -> float:
    f, params = OP_CASES[name](np.random.default_rng(seed))
    return T.grad_check(f, params, h=h, numeric_dtype=numeric_dtype)


def model_loss_fn(arch: str = "pdit", hidden_dim: int = 8, pairs: int = 1, seed: int = 0,
                  batch: int = 2, weights: LossWeights | None = None):
    """Full forward + joint loss on a small random batch; returns (f, params)."""
    cfg = ModelConfig(arch=arch, hidden_dim=hidden_dim, heads=2, interleave_pairs=pairs, mission_embed_dim=8)
    params = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    obs = [reset(int(s))[1] for s in rng.integers(0, 2**32, size=batch)]
    views = np.stack([o.view for o in obs])
    missions = np.array([o.mission_tokens for o in obs])
    prev_a = rng.integers(0, 8, size=batch)
    prev_r = rng.integers(0, 2, size=batch).astype(np.float32)
    actions = rng.integers(0, 7, size=batch)
    oracle = rng.integers(0, 3, size=batch)
    adv = rng.normal(size=batch)
    returns = rng.normal(size=batch)
    weights = weights or LossWeights()
    with T.no_grad():
        base = forward(params, views, missions, prev_a, prev_r)
        # old log-probs a little off the current ones, inside the clip region
        old_lp = (T.log_softmax(base.logits).data[np.arange(batch), actions]
                  + rng.uniform(-0.05, 0.05, size=batch)).astype(np.float32)

    def f():
        out = forward(params, views, missions, prev_a, prev_r)
        lp = T.log_softmax(out.logits)[np.arange(batch), actions]
        ppo = ppo_clip_loss(lp, old_lp, adv, weights.clip_epsilon)
        terms = PPOTerms(ppo, value_mse(out.value, returns), entropy(out.logits))
        nce = infonce_loss(T.mean(out.x, axis=1), T.mean(out.y, axis=1), weights.infonce_tau)
        return total_loss(terms, nce, imitation_loss(out.logits, oracle), weights)

    return f, params


def model_error(arch: str = "pdit", seed: int = 0, hidden_dim: int = 8, pairs: int = 1,
                h: float = MODEL_STEP) -> float:
    f, params = model_loss_fn(arch, hidden_dim, pairs, seed)
    return T.grad_check(f, list(params.tensors.values()), h=h)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def run_suite(seeds=range(5), archs=("pdit",)) -> list[CheckResult]:
    results = [CheckResult(name, s, op_error(name, s)) for name in OP_CASES for s in seeds]
    results += [CheckResult(f"model:{arch}", s, model_error(arch, s)) for arch in archs for s in seeds]
    return results
