"""Interleaved perception/decision transformer and its two ablations.

Token layout fed to the transformer stack (57 tokens)::

    [0:49]  visual tokens (7x7 egocentric cells)
    [49:54] mission tokens
    [54]    previous action
    [55]    previous reward
    [56]    CLS (decision state)

Perception layers run full self-attention over every token. Decision layers
only update CLS: it queries all tokens, then passes through an MLP. ``pdit``
orders the layers P1, D1, ..., PL, DL; ``stacked`` runs P1..PL then D1..DL;
``baseline`` has no attention at all.

All forward functions take batched inputs (leading batch axis) and also accept
a single unbatched sample, in which case the batch axis is dropped on return.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .env import MISSION_LEN, N_ACTIONS, N_COLOR_IDS, N_STATE_IDS, N_TYPE_IDS, VIEW_SIZE, VOCAB
from .tensor import Tensor

N_VISUAL = VIEW_SIZE * VIEW_SIZE
MISSION_SPAN = slice(N_VISUAL, N_VISUAL + MISSION_LEN)
VISUAL_SPAN = slice(0, N_VISUAL)
PREV_ACTION_TOKEN = N_VISUAL + MISSION_LEN
PREV_REWARD_TOKEN = PREV_ACTION_TOKEN + 1
CLS_TOKEN = PREV_REWARD_TOKEN + 1
N_TOKENS = CLS_TOKEN + 1
NO_ACTION = N_ACTIONS  # "none" row of the previous-action table
ARCHS = ("pdit", "stacked", "baseline")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "pdit"
    hidden_dim: int = 64
    heads: int = 2
    interleave_pairs: int = 2
    mission_embed_dim: int = 128
    mlp_ratio: int = 2
    conv_kernel: int = 3
    conv_stride: int = 1
    conv_padding: int = 1
    action_count: int = N_ACTIONS

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"model.arch: must be one of {ARCHS}, got {self.arch!r}")
        if self.hidden_dim < 1 or self.heads < 1 or self.hidden_dim % self.heads:
            raise ValueError("model.hidden_dim: must be a positive multiple of model.heads")
        if self.interleave_pairs < 1:
            raise ValueError("model.interleave_pairs: must be >= 1")
        if self.mission_embed_dim < 1 or self.mlp_ratio < 1:
            raise ValueError("model.mission_embed_dim and model.mlp_ratio must be >= 1")
        out = (VIEW_SIZE + 2 * self.conv_padding - self.conv_kernel) // self.conv_stride + 1
        if out != VIEW_SIZE:
            raise ValueError("model.conv_*: the conv stem must preserve the 7x7 map")
        if self.action_count != N_ACTIONS:
            raise ValueError(f"model.action_count: environment has {N_ACTIONS} actions")

    @property
    def baseline_width(self) -> int:
        return max(1, self.hidden_dim // 2)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


PERCEPTION_PREFIXES = ("stem.", "text.", "P.")
DECISION_PREFIXES = ("D.", "tokens.", "head.", "mlp.")


class ModelParams:
    """Named parameter tensors split into perception and decision groups."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        for name in tensors:
            if name.startswith(PERCEPTION_PREFIXES) == name.startswith(DECISION_PREFIXES):
                raise ValueError(f"parameter {name!r} is not in exactly one group")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def perception_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith(PERCEPTION_PREFIXES)]

    def decision_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith(DECISION_PREFIXES)]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def set_trainable(self, names, flag: bool) -> None:
        for n in names:
            self.tensors[n].requires_grad = flag

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                                         for n, t in self.tensors.items()})

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}


def _block_shapes(prefix: str, h: int, ratio: int) -> list[tuple[str, tuple, str]]:
    shapes = [
        (f"{prefix}.ln1.g", (h,), "ones"), (f"{prefix}.ln1.b", (h,), "zeros"),
        (f"{prefix}.attn.wq", (h, h), "w"), (f"{prefix}.attn.bq", (h,), "zeros"),
        (f"{prefix}.attn.wk", (h, h), "w"), (f"{prefix}.attn.bk", (h,), "zeros"),
        (f"{prefix}.attn.wv", (h, h), "w"), (f"{prefix}.attn.bv", (h,), "zeros"),
        (f"{prefix}.attn.wo", (h, h), "w"), (f"{prefix}.attn.bo", (h,), "zeros"),
        (f"{prefix}.ln2.g", (h,), "ones"), (f"{prefix}.ln2.b", (h,), "zeros"),
        (f"{prefix}.mlp.w1", (h, ratio * h), "w"), (f"{prefix}.mlp.b1", (ratio * h,), "zeros"),
        (f"{prefix}.mlp.w2", (ratio * h, h), "w"), (f"{prefix}.mlp.b2", (h,), "zeros"),
    ]
    return shapes


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every parameter, in creation order."""
    h, k, e = config.hidden_dim, config.conv_kernel, config.mission_embed_dim
    shapes = [
        ("stem.type", (N_TYPE_IDS, h), "embed"),
        ("stem.color", (N_COLOR_IDS, h), "embed"),
        ("stem.state", (N_STATE_IDS, h), "embed"),
        ("stem.conv.w", (k, k, h, h), "w"),
        ("stem.conv.b", (h,), "zeros"),
        ("text.embed", (len(VOCAB), e), "embed"),
        ("text.pos", (MISSION_LEN, e), "embed"),
        ("text.proj.w", (e, h), "w"),
        ("text.proj.b", (h,), "zeros"),
    ]
    head_in = h
    if config.arch == "baseline":
        head_in = w = config.baseline_width
        shapes += [
            ("mlp.w1", (N_VISUAL * h + h, w), "w"), ("mlp.b1", (w,), "zeros"),
            ("mlp.w2", (w, w), "w"), ("mlp.b2", (w,), "zeros"),
        ]
    else:
        shapes.append(("stem.pos", (N_VISUAL, h), "embed"))
        shapes += [
            ("tokens.prev_action", (N_ACTIONS + 1, h), "embed"),
            ("tokens.prev_reward.w", (h,), "embed"),
            ("tokens.prev_reward.b", (h,), "embed"),
            ("tokens.cls", (h,), "embed"),
        ]
        for i in range(config.interleave_pairs):
            shapes += _block_shapes(f"P.{i}", h, config.mlp_ratio)
        for i in range(config.interleave_pairs):
            shapes += _block_shapes(f"D.{i}", h, config.mlp_ratio)
        shapes += [("head.ln.g", (h,), "ones"), ("head.ln.b", (h,), "zeros")]
    shapes += [
        ("head.policy.w", (head_in, N_ACTIONS), "w"), ("head.policy.b", (N_ACTIONS,), "zeros"),
        ("head.value.w", (head_in, 1), "w"), ("head.value.b", (1,), "zeros"),
    ]
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Weights ~ U(+-1/sqrt(fan_in)); embeddings ~ U(+-1/sqrt(dim)); LN gain 1, bias 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in param_shapes(config):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "embed":
            bound = 1.0 / math.sqrt(shape[-1])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------- encoders


def _batched(arr, ndim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(arr)
    if arr.ndim == ndim:
        return arr[None], True
    if arr.ndim != ndim + 1:
        raise ValueError(f"expected {ndim}-d input (or batched), got shape {arr.shape}")
    return arr, False


def _check_ids(arr: np.ndarray, hi: int, what: str) -> None:
    if arr.size and (arr.min() < 0 or arr.max() >= hi):
        raise ValueError(f"{what} id out of range [0, {hi})")


def _encode_observation(views: np.ndarray, params: ModelParams, with_pos: bool) -> Tensor:
    views = views.astype(np.int64)
    _check_ids(views[..., 0], N_TYPE_IDS, "object type")
    _check_ids(views[..., 1], N_COLOR_IDS, "color")
    _check_ids(views[..., 2], N_STATE_IDS, "state")
    cells = (T.embedding(params["stem.type"], views[..., 0])
             + T.embedding(params["stem.color"], views[..., 1])
             + T.embedding(params["stem.state"], views[..., 2]))
    c = params.config
    fmap = T.relu(T.conv2d(cells, params["stem.conv.w"], params["stem.conv.b"],
                           stride=c.conv_stride, padding=c.conv_padding))
    bsz = views.shape[0]
    tokens = T.reshape(fmap, (bsz, N_VISUAL, c.hidden_dim))
    if with_pos:
        tokens = tokens + params["stem.pos"]
    return tokens


def encode_observation(view, params: ModelParams) -> Tensor:
    """Visual tokens x_t: [B, 49, hidden] (or [49, hidden] for one view)."""
    views, single = _batched(view, 3)
    x = _encode_observation(views, params, with_pos=params.config.arch != "baseline")
    return x[0] if single else x


def encode_mission_tokens(mission_tokens, params: ModelParams) -> Tensor:
    """Mission tokens y_t: [B, 5, hidden] (or [5, hidden])."""
    toks, single = _batched(mission_tokens, 1)
    toks = toks.astype(np.int64)
    if toks.shape[-1] != MISSION_LEN:
        raise ValueError(f"mission must have {MISSION_LEN} tokens")
    _check_ids(toks, len(VOCAB), "mission token")
    emb = T.embedding(params["text.embed"], toks) + params["text.pos"]
    y = T.linear(emb, params["text.proj.w"], params["text.proj.b"])
    return y[0] if single else y


# ---------------------------------------------------------------- transformer blocks


def _heads_split(x: Tensor, heads: int) -> Tensor:
    b, n, h = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, h // heads)), (0, 2, 1, 3))


def _heads_merge(x: Tensor) -> Tensor:
    b, nh, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, nh * d))


def _mha(q_in: Tensor, kv_in: Tensor, params: ModelParams, prefix: str) -> tuple[Tensor, np.ndarray]:
    heads = params.config.heads
    p = lambda n: params[f"{prefix}.attn.{n}"]  # noqa: E731
    q = _heads_split(T.linear(q_in, p("wq"), p("bq")), heads)
    k = _heads_split(T.linear(kv_in, p("wk"), p("bk")), heads)
    v = _heads_split(T.linear(kv_in, p("wv"), p("bv")), heads)
    out, weights = T.attention(q, k, v)
    return T.linear(_heads_merge(out), p("wo"), p("bo")), weights.data


def _mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    hidden = T.gelu(T.linear(x, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return T.linear(hidden, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])


def _ln(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def perception_layer(h: Tensor, params: ModelParams, i: int) -> tuple[Tensor, np.ndarray]:
    prefix = f"P.{i}"
    normed = _ln(h, params, f"{prefix}.ln1")
    attn_out, w = _mha(normed, normed, params, prefix)
    h = h + attn_out
    h = h + _mlp(_ln(h, params, f"{prefix}.ln2"), params, prefix)
    return h, w


def decision_layer(h: Tensor, params: ModelParams, i: int) -> tuple[Tensor, np.ndarray]:
    prefix = f"D.{i}"
    normed = _ln(h, params, f"{prefix}.ln1")
    cls_q = normed[:, CLS_TOKEN:CLS_TOKEN + 1, :]
    attn_out, w = _mha(cls_q, normed, params, prefix)
    cls = h[:, CLS_TOKEN:CLS_TOKEN + 1, :] + attn_out
    cls = cls + _mlp(_ln(cls, params, f"{prefix}.ln2"), params, prefix)
    return T.concat([h[:, :CLS_TOKEN, :], cls], axis=1), w


class AttnRecord(NamedTuple):
    layer: str  # "P.0", "D.1", ...
    weights: np.ndarray  # [B, heads, n_query, 57]


class ForwardOut(NamedTuple):
    logits: Tensor  # [B, 7]
    value: Tensor  # [B]
    attn: list[AttnRecord]
    x: Tensor  # visual tokens
    y: Tensor  # mission tokens


def layer_order(arch: str, pairs: int) -> list[tuple[str, int]]:
    if arch == "pdit":
        return [(kind, i) for i in range(pairs) for kind in ("P", "D")]
    if arch == "stacked":
        return [("P", i) for i in range(pairs)] + [("D", i) for i in range(pairs)]
    raise ValueError(f"{arch!r} has no transformer stack")


def _context_tokens(prev_action, prev_reward, params: ModelParams, bsz: int) -> Tensor:
    prev_action = np.asarray(prev_action, dtype=np.int64).reshape(bsz)
    _check_ids(prev_action, N_ACTIONS + 1, "previous action")
    prev_reward = np.asarray(prev_reward, dtype=np.float32).reshape(bsz, 1, 1)
    h = params.config.hidden_dim
    a = T.reshape(T.embedding(params["tokens.prev_action"], prev_action), (bsz, 1, h))
    r = T.Tensor(prev_reward) * params["tokens.prev_reward.w"] + params["tokens.prev_reward.b"]
    cls = T.reshape(params["tokens.cls"], (1, 1, h)) + T.Tensor(np.zeros((bsz, 1, 1), np.float32))
    return T.concat([a, r, cls], axis=1)


def _heads(cls_state: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    logits = T.linear(cls_state, params["head.policy.w"], params["head.policy.b"])
    value = T.linear(cls_state, params["head.value.w"], params["head.value.b"])
    if not (np.isfinite(logits.data).all() and np.isfinite(value.data).all()):
        raise T.NumericError("non-finite policy logits or value")
    return logits, T.reshape(value, (cls_state.shape[0],))


def _stack_forward(arch, x, y, prev_action, prev_reward, params):
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
        y = T.reshape(y, (1,) + y.shape)
    bsz = x.shape[0]
    h = T.concat([x, y, _context_tokens(prev_action, prev_reward, params, bsz)], axis=1)
    records = []
    for kind, i in layer_order(arch, params.config.interleave_pairs):
        layer = perception_layer if kind == "P" else decision_layer
        h, w = layer(h, params, i)
        records.append(AttnRecord(f"{kind}.{i}", w))
    cls_state = _ln(h[:, CLS_TOKEN, :], params, "head.ln")
    logits, value = _heads(cls_state, params)
    if single:
        return logits[0], value[0], records
    return logits, value, records


def pdit_forward(x_t: Tensor, y_t: Tensor, prev_action, prev_reward, params: ModelParams):
    """Interleaved stack P1, D1, ..., PL, DL -> (logits, value, attention records)."""
    return _stack_forward("pdit", x_t, y_t, prev_action, prev_reward, params)


def stacked_forward(x_t: Tensor, y_t: Tensor, prev_action, prev_reward, params: ModelParams):
    """Non-interleaved ablation: P1..PL then D1..DL."""
    return _stack_forward("stacked", x_t, y_t, prev_action, prev_reward, params)


def _baseline_from_tokens(x: Tensor, y: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    bsz = x.shape[0]
    flat = T.reshape(x, (bsz, N_VISUAL * params.config.hidden_dim))
    feats = T.concat([flat, T.mean(y, axis=1)], axis=1)
    hid = T.relu(T.linear(feats, params["mlp.w1"], params["mlp.b1"]))
    hid = T.relu(T.linear(hid, params["mlp.w2"], params["mlp.b2"]))
    return _heads(hid, params)


def baseline_forward(view, mission_tokens, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Conv stem -> flatten ++ mean-pooled mission -> 2-layer MLP -> heads."""
    views, single = _batched(view, 3)
    toks, _ = _batched(mission_tokens, 1)
    x = _encode_observation(views, params, with_pos=False)
    y = encode_mission_tokens(toks, params)
    logits, value = _baseline_from_tokens(x, y, params)
    return (logits[0], value[0]) if single else (logits, value)


def forward(params: ModelParams, views, missions, prev_actions, prev_rewards) -> ForwardOut:
    """Batched forward for any architecture."""
    views = np.asarray(views)
    missions = np.asarray(missions)
    arch = params.config.arch
    x = _encode_observation(views, params, with_pos=arch != "baseline")
    y = encode_mission_tokens(missions, params)
    if arch == "baseline":
        logits, value = _baseline_from_tokens(x, y, params)
        return ForwardOut(logits, value, [], x, y)
    fn = pdit_forward if arch == "pdit" else stacked_forward
    logits, value, records = fn(x, y, prev_actions, prev_rewards, params)
    return ForwardOut(logits, value, records, x, y)


def attention_alignment(records: list[AttnRecord], mission_span: slice = MISSION_SPAN,
                        visual_span: slice = VISUAL_SPAN) -> np.ndarray:
    """Mean (over heads and P-layers) attention from mission to visual tokens.

    Returns [B, 5, 49] for batched records, which callers index per sample.
    """
    p_layers = [r.weights for r in records if r.layer.startswith("P.")]
    if not p_layers:
        raise ValueError("no perception attention records (baseline architecture?)")
    stacked = np.stack([w[:, :, mission_span, visual_span] for w in p_layers])  # [L, B, H, 5, 49]
    return stacked.mean(axis=(0, 2))
