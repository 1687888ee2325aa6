"""Rollout collection, PPO updates with the joint loss, supervised warm-start,
evaluation, and the end-to-end training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import TrainConfig, dump_config
from .env import (EnvConfig, Observation, SplitMix64, WorldState, derive_seed, observe, oracle_action,
                  reset, step)
from .losses import (LossWeights, PPOTerms, entropy, gae, imitation_loss, infonce_loss, ppo_clip_loss,
                     total_loss, value_mse)
from .metrics import (MetricsRecord, MetricsWriter, convergence_step, grad_norm, population_variance,
                      steps_to_threshold)
from .model import NO_ACTION, ModelParams, forward, init_params

log = logging.getLogger(__name__)

# seed-stream tags so each consumer of randomness gets an independent stream
_ACTION_STREAM, _SHUFFLE_STREAM, _ENV_STREAM, _PRETRAIN_STREAM = 1, 2, 3, 4


class TrainingAborted(RuntimeError):
    """Non-finite loss or logits; the state was dumped next to the run."""


def num_workers(config: TrainConfig) -> int:
    env = os.environ.get("PDIT_NUM_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer PDIT_NUM_WORKERS=%r", env)
    return config.n_workers


# ---------------------------------------------------------------- rollouts


@dataclass
class EnvSlot:
    """One environment plus the per-env episode-seed stream and context."""

    seeds: SplitMix64
    config: EnvConfig
    state: WorldState | None = None
    obs: Observation | None = None
    oracle: int = 0
    prev_action: int = NO_ACTION
    prev_reward: float = 0.0
    episode_return: float = 0.0
    episode_len: int = 0

    def new_episode(self) -> None:
        self.state, self.obs = reset(self.seeds.next_u64(), self.config)
        self.oracle = oracle_action(self.state)
        self.prev_action, self.prev_reward = NO_ACTION, 0.0
        self.episode_return, self.episode_len = 0.0, 0

    def act(self, action: int) -> tuple[float, bool, tuple[float, int] | None]:
        obs, reward, done = step(self.state, action, self.config.shaped_reward)
        self.episode_return += reward
        self.episode_len += 1
        finished = None
        if done:
            finished = (self.episode_return, self.episode_len)
            self.new_episode()
        else:
            self.obs = obs
            self.oracle = oracle_action(self.state)
            self.prev_action, self.prev_reward = action, reward
        return reward, done, finished


def make_slots(config: TrainConfig) -> list[EnvSlot]:
    slots = [EnvSlot(SplitMix64(derive_seed(config.seed, _ENV_STREAM, i)), config.env)
             for i in range(config.n_envs)]
    for s in slots:
        s.new_episode()
    return slots


@dataclass
class RolloutBuffer:
    views: np.ndarray  # [T, N, 7, 7, 3] uint8
    missions: np.ndarray  # [T, N, 5]
    prev_actions: np.ndarray  # [T, N]
    prev_rewards: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    oracle_actions: np.ndarray
    bootstrap_values: np.ndarray  # [N]
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    finished_episodes: list[tuple[float, int]] = field(default_factory=list)

    @classmethod
    def empty(cls, n_steps: int, n_envs: int) -> "RolloutBuffer":
        shape = (n_steps, n_envs)
        return cls(
            views=np.zeros(shape + (7, 7, 3), np.uint8), missions=np.zeros(shape + (5,), np.int64),
            prev_actions=np.zeros(shape, np.int64), prev_rewards=np.zeros(shape, np.float32),
            actions=np.zeros(shape, np.int64), logprobs=np.zeros(shape, np.float32),
            values=np.zeros(shape, np.float32), rewards=np.zeros(shape, np.float32),
            dones=np.zeros(shape, bool), oracle_actions=np.zeros(shape, np.int64),
            bootstrap_values=np.zeros(n_envs, np.float32))

    def __len__(self) -> int:
        return self.actions.size

    def compute_advantages(self, gamma: float, lam: float) -> None:
        adv, ret = gae(self.rewards, self.values, self.dones, self.bootstrap_values, gamma, lam)
        self.advantages, self.returns = adv.astype(np.float32), ret.astype(np.float32)

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape((-1,) + arr.shape[2:])


def _policy_step(params: ModelParams, slots: list[EnvSlot]):
    views = np.stack([s.obs.view for s in slots])
    missions = np.array([s.obs.mission_tokens for s in slots], dtype=np.int64)
    prev_a = np.array([s.prev_action for s in slots], dtype=np.int64)
    prev_r = np.array([s.prev_reward for s in slots], dtype=np.float32)
    with T.no_grad():
        out = forward(params, views, missions, prev_a, prev_r)
        logp = T.log_softmax(out.logits, axis=-1).data
    return views, missions, prev_a, prev_r, logp, out.value.data


def sample_actions(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    cdf = np.cumsum(np.exp(logp.astype(np.float64)), axis=-1)
    u = rng.random(logp.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=-1), logp.shape[-1] - 1)


def collect_rollouts(params: ModelParams, slots: list[EnvSlot], n_steps: int, rng: np.random.Generator,
                     workers: int = 1) -> RolloutBuffer:
    """Run every env for ``n_steps`` under the current (read-only) params.

    Env stepping fans out over ``workers`` threads; results are merged by env
    index so any worker count yields the same buffer.
    """
    buf = RolloutBuffer.empty(n_steps, len(slots))
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(n_steps):
            views, missions, prev_a, prev_r, logp, values = _policy_step(params, slots)
            actions = sample_actions(logp, rng)
            buf.views[t], buf.missions[t] = views, missions
            buf.prev_actions[t], buf.prev_rewards[t] = prev_a, prev_r
            buf.actions[t] = actions
            buf.logprobs[t] = logp[np.arange(len(slots)), actions]
            buf.values[t] = values
            buf.oracle_actions[t] = [s.oracle for s in slots]
            if pool is None:
                results = [s.act(int(a)) for s, a in zip(slots, actions)]
            else:
                results = list(pool.map(lambda sa: sa[0].act(int(sa[1])), zip(slots, actions)))
            for i, (reward, done, finished) in enumerate(results):
                buf.rewards[t, i] = reward
                buf.dones[t, i] = done
                if finished is not None:
                    buf.finished_episodes.append(finished)
        *_, boot = _policy_step(params, slots)
        buf.bootstrap_values[:] = boot
    finally:
        if pool is not None:
            pool.shutdown()
    return buf


# ---------------------------------------------------------------- losses on a minibatch


@dataclass
class MinibatchLoss:
    total: T.Tensor
    ppo: T.Tensor
    value: T.Tensor
    entropy: T.Tensor
    infonce: T.Tensor | None
    imitation: T.Tensor
    new_logprobs: np.ndarray


def _first_occurrence(missions: np.ndarray) -> np.ndarray:
    _, idx = np.unique(missions, axis=0, return_index=True)
    return np.sort(idx)


def alignment_embeddings(out) -> tuple[T.Tensor, T.Tensor]:
    """Pooled visual / mission embeddings that the contrastive term aligns."""
    return T.mean(out.x, axis=1), T.mean(out.y, axis=1)


def minibatch_loss(params: ModelParams, batch: dict, weights: LossWeights, *,
                   normalize_advantages: bool = True, dedupe_missions: bool = False) -> MinibatchLoss:
    out = forward(params, batch["views"], batch["missions"], batch["prev_actions"], batch["prev_rewards"])
    n = out.logits.shape[0]
    logp = T.log_softmax(out.logits, axis=-1)
    new_lp = logp[np.arange(n), batch["actions"]]
    ppo = ppo_clip_loss(new_lp, batch["logprobs"], batch["advantages"], weights.clip_epsilon,
                        normalize_advantages=normalize_advantages)
    vloss = value_mse(out.value, batch["returns"])
    ent = entropy(out.logits)
    v, t = alignment_embeddings(out)
    if dedupe_missions:
        keep = _first_occurrence(batch["missions"])
        v, t = v[keep], t[keep]
    nce = infonce_loss(v, t, weights.infonce_tau) if v.shape[0] >= 1 else None
    imi = imitation_loss(out.logits, batch["oracle_actions"])
    total = total_loss(PPOTerms(ppo, vloss, ent), nce, imi, weights)
    return MinibatchLoss(total, ppo, vloss, ent, nce, imi, new_lp.data.copy())


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = grad_norm(grads.values())
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class UpdateStats:
    ppo: float = 0.0
    value: float = 0.0
    entropy: float = 0.0
    infonce: float = 0.0
    imitation: float = 0.0
    total: float = 0.0
    approx_kl: float = 0.0
    grad_norm_thetaP: float = 0.0
    grad_norm_thetaD: float = 0.0
    first_ratio: float = 1.0
    n_minibatches: int = 0


def update(params: ModelParams, buf: RolloutBuffer, config: TrainConfig, adam: T.AdamState,
           rng: np.random.Generator) -> UpdateStats:
    """``epochs_per_update`` passes over shuffled minibatches, one Adam step each."""
    if buf.advantages is None:
        raise ValueError("update: advantages not computed")
    weights = config.effective_loss
    data = {
        "views": buf.flat("views"), "missions": buf.flat("missions"),
        "prev_actions": buf.flat("prev_actions"), "prev_rewards": buf.flat("prev_rewards"),
        "actions": buf.flat("actions"), "logprobs": buf.flat("logprobs"),
        "advantages": buf.flat("advantages"), "returns": buf.flat("returns"),
        "oracle_actions": buf.flat("oracle_actions"),
    }
    n = len(buf)
    perception = set(params.perception_names())
    trainable = {k: t for k, t in params.tensors.items() if t.requires_grad}
    stats = UpdateStats()
    sums = {k: 0.0 for k in ("ppo", "value", "entropy", "infonce", "imitation", "total", "approx_kl",
                             "grad_norm_thetaP", "grad_norm_thetaD")}
    for epoch in range(config.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = perm[start:start + config.minibatch]
            batch = {k: v[idx] for k, v in data.items()}
            with T.Tape() as tape:
                mb = minibatch_loss(params, batch, weights, normalize_advantages=config.normalize_advantages,
                                    dedupe_missions=config.dedupe_missions)
            total = float(mb.total.data)
            if not math.isfinite(total):
                raise T.NumericError("non-finite total loss")
            T.backward(mb.total, tape, trainable.values())
            grads = {k: t.grad for k, t in trainable.items()}
            sums["grad_norm_thetaP"] += grad_norm(g for k, g in grads.items() if k in perception)
            sums["grad_norm_thetaD"] += grad_norm(g for k, g in grads.items() if k not in perception)
            _clip_grads(grads, config.max_grad_norm)
            T.adam_step(trainable, grads, adam)
            old = batch["logprobs"].astype(np.float64)
            if stats.n_minibatches == 0:
                stats.first_ratio = float(np.mean(np.exp(mb.new_logprobs - old)))
            sums["approx_kl"] += float(np.mean(old - mb.new_logprobs))
            sums["ppo"] += float(mb.ppo.data)
            sums["value"] += float(mb.value.data)
            sums["entropy"] += float(mb.entropy.data)
            sums["infonce"] += float(mb.infonce.data) if mb.infonce is not None else 0.0
            sums["imitation"] += float(mb.imitation.data)
            sums["total"] += total
            stats.n_minibatches += 1
    for k, v in sums.items():
        setattr(stats, k, v / stats.n_minibatches)
    return stats


# ---------------------------------------------------------------- supervised warm-start


def oracle_dataset(n: int, seeds: SplitMix64, env_config: EnvConfig) -> dict[str, np.ndarray]:
    """``n`` (state, mission, context, oracle action) samples along oracle rollouts."""
    views, missions, prev_a, prev_r, actions = [], [], [], [], []
    while len(actions) < n:
        state, obs = reset(seeds.next_u64(), env_config)
        pa = NO_ACTION
        while not state.done and len(actions) < n:
            a = oracle_action(state)
            views.append(obs.view)
            missions.append(obs.mission_tokens)
            prev_a.append(pa)
            prev_r.append(0.0)
            actions.append(a)
            obs, _, _ = step(state, a)
            pa = a
    return {"views": np.stack(views), "missions": np.array(missions, dtype=np.int64),
            "prev_actions": np.array(prev_a, dtype=np.int64),
            "prev_rewards": np.array(prev_r, dtype=np.float32), "actions": np.array(actions, dtype=np.int64)}


def pretrain_supervised(params: ModelParams, config: TrainConfig, steps: int | None = None,
                        history: list | None = None) -> ModelParams:
    """Imitation (+ lambda1 * InfoNCE) warm-start on oracle batches.

    Updates ``params`` in place and returns it; a no-op when disabled.
    """
    if not config.pretrain_enabled:
        return params
    weights = config.effective_loss
    adam = T.AdamState(lr=config.pretrain.lr)
    seeds = SplitMix64(derive_seed(config.seed, _PRETRAIN_STREAM))
    trainable = {k: t for k, t in params.tensors.items() if t.requires_grad}
    for i in range(config.pretrain.steps if steps is None else steps):
        batch = oracle_dataset(config.pretrain.batch, seeds, config.env)
        with T.Tape() as tape:
            out = forward(params, batch["views"], batch["missions"], batch["prev_actions"], batch["prev_rewards"])
            imi = imitation_loss(out.logits, batch["actions"])
            loss = imi
            if weights.lambda1:
                v, t = alignment_embeddings(out)
                loss = loss + infonce_loss(v, t, weights.infonce_tau) * weights.lambda1
        if not math.isfinite(float(loss.data)):
            raise T.NumericError("non-finite pretraining loss")
        T.backward(loss, tape, trainable.values())
        grads = {k: t.grad for k, t in trainable.items()}
        _clip_grads(grads, config.max_grad_norm)
        T.adam_step(trainable, grads, adam)
        if history is not None:
            history.append(float(imi.data))
    return params


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    mean_reward: float
    std_reward: float
    success_rate: float
    mean_length: float
    episode_rewards: list[float]

    def summary(self) -> dict:
        return {"mean_reward": self.mean_reward, "std_reward": self.std_reward,
                "success_rate": self.success_rate, "mean_length": self.mean_length}


def run_episodes(params: ModelParams | None, seeds: list[int], env_config: EnvConfig,
                 policy: str = "greedy", rng: np.random.Generator | None = None,
                 on_step=None) -> tuple[np.ndarray, np.ndarray]:
    """Play one episode per seed, all in lock-step. Returns (rewards, lengths).

    ``policy`` is "greedy" (argmax), "sample", or "random" (uniform, no model).
    """
    states, obs = zip(*(reset(s, env_config) for s in seeds)) if seeds else ((), ())
    states, obs = list(states), list(obs)
    n = len(states)
    prev_a = np.full(n, NO_ACTION, dtype=np.int64)
    prev_r = np.zeros(n, dtype=np.float32)
    rewards = np.zeros(n)
    lengths = np.zeros(n, dtype=np.int64)
    active = list(range(n))
    while active:
        if policy == "random":
            actions = rng.integers(0, 7, size=len(active))
        else:
            with T.no_grad():
                out = forward(params, np.stack([obs[i].view for i in active]),
                              np.array([obs[i].mission_tokens for i in active], dtype=np.int64),
                              prev_a[active], prev_r[active])
            if on_step is not None:
                on_step(active, out)
            logits = out.logits.data
            if policy == "greedy":
                actions = np.argmax(logits, axis=-1)
            else:
                actions = sample_actions(T.log_softmax(out.logits).data, rng)
        still = []
        for i, a in zip(active, actions):
            o, r, done = step(states[i], int(a), env_config.shaped_reward)
            rewards[i] += r
            lengths[i] += 1
            obs[i] = o
            prev_a[i], prev_r[i] = int(a), r
            if not done:
                still.append(i)
        active = still
    return rewards, lengths


def evaluate(params: ModelParams, n_episodes: int, seed_base: int, env_config: EnvConfig = EnvConfig()) -> EvalResult:
    """Greedy play on seeds ``seed_base .. seed_base + n_episodes - 1``."""
    rewards, lengths = run_episodes(params, list(range(seed_base, seed_base + n_episodes)), env_config)
    return EvalResult(
        mean_reward=float(rewards.mean()), std_reward=float(rewards.std()),
        success_rate=float((rewards > 0).mean()), mean_length=float(lengths.mean()),
        episode_rewards=[float(r) for r in rewards])


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    run_dir: Path
    params: ModelParams
    eval_history: list[dict]
    episode_rewards: list[float]


def train(config: TrainConfig, out_dir) -> TrainResult:
    """collect -> GAE -> update until ``total_env_steps``; logs, evals, checkpoints."""
    run_dir = Path(out_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    dump_config(config, run_dir / "config.json")

    params = init_params(config.effective_model, seed=config.seed)
    if config.freeze_perception:
        params.set_trainable(params.perception_names(), False)
    pretrain_supervised(params, config)

    adam = T.AdamState(lr=config.lr)
    action_rng = np.random.default_rng(derive_seed(config.seed, _ACTION_STREAM))
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, _SHUFFLE_STREAM))
    slots = make_slots(config)
    workers = num_workers(config)
    weights = config.effective_loss

    episode_rewards: list[float] = []
    history: list[dict] = []
    env_step = 0
    t0 = time.perf_counter()
    metrics_fh = open(run_dir / "metrics.jsonl", "w")
    writer = MetricsWriter(metrics_fh)
    try:
        for u in range(config.n_updates):
            try:
                buf = collect_rollouts(params, slots, config.n_steps, action_rng, workers)
                buf.compute_advantages(weights.gamma, weights.gae_lambda)
                stats = update(params, buf, config, adam, shuffle_rng)
            except T.NumericError as e:
                checkpoint.save(params, run_dir / "abort_state.ckpt")
                raise TrainingAborted(f"update {u}: {e}") from e
            env_step += len(buf)
            episode_rewards.extend(r for r, _ in buf.finished_episodes)
            window = episode_rewards[-config.variance_window:]
            rec = MetricsRecord(
                env_step=env_step, update_index=u,
                mean_reward=float(np.mean(window)) if window else 0.0,
                success_rate=float(np.mean([r > 0 for r in window])) if window else 0.0,
                reward_variance=population_variance(window),
                loss_ppo=stats.ppo, loss_value=stats.value, loss_entropy=stats.entropy,
                loss_infonce=stats.infonce, loss_imitation=stats.imitation, loss_total=stats.total,
                approx_kl=stats.approx_kl, grad_norm_thetaP=stats.grad_norm_thetaP,
                grad_norm_thetaD=stats.grad_norm_thetaD,
                wall_time=round(time.perf_counter() - t0, 3) if config.record_wall_time else None)
            writer.write(rec)
            last = u == config.n_updates - 1
            stop = False
            if (u + 1) % config.eval_every == 0 or last:
                ev = evaluate(params, config.eval_episodes, config.eval_seed_base, config.env)
                history.append({"env_step": env_step, "update_index": u, **ev.summary()})
                log.info("update %d step %d: train success %.3f eval success %.3f", u, env_step,
                         rec.success_rate, ev.success_rate)
                stop = config.stop_at_success is not None and ev.success_rate >= config.stop_at_success
            if (u + 1) % config.checkpoint_every == 0 or last or stop:
                checkpoint.save(params, run_dir / "checkpoints" / f"step_{env_step}.ckpt")
            if stop:
                break
    finally:
        metrics_fh.close()

    if not history or history[-1]["env_step"] != env_step:
        ev = evaluate(params, config.eval_episodes, config.eval_seed_base, config.env)
        history.append({"env_step": env_step, "update_index": config.n_updates - 1, **ev.summary()})
    curve = [(h["env_step"], h["success_rate"]) for h in history]
    report = {
        "history": history,
        "final": history[-1],
        "convergence_step": convergence_step(curve) if len(curve) >= 10 else None,
        "steps_to_threshold": _finite_or_none(steps_to_threshold(curve, config.success_threshold)),
        "success_threshold": config.success_threshold,
        "trailing_episode_rewards": episode_rewards[-config.variance_window:],
        "variance_estimator": f"population variance over the trailing {config.variance_window} training episodes",
        "episodes_completed": len(episode_rewards),
        "env_steps": env_step,
        "param_count": params.count(),
        "arch": config.effective_arch,
    }
    (run_dir / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    return TrainResult(run_dir, params, history, episode_rewards)


def _finite_or_none(x: float):
    return None if math.isinf(x) else x
