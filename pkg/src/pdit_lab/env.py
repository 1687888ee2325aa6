"""GoToLocal-style gridworld.

An 8x8 room (walls on the border ring, 6x6 walkable interior) holding a few
coloured objects. The agent must end up facing an object whose type and
colour match the mission ``"go to the <color> <type>"``.

Coordinates are ``(x, y)`` with ``y`` growing downwards. Headings are
``0=N, 1=E, 2=S, 3=W``.

Randomness comes from SplitMix64 so instances are reproducible from a seed in
any language: each draw of an integer in ``[0, n)`` is ``next_u64() % n``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

GRID_SIZE = 8
VIEW_SIZE = 7
MAX_STEPS = 64
MISSION_LEN = 5

OBJECT_TYPES = ("ball", "key", "box")
COLORS = ("red", "green", "blue", "purple", "yellow", "grey")

# view encoding: 0 is empty / not visible for every channel
TYPE_IDS = {"empty": 0, "wall": 1, "ball": 2, "key": 3, "box": 4}
COLOR_IDS = {c: i + 1 for i, c in enumerate(COLORS)}
N_TYPE_IDS = len(TYPE_IDS)
N_COLOR_IDS = len(COLORS) + 1
N_STATE_IDS = 3  # open/closed/locked; always 0 here (no doors)

VOCAB = ("go", "to", "the") + COLORS + OBJECT_TYPES
WORD_IDS = {w: i for i, w in enumerate(VOCAB)}

LEFT, RIGHT, FORWARD, PICKUP, DROP, TOGGLE, DONE = range(7)
N_ACTIONS = 7
ACTION_NAMES = ("left", "right", "forward", "pickup", "drop", "toggle", "done")
HEADINGS = "NESW"
DIRS = ((0, -1), (1, 0), (0, 1), (-1, 0))

MASK64 = (1 << 64) - 1


class EpisodeFinished(RuntimeError):
    pass


class UnreachableTarget(RuntimeError):
    pass


class SplitMix64:
    """SplitMix64 (Steele, Lea & Flood 2014); state and outputs are u64."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        return self.next_u64() % n


def derive_seed(*parts: int) -> int:
    """Mix integers into one u64 seed (used for per-env seed streams)."""
    acc = 0x6A09E667F3BCC909
    for p in parts:
        acc = SplitMix64(acc ^ (p & MASK64)).next_u64()
    return acc


@dataclass(frozen=True)
class EnvConfig:
    min_distractors: int = 2
    max_distractors: int = 6
    max_oracle_distance: int | None = None  # reject instances farther than this
    max_steps: int = MAX_STEPS
    shaped_reward: bool = False

    def __post_init__(self):
        if not 0 <= self.min_distractors <= self.max_distractors <= 20:
            raise ValueError("env: need 0 <= min_distractors <= max_distractors <= 20")
        if self.max_steps < 1:
            raise ValueError("env: max_steps must be >= 1")
        if self.max_oracle_distance is not None and self.max_oracle_distance < 1:
            raise ValueError("env: max_oracle_distance must be >= 1")


@dataclass
class WorldState:
    objects: tuple[tuple[str, str, tuple[int, int]], ...]
    agent_pos: tuple[int, int]
    agent_dir: int
    target: tuple[str, str]
    rng_seed: int
    step_count: int = 0
    max_steps: int = MAX_STEPS
    grid_size: int = GRID_SIZE
    done: bool = False
    _dist: dict | None = field(default=None, compare=False, repr=False)

    @property
    def mission(self) -> str:
        return f"go to the {self.target[1]} {self.target[0]}"

    def object_at(self, pos: tuple[int, int]) -> tuple[str, str] | None:
        for typ, color, p in self.objects:
            if p == pos:
                return typ, color
        return None

    def is_wall(self, pos: tuple[int, int]) -> bool:
        x, y = pos
        return x <= 0 or y <= 0 or x >= self.grid_size - 1 or y >= self.grid_size - 1

    def front_pos(self) -> tuple[int, int]:
        dx, dy = DIRS[self.agent_dir]
        return self.agent_pos[0] + dx, self.agent_pos[1] + dy


@dataclass(frozen=True)
class Observation:
    view: np.ndarray  # [7, 7, 3] uint8
    mission_tokens: tuple[int, ...]


# ---------------------------------------------------------------- missions


def encode_mission(text: str) -> tuple[int, ...]:
    words = text.split()
    if len(words) != MISSION_LEN:
        raise ValueError(f"mission must have {MISSION_LEN} words: {text!r}")
    try:
        return tuple(WORD_IDS[w] for w in words)
    except KeyError as e:
        raise ValueError(f"unknown mission word {e.args[0]!r}") from None


def decode_mission(ids: Iterable[int]) -> str:
    ids = list(ids)
    if len(ids) != MISSION_LEN or any(not 0 <= i < len(VOCAB) for i in ids):
        raise ValueError(f"invalid mission token ids {ids}")
    return " ".join(VOCAB[i] for i in ids)


def all_missions() -> list[str]:
    return [f"go to the {c} {t}" for c in COLORS for t in OBJECT_TYPES]


# ---------------------------------------------------------------- dynamics


def _is_success(state: WorldState, pos: tuple[int, int], heading: int) -> bool:
    dx, dy = DIRS[heading]
    return state.object_at((pos[0] + dx, pos[1] + dy)) == state.target


def _blocked(state: WorldState, pos: tuple[int, int]) -> bool:
    return state.is_wall(pos) or state.object_at(pos) is not None


def _transition(state: WorldState, pos, heading, action):
    if action == LEFT:
        return pos, (heading - 1) % 4
    if action == RIGHT:
        return pos, (heading + 1) % 4
    if action == FORWARD:
        dx, dy = DIRS[heading]
        nxt = (pos[0] + dx, pos[1] + dy)
        return (pos if _blocked(state, nxt) else nxt), heading
    return pos, heading


def distance_map(state: WorldState) -> dict[tuple[int, int, int], int]:
    """Moves (over left/right/forward) from each (x, y, heading) to success.

    Objects never move, so the map is fixed for an episode and cached.
    """
    if state._dist is not None:
        return state._dist
    n = state.grid_size
    free = [(x, y) for y in range(1, n - 1) for x in range(1, n - 1)
            if state.object_at((x, y)) is None]
    preds: dict[tuple, list[tuple]] = {}
    dist: dict[tuple[int, int, int], int] = {}
    queue: deque = deque()
    for pos in free:
        for h in range(4):
            s = (pos[0], pos[1], h)
            for a in (LEFT, RIGHT, FORWARD):
                npos, nh = _transition(state, pos, h, a)
                preds.setdefault((npos[0], npos[1], nh), []).append(s)
            if _is_success(state, pos, h):
                dist[s] = 0
                queue.append(s)
    while queue:
        s = queue.popleft()
        for p in preds.get(s, ()):
            if p not in dist:
                dist[p] = dist[s] + 1
                queue.append(p)
    state._dist = dist
    return dist


def oracle_distance(state: WorldState) -> int | None:
    return distance_map(state).get((*state.agent_pos, state.agent_dir))


def oracle_action(state: WorldState) -> int:
    """First move of a shortest route to success; ties go to the lowest action id."""
    if state.done:
        raise EpisodeFinished("oracle_action on a finished episode")
    dist = distance_map(state)
    here = dist.get((*state.agent_pos, state.agent_dir))
    if here is None:
        raise UnreachableTarget(f"target {state.target} unreachable from {state.agent_pos}")
    for a in (LEFT, RIGHT, FORWARD):
        npos, nh = _transition(state, state.agent_pos, state.agent_dir, a)
        if dist.get((npos[0], npos[1], nh)) == here - 1:
            return a
    raise UnreachableTarget("no improving move (agent already in a success pose)")


def generate_instance(seed: int, config: EnvConfig = EnvConfig()) -> WorldState:
    """Deterministic instance for ``seed``.

    Draw order: target type, target colour, then per attempt: distractor count,
    cells (target, distractors, agent) without replacement, each distractor's
    type and colour, agent heading. Attempts whose agent starts in a success
    pose, cannot reach the target, or exceed ``max_oracle_distance`` are
    redrawn from the same stream.
    """
    rng = SplitMix64(seed)
    target = (OBJECT_TYPES[rng.below(len(OBJECT_TYPES))], COLORS[rng.below(len(COLORS))])
    interior = [(x, y) for y in range(1, GRID_SIZE - 1) for x in range(1, GRID_SIZE - 1)]
    while True:
        n_distract = config.min_distractors + rng.below(config.max_distractors - config.min_distractors + 1)
        cells = list(interior)
        picks = [cells.pop(rng.below(len(cells))) for _ in range(n_distract + 2)]
        objects = [(target[0], target[1], picks[0])]
        for cell in picks[1:-1]:
            objects.append((OBJECT_TYPES[rng.below(len(OBJECT_TYPES))], COLORS[rng.below(len(COLORS))], cell))
        state = WorldState(objects=tuple(objects), agent_pos=picks[-1], agent_dir=rng.below(4),
                           target=target, rng_seed=seed & MASK64, max_steps=config.max_steps)
        d = oracle_distance(state)
        if d is None or d == 0:
            continue
        if config.max_oracle_distance is not None and d > config.max_oracle_distance:
            continue
        return state


def observe(state: WorldState) -> Observation:
    """Egocentric 7x7 crop: agent at view row 6, column 3, facing up."""
    view = np.zeros((VIEW_SIZE, VIEW_SIZE, 3), dtype=np.uint8)
    fx, fy = DIRS[state.agent_dir]
    rx, ry = DIRS[(state.agent_dir + 1) % 4]
    ax, ay = state.agent_pos
    n = state.grid_size
    occupied = {p: (t, c) for t, c, p in state.objects}
    for vr in range(VIEW_SIZE):
        ahead = VIEW_SIZE - 1 - vr
        for vc in range(VIEW_SIZE):
            lateral = vc - VIEW_SIZE // 2
            x = ax + ahead * fx + lateral * rx
            y = ay + ahead * fy + lateral * ry
            if not (0 <= x < n and 0 <= y < n):
                continue
            if x == 0 or y == 0 or x == n - 1 or y == n - 1:
                view[vr, vc, 0] = TYPE_IDS["wall"]
                continue
            obj = occupied.get((x, y))
            if obj is not None:
                view[vr, vc, 0] = TYPE_IDS[obj[0]]
                view[vr, vc, 1] = COLOR_IDS[obj[1]]
    return Observation(view=view, mission_tokens=encode_mission(state.mission))


def reset(seed: int, config: EnvConfig = EnvConfig()) -> tuple[WorldState, Observation]:
    state = generate_instance(seed, config)
    return state, observe(state)


def step(state: WorldState, action: int, shaped_reward: bool = False) -> tuple[Observation, float, bool]:
    """Advance ``state`` in place by one action."""
    if state.done:
        raise EpisodeFinished("step() on a finished episode")
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"invalid action {action}")
    state.step_count += 1
    reward, done = 0.0, False
    if action == DONE:
        done = True
    else:
        state.agent_pos, state.agent_dir = _transition(state, state.agent_pos, state.agent_dir, action)
        if _is_success(state, state.agent_pos, state.agent_dir):
            reward, done = 1.0, True
            if shaped_reward:
                reward = 1.0 - 0.9 * state.step_count / state.max_steps
    if not done and state.step_count >= state.max_steps:
        done = True
    state.done = done
    return observe(state), reward, done


# ---------------------------------------------------------------- episode runner


class GoToLocalEnv:
    """Stateful wrapper that can export a JSON-lines trace."""

    def __init__(self, config: EnvConfig = EnvConfig()):
        self.config = config
        self.state: WorldState | None = None
        self.trace: list[dict] = []

    def reset(self, seed: int) -> Observation:
        self.state, obs = reset(seed, self.config)
        self.trace = []
        return obs

    def step(self, action: int) -> tuple[Observation, float, bool]:
        obs, reward, done = step(self.state, action, self.config.shaped_reward)
        s = self.state
        self.trace.append({"seed": s.rng_seed, "t": s.step_count - 1, "action": int(action),
                           "reward": reward, "done": done,
                           "agent": [s.agent_pos[0], s.agent_pos[1], s.agent_dir]})
        return obs, reward, done

    def write_trace(self, fh: TextIO) -> None:
        for row in self.trace:
            fh.write(json.dumps(row) + "\n")


def render_ascii(state: WorldState) -> str:
    glyph = {"ball": "o", "key": "k", "box": "b"}
    arrow = "^>v<"
    rows = []
    for y in range(state.grid_size):
        line = []
        for x in range(state.grid_size):
            if state.is_wall((x, y)):
                line.append("#")
            elif (x, y) == state.agent_pos:
                line.append(arrow[state.agent_dir])
            else:
                obj = state.object_at((x, y))
                if obj is None:
                    line.append(".")
                else:
                    ch = glyph[obj[0]]
                    line.append(ch.upper() if obj == state.target else ch)
        rows.append(" ".join(line))
    return "\n".join(rows)
