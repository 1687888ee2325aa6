"""pdit-lab command line: train, eval, ablate, replay, gradcheck, attn-dump.

Exit codes: 0 ok, 1 gradcheck failure, 2 bad config or arguments,
3 numeric abort during training, 4 corrupt or unreadable artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .ablation import run_ablation
from .config import ConfigError, TrainConfig, load_config
from .env import ACTION_NAMES, EnvConfig, GoToLocalEnv, decode_mission, render_ascii, reset, step
from .gradcheck import TOLERANCE, run_suite
from .model import NO_ACTION, attention_alignment, forward
from .trainer import TrainingAborted, evaluate, train

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CORRUPT = 0, 1, 2, 3, 4

log = logging.getLogger("pdit_lab")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "arch", None) is not None:
        overrides["arch"] = args.arch
    if overrides:
        try:
            cfg = replace(cfg, **overrides)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
    return cfg


def _env_config(args) -> EnvConfig:
    return load_config(args.config).env if args.config else EnvConfig()


def cmd_train(args) -> int:
    cfg = _config(args)
    result = train(cfg, args.out)
    print(json.dumps({"run_dir": str(result.run_dir), "final": result.eval_history[-1]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    env_cfg = _env_config(args)
    params = checkpoint.load(args.checkpoint)
    seed_base = args.seed if args.seed is not None else TrainConfig().eval_seed_base
    res = evaluate(params, args.episodes, seed_base, env_cfg)
    if args.trace:
        _write_traces(params, range(seed_base, seed_base + args.episodes), env_cfg, args.trace)
    print(json.dumps(res.summary()))
    return EXIT_OK


def _write_traces(params, seeds, env_cfg: EnvConfig, path) -> None:
    """Greedy episodes as JSON-lines trace rows, one episode after another."""
    with open(path, "w") as fh:
        for seed in seeds:
            env = GoToLocalEnv(env_cfg)
            obs = env.reset(seed)
            prev_a, prev_r, done = NO_ACTION, 0.0, False
            while not done:
                with T.no_grad():
                    out = forward(params, obs.view[None], np.array([obs.mission_tokens]), [prev_a], [prev_r])
                prev_a = int(np.argmax(out.logits.data[0]))
                obs, prev_r, done = env.step(prev_a)
            env.write_trace(fh)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    report = run_ablation(cfg, args.out, n_seeds=args.n_seeds, resume=not args.no_resume)
    print(json.dumps(report["checks"], indent=2))
    return EXIT_OK


def cmd_replay(args) -> int:
    env_cfg = _env_config(args)
    try:
        rows = [json.loads(line) for line in Path(args.trace).read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: unreadable trace: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    state = None
    for row in rows:
        try:
            if row["t"] == 0:
                state, _ = reset(int(row["seed"]), env_cfg)
                print(f"seed {row['seed']}: {state.mission}")
                print(render_ascii(state))
            _, reward, done = step(state, int(row["action"]))
            agent = [state.agent_pos[0], state.agent_pos[1], state.agent_dir]
        except (KeyError, TypeError, ValueError, AttributeError, RuntimeError) as e:
            print(f"error: malformed trace row {row!r}: {e}", file=sys.stderr)
            return EXIT_CORRUPT
        if agent != list(row["agent"]) or reward != row["reward"] or done != row["done"]:
            print(f"error: trace diverges from the simulator at seed {row['seed']} t={row['t']}",
                  file=sys.stderr)
            return EXIT_CORRUPT
        print(f"\nt={row['t']} action={ACTION_NAMES[row['action']]} reward={reward} done={done}")
        print(render_ascii(state))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seeds=range(args.n_seeds))
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    for name, err in worst.items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {name:32s} max_rel_err={err:.3e}")
    failed = [n for n, e in worst.items() if not e < TOLERANCE]
    print(f"{len(worst) - len(failed)}/{len(worst)} checks passed (tolerance {TOLERANCE:g})")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_attn_dump(args) -> int:
    env_cfg = _env_config(args)
    params = checkpoint.load(args.checkpoint)
    if params.config.arch == "baseline":
        print("error: the baseline architecture has no attention to dump", file=sys.stderr)
        return EXIT_CONFIG
    seed = args.seed if args.seed is not None else 0
    state, obs = reset(seed, env_cfg)
    prev_a, prev_r, done, t = NO_ACTION, 0.0, False, 0
    steps = []
    while not done:
        with T.no_grad():
            out = forward(params, obs.view[None], np.array([obs.mission_tokens]), [prev_a], [prev_r])
        align = attention_alignment(out.attn)[0]
        action = int(np.argmax(out.logits.data[0]))
        steps.append({"t": t, "action": action, "agent": [state.agent_pos[0], state.agent_pos[1], state.agent_dir],
                      "alignment": align.astype(float).round(6).tolist()})
        obs, prev_r, done = step(state, action)
        prev_a, t = action, t + 1
    doc = {"seed": seed, "mission": decode_mission(obs.mission_tokens), "arch": params.config.arch,
           "rows": "mission tokens (5)", "cols": "visual cells (49, row-major 7x7 egocentric view)",
           "success": prev_r > 0, "steps": steps}
    text = json.dumps(doc) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdit-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def u64(s):
        v = int(s)
        if not 0 <= v < 1 << 64:
            raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
        return v

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=u64)
    t.add_argument("--arch", choices=("pdit", "stacked", "baseline"))
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=u64, help="first evaluation seed")
    e.add_argument("--config", help="run config supplying the env settings")
    e.add_argument("--trace", help="also write a JSON-lines trace of the episodes")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run the four ablation variants over shared seeds")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=u64, help="first seed")
    a.add_argument("--n-seeds", type=int, default=5)
    a.add_argument("--no-resume", action="store_true", help="retrain runs that already finished")
    a.set_defaults(fn=cmd_ablate, arch=None)

    r = sub.add_parser("replay", help="ASCII replay of a trace file")
    r.add_argument("trace")
    r.add_argument("--config")
    r.set_defaults(fn=cmd_replay)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--n-seeds", type=int, default=5)
    g.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("attn-dump", help="mission-to-visual attention per step as JSON")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--seed", type=u64)
    d.add_argument("--out")
    d.add_argument("--config")
    d.set_defaults(fn=cmd_attn_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, T.NumericError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except checkpoint.CheckpointError as e:
        print(f"corrupt artifact: {e}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
