import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from pdit_lab import checkpoint
from pdit_lab.cli import main
from pdit_lab.model import ModelConfig, init_params

TINY = {
    "total_env_steps": 500, "n_envs": 2, "n_steps": 128, "minibatch": 64, "epochs_per_update": 1,
    "eval_every": 1, "eval_episodes": 5, "checkpoint_every": 10,
    "model": {"hidden_dim": 16, "interleave_pairs": 1, "mission_embed_dim": 16},
    "env": {"min_distractors": 2, "max_distractors": 2, "max_oracle_distance": 6},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def ckpt(tmp_path):
    params = init_params(ModelConfig(hidden_dim=16, interleave_pairs=1, mission_embed_dim=16), seed=3)
    return params, checkpoint.save(params, tmp_path / "m.ckpt")


def test_roundtrip_bit_identical(ckpt, tmp_path):
    params, path = ckpt
    loaded = checkpoint.load(path)
    assert loaded.names() == params.names() and loaded.config == params.config
    for n in params.names():
        np.testing.assert_array_equal(loaded[n].data, params[n].data)
    again = checkpoint.save(loaded, tmp_path / "again.ckpt")
    assert again.read_bytes() == path.read_bytes()


def test_header_layout(ckpt):
    _, path = ckpt
    blob = path.read_bytes()
    assert blob[:4] == b"PDIT"
    version, hlen = struct.unpack_from("<II", blob, 4)
    header = json.loads(blob[12:12 + hlen])
    assert version == 1 and header["arch"] == "pdit" and len(header["config_hash"]) == 16
    spans = sorted((e["offset"], e["offset"] + e["length"]) for e in header["tensors"].values())
    assert spans[0][0] == 0 and all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert spans[-1][1] == len(blob) - 12 - hlen - 4


@pytest.mark.parametrize("corrupt", ["magic", "flip", "truncate", "overlap"])
def test_corruption_detected(ckpt, corrupt):
    _, path = ckpt
    blob = bytearray(path.read_bytes())
    if corrupt == "magic":
        blob[:4] = b"XXXX"
    elif corrupt == "flip":
        blob[-20] ^= 0xFF
    elif corrupt == "truncate":
        blob = blob[: len(blob) // 2]
    else:
        hlen = struct.unpack_from("<I", blob, 8)[0]
        header = json.loads(blob[12:12 + hlen])
        names = sorted(header["tensors"])
        header["tensors"][names[1]]["offset"] = header["tensors"][names[0]]["offset"]
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        blob = blob[:8] + struct.pack("<I", len(hb)) + hb + blob[12 + hlen:]
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(bytes(blob))


def test_cli_train_smoke_and_determinism(tiny_config, tmp_path):
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    rows = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert len(rows) >= 1
    assert len(list((tmp_path / "a" / "checkpoints").glob("*.ckpt"))) == 1
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert json.loads((tmp_path / "a" / "config.json").read_text())["seed"] == 7


def test_cli_config_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"heads": "two"}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "config.model.heads" in capsys.readouterr().err
    bad.write_text(json.dumps({"n_env": 4}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["bogus-command"]) == 2


def test_cli_numeric_abort_exit_3(tiny_config, tmp_path, monkeypatch):
    import pdit_lab.trainer as tr

    real = tr.init_params

    def poisoned(config, seed=0):
        params = real(config, seed)
        params["head.value.b"].data[0] = np.inf
        return params

    monkeypatch.setattr(tr, "init_params", poisoned)
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "r")]) == 3


def test_cli_eval_and_corrupt_checkpoint(ckpt, tmp_path, capsys):
    _, path = ckpt
    assert main(["eval", "--checkpoint", str(path), "--episodes", "4", "--seed", "11"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert set(stats) == {"mean_reward", "std_reward", "success_rate", "mean_length"}
    bad = tmp_path / "trunc.ckpt"
    bad.write_bytes(path.read_bytes()[:-10])
    assert main(["eval", "--checkpoint", str(bad)]) == 4
    assert main(["attn-dump", "--checkpoint", str(bad), "--out", str(tmp_path / "a.json")]) == 4


def test_cli_replay(ckpt, tmp_path, capsys):
    _, path = ckpt
    trace = tmp_path / "t.jsonl"
    assert main(["eval", "--checkpoint", str(path), "--episodes", "2", "--seed", "5", "--trace", str(trace)]) == 0
    capsys.readouterr()
    assert main(["replay", str(trace)]) == 0
    out = capsys.readouterr().out
    assert "seed 5:" in out and "t=0" in out
    rows = [json.loads(l) for l in trace.read_text().splitlines()]
    rows[0]["agent"][0] += 1
    trace.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert main(["replay", str(trace)]) == 4


def test_cli_attn_dump(ckpt, tmp_path):
    _, path = ckpt
    out = tmp_path / "attn.json"
    assert main(["attn-dump", "--checkpoint", str(path), "--seed", "9", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["steps"]
    for st in doc["steps"]:
        assert len(st["alignment"]) == 5
        for row in st["alignment"]:
            assert len(row) == 49 and min(row) >= 0


def test_cli_attn_dump_baseline_rejected(tmp_path):
    path = checkpoint.save(init_params(ModelConfig(arch="baseline", hidden_dim=8, mission_embed_dim=8)),
                           tmp_path / "b.ckpt")
    assert main(["attn-dump", "--checkpoint", str(path)]) == 2


def test_console_script_gradcheck():
    proc = subprocess.run([sys.executable, "-m", "pdit_lab.cli", "gradcheck", "--n-seeds", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "checks passed" in proc.stdout


def test_ablate_report_shape(tmp_path, monkeypatch):
    import pdit_lab.ablation as ab

    def fake_train(config, run_dir):
        # deterministic stand-in so the report plumbing is tested without training
        rng = np.random.default_rng(config.seed + 10 * sorted(ab.VARIANTS).index(
            next(k for k, v in ab.VARIANTS.items() if v == config.ablation)))
        run_dir.mkdir(parents=True, exist_ok=True)
        from pdit_lab.config import dump_config
        dump_config(config, run_dir / "config.json")
        hist = [{"env_step": 100 * (i + 1), "success_rate": float(min(1, 0.1 * i)), "mean_reward": 0.0}
                for i in range(12)]
        ev = {"history": hist, "final": hist[-1], "convergence_step": 900, "steps_to_threshold": 900,
              "trailing_episode_rewards": [float(x) for x in rng.integers(0, 2, size=50)],
              "env_steps": 1200, "param_count": 10, "arch": config.effective_arch}
        (run_dir / "eval.json").write_text(json.dumps(ev))

    monkeypatch.setattr(ab, "train", fake_train)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "abl"), "--n-seeds", "3"]) == 0
    report = json.loads((tmp_path / "abl" / "ablation_report.json").read_text())
    assert sorted(report["variants"]) == sorted(["full", "no_clip_align", "no_interleave", "no_supervision"])
    budgets = {r["env_steps"] for v in report["variants"].values() for r in v["per_seed"]}
    assert budgets == {1200}
    assert report["variants"]["no_interleave"]["per_seed"][0]["arch"] == "stacked"
    assert all(r["stability_ratio_vs_full"] == 1.0 for r in report["variants"]["full"]["per_seed"])
    assert "stability_ratio_gt_1" in report["checks"]
