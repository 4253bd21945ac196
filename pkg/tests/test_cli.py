"""Command-line behavior: the full artifact pipeline, exit codes, output
determinism, and the selfcheck suites."""

import subprocess

import numpy as np
import pytest

from graphflow import checkpoint as ckpt
from graphflow import cli, flow
from graphflow.config import load_run_config, vocab_from_config

TINY_CFG = """\
seed = 0
dataset = molecules
dataset_count = 12
dataset_max_atoms = 6
width = 6
layers = 1
max_size = 8
window = 4
epochs = 2
batch_size = 6
lr = 0.002
sample_count = 6
rl_iterations = 1
rl_batch = 2
rl_updates = 1
rl_warmup = 1
rl_lr = 0.001
scorer = toy:atom-count
constrained_delta = 0.1
constrained_rounds = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file, generated dataset, and a trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(TINY_CFG)
    data_dir = root / "data"
    rc = cli.main(["gen-data", "--config", str(cfg), "--output", str(data_dir)])
    assert rc == 0
    train_dir = root / "train"
    rc = cli.main(
        [
            "train",
            "--config",
            str(cfg),
            "--data",
            str(data_dir / "data.molt"),
            "--output",
            str(train_dir),
        ]
    )
    assert rc == 0
    return {
        "cfg": cfg,
        "data": data_dir / "data.molt",
        "checkpoint": train_dir / "checkpoint.ckpt",
        "train_dir": train_dir,
        "root": root,
    }


def test_gen_data_and_train_artifacts(workspace):
    assert workspace["data"].exists()
    assert workspace["checkpoint"].exists()
    nll = (workspace["train_dir"] / "nll.csv").read_text().splitlines()
    assert nll[0] == "epoch,nll"
    assert len(nll) == 3  # header plus one row per epoch
    manifest = (workspace["train_dir"] / "manifest.txt").read_text()
    assert manifest.startswith("# run manifest")
    assert "output checkpoint.ckpt = " in manifest
    assert "output nll.csv = " in manifest


def test_sample_evaluate_finetune_optimize(workspace, capsys):
    root = workspace["root"]
    cfg = str(workspace["cfg"])
    sample_dir = root / "samples"
    rc = cli.main(
        [
            "sample",
            "--config",
            cfg,
            "--checkpoint",
            str(workspace["checkpoint"]),
            "--output",
            str(sample_dir),
            "--trace",
        ]
    )
    assert rc == 0
    assert (sample_dir / "samples.molt").exists()
    assert (sample_dir / "traces.txt").read_text().startswith("sample 0 steps")

    eval_dir = root / "eval"
    rc = cli.main(
        [
            "evaluate",
            "--config",
            cfg,
            "--samples",
            str(sample_dir / "samples.molt"),
            "--train-data",
            str(workspace["data"]),
            "--output",
            str(eval_dir),
            "--csv",
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "validity = " in out
    report = (eval_dir / "report.txt").read_text()
    assert "mmd_degree" in report
    assert (eval_dir / "report.csv").read_text().count("\n") == 2

    ft_dir = root / "finetune"
    rc = cli.main(
        [
            "finetune",
            "--config",
            cfg,
            "--checkpoint",
            str(workspace["checkpoint"]),
            "--output",
            str(ft_dir),
            "--iterations",
            "1",
        ]
    )
    assert rc == 0
    assert (ft_dir / "finetuned.ckpt").exists()
    rewards = (ft_dir / "rewards.csv").read_text().splitlines()
    assert rewards[0] == "iteration,mean_reward"
    assert len(rewards) == 2

    opt_dir = root / "constrained"
    rc = cli.main(
        [
            "optimize-constrained",
            "--config",
            cfg,
            "--checkpoint",
            str(workspace["checkpoint"]),
            "--molecules",
            str(workspace["data"]),
            "--output",
            str(opt_dir),
        ]
    )
    assert rc == 0
    rows = (opt_dir / "constrained.csv").read_text().splitlines()
    assert rows[0] == "molecule,improvement,similarity,success"
    assert len(rows) == 13  # header plus one row per input molecule


def test_reruns_are_byte_identical(workspace):
    root = workspace["root"]
    cfg = str(workspace["cfg"])
    out = root / "repeat"
    assert cli.main(["gen-data", "--config", cfg, "--output", str(out)]) == 0
    first = (out / "data.molt").read_bytes()
    manifest1 = (out / "manifest.txt").read_bytes()
    assert cli.main(["gen-data", "--config", cfg, "--output", str(out)]) == 0
    assert (out / "data.molt").read_bytes() == first
    assert (out / "manifest.txt").read_bytes() == manifest1
    other = root / "reseeded"
    assert cli.main(["gen-data", "--config", cfg, "--seed", "1", "--output", str(other)]) == 0
    assert (other / "data.molt").read_bytes() != first


def test_thread_count_does_not_change_samples(workspace):
    root = workspace["root"]
    cfg = str(workspace["cfg"])
    outs = []
    for threads, name in ((1, "t1"), (3, "t3")):
        out = root / name
        rc = cli.main(
            [
                "sample",
                "--config",
                cfg,
                "--checkpoint",
                str(workspace["checkpoint"]),
                "--output",
                str(out),
                "--threads",
                str(threads),
            ]
        )
        assert rc == 0
        outs.append((out / "samples.molt").read_bytes())
    assert outs[0] == outs[1]


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["sample"]) == 1  # --checkpoint is required
    bad = tmp_path / "bad.cfg"
    bad.write_text("mystery = 1\n")
    assert cli.main(["gen-data", "--config", str(bad)]) == 1
    bad.write_text("epochs = 0\n")
    assert cli.main(["train", "--config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "usage error" in err
    assert "config error" in err


def test_data_errors_exit_2(workspace, tmp_path, capsys):
    cfg = str(workspace["cfg"])
    out = str(tmp_path / "out")
    rc = cli.main(
        ["sample", "--config", cfg, "--checkpoint", str(tmp_path / "nope.ckpt"), "--output", out]
    )
    assert rc == 2
    broken = tmp_path / "broken.molt"
    broken.write_text("#MOLT v1\natoms 1\n0 Zz\nbonds 0\n")
    rc = cli.main(["evaluate", "--config", cfg, "--samples", str(broken), "--output", out])
    assert rc == 2
    # checkpoint from a differently shaped model
    other_spec = flow.ModelSpec(width=16, layers=1, window=4, max_size=8)
    params = flow.init_flow_params(other_spec, np.random.default_rng(0))
    wrong = tmp_path / "wrong.ckpt"
    ckpt.save_checkpoint(params, wrong)
    rc = cli.main(["sample", "--config", cfg, "--checkpoint", str(wrong), "--output", out])
    assert rc == 2
    assert capsys.readouterr().err.count("data error") == 3


def test_numeric_failure_exits_3(workspace, tmp_path, capsys):
    # corrupt a valid checkpoint with NaN weights: the surrogate loss is
    # non-finite on the first fine-tune iteration
    cfg_obj = load_run_config(workspace["cfg"])
    vocab, bonds = vocab_from_config(cfg_obj)
    spec = flow.ModelSpec(
        vocab=vocab, bonds=bonds, width=cfg_obj.width, layers=cfg_obj.layers,
        window=cfg_obj.window, max_size=cfg_obj.max_size,
    )
    params = ckpt.load_checkpoint(workspace["checkpoint"], spec)
    params.node_mu.b2.data[:] = np.nan
    poisoned = tmp_path / "poisoned.ckpt"
    ckpt.save_checkpoint(params, poisoned)
    rc = cli.main(
        [
            "finetune",
            "--config",
            str(workspace["cfg"]),
            "--checkpoint",
            str(poisoned),
            "--output",
            str(tmp_path / "out"),
        ]
    )
    assert rc == 3
    assert "numerical failure" in capsys.readouterr().err


def test_selfcheck_passes(capsys):
    assert cli.main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l]
    assert len(lines) == 4
    assert all(l.startswith("ok  ") for l in lines)
    for name in ("invertibility", "masking", "gradient", "valency"):
        assert any(name in l for l in lines)


def test_console_script_is_wired():
    proc = subprocess.run(["graphflow"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage error" in proc.stderr
