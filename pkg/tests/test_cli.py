"""Command-line interface tests."""

import os

import numpy as np
import pytest

from mute_lab import tensor as T, verify
from mute_lab.cli import build_parser, main
from mute_lab.tensor import Tensor

SMOKE_CONF = """\
# fast smoke configuration
task = copy
vocab = 6
min_len = 3
max_len = 6
d = 16
d_ff = 32
heads = 2
n_enc = 1
n_dec = 1
units = 2
mode = seq_biased
clip = 3
dropout = 0
max_seq = 16
max_steps = 10
batch_tokens = 96
warmup = 5
pairs_per_epoch = 32
eval_pairs = 16
log_interval = 5
eval_interval = 10
checkpoint_interval = 10
seed = 3
"""


def write_conf(tmp_path, text=SMOKE_CONF):
    path = tmp_path / "smoke.conf"
    path.write_text(text)
    return str(path)


def test_parser_requires_command(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    capsys.readouterr()


def test_parser_accepts_common_flags():
    args = build_parser().parse_args(
        ["train", "--set", "d=32", "--set", "units=3", "--seed", "9",
         "--out", "runs/x"])
    assert args.set == ["d=32", "units=3"]
    assert args.seed == 9 and args.out == "runs/x"
    assert args.command == "train"


def test_unknown_key_fails_fast(tmp_path, capsys):
    code = main(["train", "--set", "bogus=1",
                 "--out", str(tmp_path / "x")])
    assert code == 2
    assert "bogus" in capsys.readouterr().err


def test_malformed_set_fails(tmp_path, capsys):
    assert main(["train", "--set", "d32"]) == 2
    assert "key=value" in capsys.readouterr().err


def test_train_eval_analyze_round_trip(tmp_path, capsys):
    conf = write_conf(tmp_path)
    out = str(tmp_path / "run")
    assert main(["train", "--config", conf, "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "steps\t10" in stdout
    assert "token_acc\t" in stdout and "exact_match\t" in stdout
    assert "shuffle_l0\thardness=" in stdout
    for name in ("final.ckpt", "metrics.log", "config.resolved",
                 "step000010.ckpt"):
        assert os.path.exists(os.path.join(out, name)), name

    ckpt = os.path.join(out, "final.ckpt")
    assert main(["eval", "--config", conf, "--ckpt", ckpt]) == 0
    lines = dict(l.split("\t") for l in capsys.readouterr().out.splitlines())
    assert set(lines) == {"token_acc", "exact_match", "sequences"}
    assert lines["sequences"] == "16"

    adir = str(tmp_path / "analysis")
    assert main(["analyze", "--config", conf, "--ckpt", ckpt, "--out", adir,
                 "--probes", "8"]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert os.path.join(adir, "alphas.tsv") in printed
    assert os.path.join(adir, "diversity.tsv") in printed
    assert os.path.exists(os.path.join(adir, "shuffle_l0.tsv"))


def test_resume_flag_continues(tmp_path, capsys):
    conf = write_conf(tmp_path)
    out = str(tmp_path / "run")
    main(["train", "--config", conf, "--out", out])
    capsys.readouterr()
    longer = SMOKE_CONF.replace("max_steps = 10", "max_steps = 14")
    conf2 = tmp_path / "longer.conf"
    conf2.write_text(longer)
    code = main(["train", "--config", str(conf2), "--out", out,
                 "--resume", os.path.join(out, "final.ckpt")])
    assert code == 0
    assert "steps\t14" in capsys.readouterr().out


def test_verify_all_suites_pass(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    for name in ("grad", "shuffle", "equivalence", "determinism",
                 "diversity"):
        assert f"{name}\tPASS" in out


def test_verify_subset_and_injected_failure(capsys, monkeypatch):
    assert main(["verify", "--suite", "shuffle"]) == 0
    out = capsys.readouterr().out
    assert out.count("\n") == 1 and out.startswith("shuffle\tPASS")

    def broken_case(rng):
        # forward sees a slope of 3 but the graph records none of it
        def f(x):
            return T.sum_(T.add(Tensor(x.data * 3.0), T.scale(x, 0.0)))

        return f, rng.normal(size=(2, 2))

    monkeypatch.setattr(verify, "GRAD_CASES",
                        verify.GRAD_CASES + [("injected", broken_case)])
    assert main(["verify", "--suite", "grad"]) == 1
    assert "grad\tFAIL" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    code = main(["gradcheck", "--d", "8", "--units", "2", "--n", "4",
                 "--layers", "1"])
    out = capsys.readouterr().out
    assert code == 0
    assert "coords\t" in out and "max_rel_err\t" in out
    assert "result\tPASS" in out
    # an impossible tolerance must flip the exit code
    assert main(["gradcheck", "--d", "8", "--units", "2", "--n", "4",
                 "--layers", "1", "--tol", "1e-18"]) == 1
    assert "result\tFAIL" in capsys.readouterr().out


def test_seed_flag_changes_model(tmp_path, capsys):
    conf = write_conf(tmp_path)
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    fast = SMOKE_CONF.replace("max_steps = 10", "max_steps = 2")
    conf = write_conf(tmp_path, fast)
    main(["train", "--config", conf, "--out", a, "--seed", "1"])
    main(["train", "--config", conf, "--out", b, "--seed", "2"])
    capsys.readouterr()
    la = open(os.path.join(a, "metrics.log")).read()
    lb = open(os.path.join(b, "metrics.log")).read()
    assert la != lb
