"""Command-line frontend: configuration, artifacts, exit codes and the comparison harness."""

import numpy as np
import pytest

from factortransfer import cli, functional
from factortransfer.config import RunConfig, UsageError, coerce, load_config, parse_text
from factortransfer.tensor import make_result

TINY = """\
# tiny synthetic pipeline
dataset = synthetic
synth_per_class = 6
synth_test_per_class = 3
synth_classes = 4
synth_size = 8
teacher_depth = 1
teacher_width = 8
student_depth = 1
student_width = 8
teacher_epochs = 1
epochs = 1
para_epochs = 1
batch_size = 8
augment_pad = 1
beta = 2.0
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path, tmp_path / "out"


def run(tiny, *args):
    cfg, out = tiny
    return cli.main([args[0], "--config", str(cfg), "--out-dir", str(out), *args[1:]])


# -- configuration ----------------------------------------------------------------------

def test_parse_text_types_and_comments():
    values = parse_text("k = 0.75  # rate\nseeds = 1, 2,3\naugment_flip = false\nmethods = scratch,ft\n\n")
    assert values == {"k": 0.75, "seeds": [1, 2, 3], "augment_flip": False, "methods": ["scratch", "ft"]}


@pytest.mark.parametrize("text", ["warmup = 3", "k 0.5", "epochs = ten", "augment_flip = maybe"])
def test_bad_config_lines_rejected(text):
    with pytest.raises(UsageError):
        parse_text(text)


def test_unknown_override_rejected():
    with pytest.raises(UsageError, match="unknown"):
        load_config(None, {"warmup": 1})


def test_flags_override_file(tiny, capsys):
    cfg_path, _ = tiny
    args = cli.build_parser().parse_args(["train-student", "--config", str(cfg_path), "--beta", "7", "--k_sweep",
                                          "0.5,1"])
    cfg = cli.resolve(args)
    assert cfg.beta == 7.0 and cfg.synth_size == 8 and cfg.k_sweep == [0.5, 1.0]


def test_text_roundtrip():
    cfg = RunConfig(seeds=[3, 4], k_sweep=[0.5, 2.0], augment_flip=False, lr_drops=[1, 2], epochs=3)
    assert load_config(None, parse_text(cfg.to_text())) == cfg
    assert coerce("T", "4") == 4.0


# -- exit codes ---------------------------------------------------------------------------

def test_unknown_flag_exits_2(tiny):
    with pytest.raises(SystemExit) as info:
        run(tiny, "train-teacher", "--warmup", "3")
    assert info.value.code == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    assert cli.main(["train-teacher", "--config", str(bad)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_bad_method_exits_2(tiny):
    assert run(tiny, "train-student", "--method", "fitnet") == 2


def test_missing_dataset_path_exits_1(tiny, capsys):
    assert run(tiny, "train-teacher", "--dataset", "cifar10", "--data-path", "/nonexistent/cifar") == 1
    assert "cifar" in capsys.readouterr().err


# -- pipeline -----------------------------------------------------------------------------

def test_teacher_artifacts(tiny):
    _, out = tiny
    assert run(tiny, "train-teacher", "--seed", "1") == 0
    for suffix in (".ckpt", ".csv", ".cfg", ".timing.log"):
        assert (out / f"teacher_s1{suffix}").is_file()
    assert list(out.glob("norm_synthetic_*.txt"))


def test_prerequisites_named_explicitly(tiny, capsys):
    assert run(tiny, "train-student", "--method", "ft") == 2
    err = capsys.readouterr().err
    assert "ft requires --teacher <ckpt> and --paraphraser <ckpt>" in err
    assert run(tiny, "train-teacher") == 0
    capsys.readouterr()
    assert run(tiny, "train-student", "--method", "ft") == 2
    assert "ft requires --paraphraser <ckpt>" in capsys.readouterr().err


def test_scratch_needs_no_teacher(tiny):
    _, out = tiny
    assert run(tiny, "train-student", "--method", "scratch") == 0
    assert (out / "student_scratch_s1.ckpt").is_file()


def test_full_pipeline_and_eval(tiny, capsys):
    _, out = tiny
    assert run(tiny, "train-teacher") == 0
    assert run(tiny, "train-paraphraser", "--k", "0.5") == 0
    assert (out / "paraphraser_k0.5_s1.ckpt").is_file()
    assert run(tiny, "train-student", "--method", "ft", "--k", "0.5") == 0
    capsys.readouterr()
    ckpt = out / "student_ft_k0.5_s1.ckpt"
    assert run(tiny, "eval", "--checkpoint", str(ckpt)) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("test_error=") and last.endswith("%")
    value = float(last[len("test_error="):-1])
    assert 0.0 <= value <= 100.0


def test_eval_requires_checkpoint(tiny):
    assert run(tiny, "eval") == 2


def test_corrupt_checkpoint_exits_1(tiny, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert run(tiny, "eval", "--checkpoint", str(bad)) == 1
    err = capsys.readouterr().err
    assert "bad.ckpt" in err and "magic" in err


def test_resolved_config_reproduces_run(tiny, tmp_path):
    _, out = tiny
    assert run(tiny, "train-student", "--method", "scratch", "--seed", "4", "--lr", "0.03") == 0
    echo = out / "student_scratch_s4.cfg"
    replay = tmp_path / "replay"
    text = echo.read_text().replace(f"out_dir = {out}", f"out_dir = {replay}")
    replay_cfg = tmp_path / "replay.cfg"
    replay_cfg.write_text(text)
    assert cli.main(["train-student", "--config", str(replay_cfg)]) == 0
    assert (replay / "student_scratch_s4.csv").read_bytes() == (out / "student_scratch_s4.csv").read_bytes()
    assert (replay / "student_scratch_s4.ckpt").read_bytes() == (out / "student_scratch_s4.ckpt").read_bytes()


def test_rerun_is_byte_identical(tiny, tmp_path):
    cfg, out = tiny
    assert run(tiny, "train-teacher") == 0
    first = (out / "teacher_s1.csv").read_bytes()
    other = tmp_path / "again"
    assert cli.main(["train-teacher", "--config", str(cfg), "--out-dir", str(other)]) == 0
    assert (other / "teacher_s1.csv").read_bytes() == first


# -- compare ------------------------------------------------------------------------------

def _summary_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0] == "method,k,seed,test_err"
    return [line.split(",") for line in lines[1:]]


def test_compare_rows_and_means(tiny, capsys):
    _, out = tiny
    assert run(tiny, "compare", "--auto", "--methods", "scratch,ft", "--seeds", "1,2") == 0
    rows = _summary_rows(out / "compare_summary.csv")
    runs = [r for r in rows if r[2] not in ("mean", "std")]
    means = [r for r in rows if r[2] == "mean"]
    assert len(runs) == 4 and len(means) == 2
    assert len([r for r in rows if r[2] == "std"]) == 2
    for method in ("scratch", "ft"):
        errs = [float(r[3]) for r in runs if r[0] == method]
        mean = float(next(r[3] for r in means if r[0] == method))
        assert mean == pytest.approx(np.mean(errs), abs=1e-9)
    table = capsys.readouterr().out
    assert "Student" in table and "FT" in table


def test_compare_without_artifacts_needs_auto(tiny):
    assert run(tiny, "compare", "--methods", "scratch,kd", "--seeds", "1") == 2


def test_compare_failure_names_run(tiny, capsys):
    # student width 8 gives 32 channels, k=0.5 gives a 16-channel paraphraser factor: para_only cannot match
    assert run(tiny, "compare", "--auto", "--methods", "ft", "--seeds", "3", "--ablation", "para_only") == 1
    err = capsys.readouterr().err
    assert "method ft" in err and "seed 3" in err


def test_summarize_arithmetic():
    rows = [{"method": "ft", "k": 0.5, "seed": s, "test_err": e} for s, e in [(1, 10.0), (2, 14.0)]]
    summary = cli.summarize(rows)
    assert summary[-2]["test_err"] == 12.0 and summary[-1]["test_err"] == 2.0
    assert cli.summary_csv(summary).splitlines()[-2] == "ft,0.5,mean,12.0"


# -- gradcheck ---------------------------------------------------------------------------

def test_gradcheck_subset(capsys):
    assert cli.main(["gradcheck", "--ops", "leaky_relu,linear", "--instances", "5"]) == 0
    out = capsys.readouterr().out
    assert "leaky_relu" in out and "linear" in out and "conv2d" not in out


def test_gradcheck_unknown_op_exits_2():
    assert cli.main(["gradcheck", "--ops", "softplus"]) == 2


def test_gradcheck_flags_broken_backward(monkeypatch, capsys):
    def broken(x, slope):
        positive = x.data >= 0
        out = np.where(positive, x.data, slope * x.data)
        return make_result(out, (x,), "leaky_relu", lambda g: (2.0 * g,))

    monkeypatch.setattr(functional, "leaky_relu", broken)
    assert cli.main(["gradcheck", "--ops", "leaky_relu,linear", "--instances", "5"]) == 1
    err = capsys.readouterr().err
    assert "leaky_relu" in err and "linear" not in err
