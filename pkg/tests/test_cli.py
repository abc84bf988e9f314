"""CLI tests: config parsing, the four subcommands, manifest-driven
reproducibility, and the exit-code contract (0/2/3/4)."""
import subprocess
import sys

import numpy as np
import pytest

from mognet import cli
from mognet import data as data_mod

TRAIN_CFG = """\
# tiny smoke-test network
n = 8
groups = 2
k = 2
stage_count = 1
class_count = 2
in_channels = 3
input_hw = 8
master_seed = 9
epochs_stage2 = 2
batch_size = 10
rng_seed = 1
pad4_random_crop = false
horizontal_flip = false
synth_samples = 20
synth_seed = 77
"""


def write_cfg(tmp_path, text=TRAIN_CFG, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run_cli(capsys, *argv):
    rc = cli.main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


# ---------------------------------------------------------------------------
# gen-ca


def test_gen_ca_prints_the_known_evolution(capsys):
    rc, out, _ = run_cli(capsys, "gen-ca", "--width", "5", "--steps", "2",
                         "--seed", "00100")
    assert rc == 0
    assert out == "01110\n11001\n"


def test_gen_ca_integer_seed_is_deterministic(capsys):
    rc1, out1, _ = run_cli(capsys, "gen-ca", "--width", "8", "--steps", "3", "--seed", "4")
    rc2, out2, _ = run_cli(capsys, "gen-ca", "--width", "8", "--steps", "3", "--seed", "4")
    assert rc1 == rc2 == 0
    assert out1 == out2
    lines = out1.splitlines()
    assert len(lines) == 3
    assert all(len(l) == 8 and set(l) <= {"0", "1"} for l in lines)


def test_gen_ca_rejects_malformed_seed(capsys):
    rc, _, err = run_cli(capsys, "gen-ca", "--width", "5", "--steps", "1",
                         "--seed", "0a1")
    assert rc == 2
    assert "config error" in err and "--seed" in err


# ---------------------------------------------------------------------------
# size


def test_size_reports_per_layer_rows(capsys, tmp_path):
    cfg = write_cfg(tmp_path, "n=16\ngroups=4\nk=3\n")
    rc, out, _ = run_cli(capsys, "size", "--config", cfg)
    assert rc == 0
    assert "layer=stem kind=ternary params=432 bits=864" in out
    assert "layer=mrb0.cflog1.pw_ca kind=ca-seed params=0 bits=16" in out
    assert "total_bits=" in out and "total_megabits=" in out
    # every factorized block reports its parameter ratio vs a dense 3x3 conv
    assert out.count("=17/144") == 6  # 3 stages x 2 blocks at groups=4


def test_size_reference_ratio(capsys, tmp_path):
    cfg = write_cfg(tmp_path, "n=16\ngroups=4\nk=3\n")
    rc, out, _ = run_cli(capsys, "size", "--config", cfg, "--reference", "2.0")
    assert rc == 0
    assert "reference_megabits=2.000000 ratio=" in out


def test_size_needs_exactly_one_source(capsys, tmp_path):
    rc, _, err = run_cli(capsys, "size")
    assert rc == 2 and "exactly one" in err
    cfg = write_cfg(tmp_path, "n=8\ngroups=2\nk=2\n")
    rc, _, err = run_cli(capsys, "size", "--config", cfg, "--checkpoint", "x.mgnc")
    assert rc == 2 and "exactly one" in err


# ---------------------------------------------------------------------------
# config file handling


def test_missing_config_file(capsys):
    rc, _, err = run_cli(capsys, "train", "--config", "/nonexistent.cfg",
                         "--data", "synth", "--out", "/tmp/x")
    assert rc == 2 and "does not exist" in err


def test_malformed_config_line(capsys, tmp_path):
    cfg = write_cfg(tmp_path, "n=8\nnot a key value pair\n")
    rc, _, err = run_cli(capsys, "train", "--config", cfg, "--data", "synth", "--out", "/tmp/x")
    assert rc == 2 and "expected key=value" in err


def test_unknown_config_key(capsys, tmp_path):
    cfg = write_cfg(tmp_path, "n=8\ngroups=2\nk=2\nwidgets=9\n")
    rc, _, err = run_cli(capsys, "train", "--config", cfg, "--data", "synth", "--out", "/tmp/x")
    assert rc == 2 and "unknown config key 'widgets'" in err


def test_unparseable_config_value(capsys, tmp_path):
    cfg = write_cfg(tmp_path, "n=abc\ngroups=2\nk=2\n")
    rc, _, err = run_cli(capsys, "train", "--config", cfg, "--data", "synth", "--out", "/tmp/x")
    assert rc == 2 and "cannot parse" in err


def test_config_missing_required_keys(capsys, tmp_path):
    cfg = write_cfg(tmp_path, "groups=2\nk=2\n")
    rc, _, err = run_cli(capsys, "train", "--config", cfg, "--data", "synth", "--out", "/tmp/x")
    assert rc == 2 and "missing required keys: n" in err


def test_train_requires_data_and_out(capsys, tmp_path):
    cfg = write_cfg(tmp_path)
    rc, _, err = run_cli(capsys, "train", "--config", cfg, "--out", "/tmp/x")
    assert rc == 2 and "no dataset" in err
    rc, _, err = run_cli(capsys, "train", "--config", cfg, "--data", "synth")
    assert rc == 2 and "no output directory" in err


# ---------------------------------------------------------------------------
# train -> eval round trip (one small real run shared by several checks)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_train")
    cfg = write_cfg(tmp)
    out_dir = tmp / "run1"
    rc = cli.main(["train", "--config", cfg, "--data", "synth", "--out", str(out_dir)])
    assert rc == 0
    return tmp, out_dir


def test_train_writes_the_run_directory(trained_run):
    _, out_dir = trained_run
    assert (out_dir / "checkpoint.mgnc").is_file()
    assert (out_dir / "manifest.cfg").is_file()
    lines = (out_dir / "metrics.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:5] == ["stage", "epoch", "loss", "accuracy", "lr"]
    # one step-size column per ternary layer: stem + two grouped convs per block
    assert header[5:] == sorted(header[5:]) and len(header[5:]) == 1 + 2 * 1
    assert all(h.startswith("s[") and h.endswith("]") for h in header[5:])
    assert len(lines) == 3  # two epochs
    assert all(len(line.split(",")) == len(header) for line in lines[1:])


def test_manifest_reproduces_the_checkpoint_bit_for_bit(trained_run):
    tmp, out_dir = trained_run
    redo = tmp / "run2"
    rc = cli.main(["train", "--config", str(out_dir / "manifest.cfg"), "--out", str(redo)])
    assert rc == 0
    assert (redo / "checkpoint.mgnc").read_bytes() == (out_dir / "checkpoint.mgnc").read_bytes()


def test_eval_integer_engine(trained_run, capsys):
    _, out_dir = trained_run
    rc, out, _ = run_cli(capsys, "eval", "--checkpoint", str(out_dir / "checkpoint.mgnc"),
                         "--data", "synth", "--synth-samples", "40")
    assert rc == 0
    assert "engine=integer samples=40 accuracy=" in out


def test_eval_both_engines_agree(trained_run, capsys):
    _, out_dir = trained_run
    rc, out, _ = run_cli(capsys, "eval", "--checkpoint", str(out_dir / "checkpoint.mgnc"),
                         "--data", "synth", "--engine", "both", "--synth-samples", "40")
    assert rc == 0
    assert "engines agree on 40/40 samples" in out
    assert "engine=both samples=40 accuracy=" in out


def test_eval_limit_truncates(trained_run, capsys):
    _, out_dir = trained_run
    rc, out, _ = run_cli(capsys, "eval", "--checkpoint", str(out_dir / "checkpoint.mgnc"),
                         "--data", "synth", "--synth-samples", "40", "--limit", "10")
    assert rc == 0
    assert "samples=10" in out


def test_eval_missing_checkpoint(capsys):
    rc, _, err = run_cli(capsys, "eval", "--checkpoint", "/nonexistent.mgnc", "--data", "synth")
    assert rc == 3 and "data error" in err


def test_eval_rejects_wrong_image_size(trained_run, capsys, tmp_path):
    _, out_dir = trained_run
    rng = np.random.default_rng(5)
    rec_dir = tmp_path / "records"
    rec_dir.mkdir()
    data_mod.save_image_records(
        str(rec_dir / "batch.bin"),
        rng.integers(0, 256, size=(4, 3, 32, 32), dtype=np.uint8),
        np.zeros(4, dtype=np.int64),
    )
    rc, _, err = run_cli(capsys, "eval", "--checkpoint", str(out_dir / "checkpoint.mgnc"),
                         "--data", str(rec_dir))
    assert rc == 3
    assert "32x32" in err and "8x8" in err


def test_engine_disagreement_exits_4(trained_run, capsys, monkeypatch):
    _, out_dir = trained_run

    def skewed_int_forward(levels, frozen, banks=None, collect_trace=False):
        r = cli.real_forward(levels, frozen)
        return type(r)(r.scores, (r.labels + 1) % frozen.config.class_count, r.trace)

    monkeypatch.setattr(cli, "int_forward", skewed_int_forward)
    rc, _, err = run_cli(capsys, "eval", "--checkpoint", str(out_dir / "checkpoint.mgnc"),
                         "--data", "synth", "--engine", "both", "--synth-samples", "8")
    assert rc == 4
    assert "internal error: engines disagree on 8 of 8 samples" in err


def test_size_from_checkpoint(trained_run, capsys):
    _, out_dir = trained_run
    rc, out, _ = run_cli(capsys, "size", "--checkpoint", str(out_dir / "checkpoint.mgnc"))
    assert rc == 0
    assert "layer=stem kind=ternary params=216 bits=432" in out  # 8*3*9 codes


# ---------------------------------------------------------------------------
# entry point


def test_version_flag(capsys):
    rc, out, _ = run_cli(capsys, "--version")
    assert rc == 0
    assert out.startswith("mognet ")


def test_installed_console_script():
    proc = subprocess.run(["mognet", "gen-ca", "--width", "5", "--steps", "2",
                           "--seed", "00100"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout == "01110\n11001\n"


def test_module_reports_usage_without_subcommand():
    proc = subprocess.run([sys.executable, "-m", "mognet.cli"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr
