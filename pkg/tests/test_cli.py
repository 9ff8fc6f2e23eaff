import numpy as np
import pytest

from capsdefense import cli, datasets, model as M

CFG = """\
[experiment]
seed = 3
sample_count = 6
families = pgd
export_images = 1

[data]
kind = synth
per_class = 25
test_per_class = 8
size = 12
seed = 7

[schedule]
steps = 120
batch_size = 25
learning_rate = 0.002
seed = 11

[attack]
eps_inf = 0.3
step_size = 0.02
iterations = 10
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "exp.cfg").write_text(CFG)
    return d


@pytest.fixture(scope="module")
def checkpoint(workdir):
    path = workdir / "model.caps"
    rc = cli.main(["train", "--config", str(workdir / "exp.cfg"), "--out", str(path)])
    assert rc == 0
    return path


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_bad_command_is_usage_error(capsys):
    assert cli.main(["explode"]) == 1


def test_synth_data_roundtrip(workdir):
    out = workdir / "data"
    rc = cli.main(["synth-data", "--out", str(out), "--seed", "7",
                   "--per-class", "4", "--test-per-class", "2", "--size", "12"])
    assert rc == 0
    ds = datasets.load_idx(str(out / "train-images.idx3"), str(out / "train-labels.idx1"))
    assert len(ds.images) == 40
    reference = datasets.synth_toy(7, 4, 12, split="train")
    # IDX stores bytes, so the round trip is exact up to /255 quantization
    assert np.abs(ds.images - reference.images).max() <= 0.5 / 255
    assert np.array_equal(ds.labels, reference.labels)


def test_train_writes_loadable_checkpoint(checkpoint):
    model = M.load_checkpoint(str(checkpoint))
    assert model.config.height == 12
    assert model.has_reconstruction


def test_attack_detect_sweep_chain(workdir, checkpoint, capsys):
    atk_dir = workdir / "atk"
    rc = cli.main(["attack", "--config", str(workdir / "exp.cfg"),
                   "--checkpoint", str(checkpoint), "--out", str(atk_dir)])
    assert rc == 0
    assert (atk_dir / "attack_meta.csv").exists()
    assert (atk_dir / "adv_000000.bin").exists()

    rc = cli.main(["detect", "--checkpoint", str(checkpoint),
                   "--attack-dir", str(atk_dir), "--theta", "2.0"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "combined_flagged" in out and "undetected_rate" in out

    curve = workdir / "curve.csv"
    rc = cli.main(["sweep", "--config", str(workdir / "exp.cfg"),
                   "--checkpoint", str(checkpoint),
                   "--attack-dir", str(atk_dir), "--out", str(curve)])
    assert rc == 0
    lines = curve.read_text().strip().split("\n")
    assert lines[0] == "theta,fpr,undetected_rate"
    assert len(lines) == 52  # [0, 20] step 0.4 inclusive

    img_dir = workdir / "imgs"
    rc = cli.main(["export-images", "--checkpoint", str(checkpoint),
                   "--attack-dir", str(atk_dir), "--out", str(img_dir),
                   "--count", "2"])
    assert rc == 0
    assert (img_dir / "adv_000.ppm").read_bytes().startswith(b"P5\n")


def test_eval_writes_report(workdir, capsys):
    run_dir = workdir / "run"
    rc = cli.main(["eval", "--config", str(workdir / "exp.cfg"), "--out", str(run_dir)])
    assert rc == 0
    report = (run_dir / "report.txt").read_text()
    assert report.startswith("capsdefense experiment report")
    assert "[pgd]" in report
    assert (run_dir / "sweep_pgd.csv").exists()
    assert (run_dir / "pgd_adv_000.ppm").exists()


def test_sweep_alpha_emits_one_curve_per_value(workdir):
    out = workdir / "alpha"
    rc = cli.main(["sweep-alpha", "--config", str(workdir / "exp.cfg"),
                   "--out", str(out), "--param", "alpha2", "--values", "0,1"])
    assert rc == 0
    assert (out / "sweep_alpha2_0.csv").exists()
    assert (out / "sweep_alpha2_1.csv").exists()


def test_usage_errors_exit_one(workdir, checkpoint):
    assert cli.main(["train", "--config", "/no/such/file.cfg", "--out", "x.caps"]) == 1
    assert cli.main(["train", "--config", str(workdir / "exp.cfg")]) == 1  # no --out
    assert cli.main(["detect", "--checkpoint", str(checkpoint),
                     "--attack-dir", "/no/such/dir", "--theta", "2"]) == 1
    assert cli.main(["detect", "--checkpoint", str(checkpoint)]) == 1  # missing flags


def test_runtime_errors_exit_two(workdir):
    # unreadable checkpoint is a runtime failure, not a usage error
    rc = cli.main(["detect", "--checkpoint", "/no/such/model.caps",
                   "--attack-dir", str(workdir), "--theta", "2"])
    assert rc == 2
