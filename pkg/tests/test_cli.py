import csv
import subprocess
import sys

import numpy as np
import pytest

from wbgs.cli import main, write_pgm
from wbgs.dataset import TABLE4_FREQS, load_manifest
from wbgs.scene import room, write_scene

SMALL = ["--set", "att_width=16", "--set", "h_dim=8", "--set", "rad_width=8", "--set", "L_pos=3",
         "--set", "L_freq=2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_scene(room(), root / "room.json")
    code = main(["--workers", "1", "simulate", "--scene", str(root / "room.json"), "--out", str(root / "ds"),
                 "--n-tx", "16", "--freqs", "1e9,10e9,94e9", "--width", "24", "--height", "12",
                 "--kernel-sigma", "2", "--max-bounces", "1"])
    assert code == 0
    return root


def train(root, out, iters=3, extra=()):
    return main(["train", "--manifest", str(root / "ds" / "manifest.json"), "--out", str(out),
                 "--iters", str(iters), "--n-surface", "30", "--n-volume", "10", *SMALL, *extra])


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert "simulate" in capsys.readouterr().out
    assert main(["simulate", "--bogus"]) == 2
    assert main([]) == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "wbgs.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "simulate" in out.stdout


def test_simulate_writes_all_pairs(dataset):
    m = load_manifest(dataset / "ds" / "manifest.json")
    assert len(m.samples) == 48
    assert m.freqs == [1e9, 10e9, 94e9]
    assert all((dataset / "ds" / s.file).stat().st_size == 24 * 12 * 4 for s in m.samples)


def test_simulate_defaults_to_table4(tmp_path):
    write_scene(room(), tmp_path / "room.json")
    assert main(["simulate", "--scene", str(tmp_path / "room.json"), "--out", str(tmp_path / "d"), "--n-tx", "1",
                 "--width", "12", "--height", "12", "--max-bounces", "0"]) == 0
    assert load_manifest(tmp_path / "d" / "manifest.json").freqs == sorted(TABLE4_FREQS)


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert main(["simulate", "--scene", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["eval", "--manifest", str(tmp_path / "m.json"), "--checkpoint", "x", "--out", "y"]) == 2
    assert main(["render", "--checkpoint", str(tmp_path / "c"), "--tx", "1", "1", "1", "--freq", "1e9",
                 "--out", str(tmp_path / "r.f32")]) == 2


def test_bad_override_exits_2(dataset, tmp_path):
    assert train(dataset, tmp_path / "c", extra=["--set", "nonsense=1"]) == 2


def test_train_is_deterministic_and_writes_metrics(dataset, tmp_path):
    assert train(dataset, tmp_path / "a.ckpt") == 0
    assert train(dataset, tmp_path / "b.ckpt") == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.ckpt.metrics.csv")))
    assert rows[0] == ["iteration", "loss", "loss_moving_avg", "gaussian_count", "timestamp"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]


def test_worker_count_does_not_change_checkpoint(dataset, tmp_path):
    for w in ("1", "3"):
        assert main(["--workers", w, "train", "--manifest", str(dataset / "ds" / "manifest.json"),
                     "--out", str(tmp_path / w), "--iters", "2", "--n-surface", "30", "--n-volume", "10",
                     *SMALL]) == 0
    assert (tmp_path / "1").read_bytes() == (tmp_path / "3").read_bytes()


def test_zero_iterations_gives_the_initial_model(dataset, tmp_path):
    from wbgs import WidebandGaussianField

    assert train(dataset, tmp_path / "z.ckpt", iters=0) == 0
    est = WidebandGaussianField.load(tmp_path / "z.ckpt")
    ref = WidebandGaussianField(scene=room(), W=24, H=12, n_surface=30, n_volume=10, att_width=16, h_dim=8,
                                rad_width=8, L_pos=3, L_freq=2, iterations=0).init_state()
    assert np.array_equal(est.state_.model.cloud.means, ref.model.cloud.means)
    assert np.array_equal(est.state_.model.net.flat(), ref.model.net.flat())


def test_render_outputs_are_byte_identical(dataset, tmp_path, capsys):
    assert train(dataset, tmp_path / "c.ckpt") == 0
    args = ["render", "--checkpoint", str(tmp_path / "c.ckpt"), "--tx", "3", "2", "1", "--freq", "24e9"]
    assert main(args + ["--out", str(tmp_path / "r1.f32")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2.f32")]) == 0
    assert (tmp_path / "r1.f32").read_bytes() == (tmp_path / "r2.f32").read_bytes()
    pgm = (tmp_path / "r1.pgm").read_bytes()
    assert pgm.startswith(b"P5\n24 12\n255\n") and len(pgm) == len(b"P5\n24 12\n255\n") + 24 * 12
    assert (tmp_path / "r1.pgm").read_bytes() == (tmp_path / "r2.pgm").read_bytes()


def test_pgm_scaling(tmp_path):
    write_pgm(np.array([[0.0, 1.0, 0.5, 2.0 / 255.0 - 0.5 / 255.0]]), tmp_path / "p.pgm")
    body = (tmp_path / "p.pgm").read_bytes().split(b"\n", 3)[3]
    assert list(body) == [0, 255, 128, 2]


def test_eval_reports_each_frequency(dataset, tmp_path, capsys):
    assert train(dataset, tmp_path / "c.ckpt") == 0
    capsys.readouterr()
    base = ["eval", "--manifest", str(dataset / "ds" / "manifest.json"), "--checkpoint", str(tmp_path / "c.ckpt")]
    assert main(base + ["--out", str(tmp_path / "e.csv")]) == 0
    out = capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert len(rows) == 1 + 3 + 1 and rows[-1][0] == "all"
    assert int(rows[-1][1]) == 3 * 3  # 16 TX at 0.8 -> 3 held-out TX per frequency
    assert "mean_ssim=" in out
    assert main(base + ["--out", str(tmp_path / "e2.csv")]) == 0
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
    assert main(base + ["--out", str(tmp_path / "e3.csv"), "--test-freqs", "10e9"]) == 0
    assert len(list(csv.reader(open(tmp_path / "e3.csv")))) == 3


def test_split_seed_changes_held_out_set(dataset, tmp_path):
    assert train(dataset, tmp_path / "c.ckpt") == 0
    base = ["eval", "--manifest", str(dataset / "ds" / "manifest.json"), "--checkpoint", str(tmp_path / "c.ckpt")]
    main(base + ["--out", str(tmp_path / "a.csv"), "--split-seed", "0"])
    main(base + ["--out", str(tmp_path / "b.csv"), "--split-seed", "1"])
    assert (tmp_path / "a.csv").read_text() != (tmp_path / "b.csv").read_text()


def test_simulate_dynamic_range(tmp_path):
    write_scene(room(), tmp_path / "room.json")
    base = ["simulate", "--scene", str(tmp_path / "room.json"), "--n-tx", "1", "--freqs", "1e9", "--width", "12",
            "--height", "12", "--max-bounces", "0"]
    assert main(base + ["--out", str(tmp_path / "d"), "--dynamic-range-db", "100"]) == 0
    norm = load_manifest(tmp_path / "d" / "manifest.json").norm
    assert norm.db_ceil - norm.db_floor == pytest.approx(100.0)
    assert main(base + ["--out", str(tmp_path / "e"), "--dynamic-range-db", "0"]) == 2
