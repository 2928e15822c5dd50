import subprocess
import sys

import numpy as np
import pytest

from ptseg.cli import (
    DEFAULT_PALETTE,
    BENCHMARK_PALETTE,
    export_colored,
    load_counts,
    palette_for,
    read_labels,
    run,
    save_counts,
    write_labels,
)
from ptseg.errors import ArgumentError, FormatError
from ptseg.evaluation import confusion, parse_report
from ptseg.pointcloud import LabeledPointCloud, decode_ascii, load_cloud, save_cloud

RECIPE = "extent = 3.0,3.0,2.5\ndensity = 25\n"


@pytest.fixture
def small_cloud(rng):
    n = 40
    return LabeledPointCloud(rng.uniform(0, 2, (n, 3)).astype(np.float32), rng.integers(0, 4, n),
                             ("ceiling", "floor", "wall", "chair"), rng.integers(0, 256, (n, 3)), "c")


@pytest.fixture
def scene_files(tmp_path):
    (tmp_path / "room.recipe").write_text(RECIPE)
    paths = []
    for seed in (1, 2):
        out = tmp_path / f"room{seed}.ptc"
        assert run(["synth", "--recipe", str(tmp_path / "room.recipe"), "--seed", str(seed), "--out", str(out)]) == 0
        paths.append(out)
    return paths


def test_end_to_end(tmp_path, scene_files, capsys):
    model_dir = tmp_path / "model"
    argv = ["train", "--data", *map(str, scene_files), "--out", str(model_dir), "--variant", "ms_cu",
            "--epochs", "1", "--points-per-block", "32", "--point-mlp-widths", "8,16",
            "--block-feature-dim", "16", "--cu-widths", "8", "--head-widths", "16", "--groups-per-cloud", "4"]
    assert run(argv) == 0
    assert (model_dir / "model.ptsg").exists() and (model_dir / "train.cfg").exists()
    pred = tmp_path / "room1.labels"
    colored = tmp_path / "colored.txt"
    assert run(["predict", "--model", str(model_dir), "--data", str(scene_files[0]), "--out", str(pred),
                "--export", str(colored)]) == 0
    cloud = load_cloud(scene_files[0])
    labels = read_labels(pred, cloud)
    assert len(labels) == len(cloud)
    assert len(decode_ascii(colored.read_text())) == len(cloud)
    report = tmp_path / "report.txt"
    capsys.readouterr()
    assert run(["eval", "--pred", str(pred), "--gt", str(scene_files[0]), "--out", str(report),
                "--counts", str(tmp_path / "counts.txt")]) == 0
    metrics = parse_report(report.read_text())
    assert 0.0 <= metrics["mean_iou"] <= 1.0
    assert capsys.readouterr().out == report.read_text()
    cm = load_counts(tmp_path / "counts.txt")
    assert cm == confusion(labels, cloud.labels, cloud.num_classes)


def test_eval_identical_labels_is_perfect(tmp_path, scene_files, capsys):
    cloud = load_cloud(scene_files[1])
    write_labels(tmp_path / "gt.labels", cloud.labels, cloud)
    assert run(["eval", "--pred", str(tmp_path / "gt.labels"), "--gt", str(scene_files[1])]) == 0
    out = capsys.readouterr().out
    assert "mean_iou = 1.0000" in out and "overall_accuracy = 1.0000" in out


def test_eval_rejects_labels_of_another_cloud(tmp_path, scene_files):
    a = load_cloud(scene_files[0])
    write_labels(tmp_path / "a.labels", a.labels, a)
    assert run(["eval", "--pred", str(tmp_path / "a.labels"), "--gt", str(scene_files[1])]) == 1


def test_report_compares_models(tmp_path, capsys):
    names = ("a", "b", "c")
    save_counts(tmp_path / "x.txt", confusion([0, 1, 2, 2], [0, 1, 1, 2], 3, names))
    save_counts(tmp_path / "y.txt", confusion([0, 0, 0, 0], [0, 1, 1, 2], 3, names))
    assert run(["report", f"base={tmp_path / 'x.txt'}", f"ctx={tmp_path / 'y.txt'}", "--title", "t"]) == 0
    metrics = parse_report(capsys.readouterr().out)
    assert metrics["base.overall_accuracy"] == 0.75 and metrics["ctx.overall_accuracy"] == 0.25
    assert metrics["ctx.iou.b"] == 0.0


def test_gradcheck_all_exits_zero(capsys):
    assert run(["gradcheck", "--all"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "g_rcu" in out


def test_gradcheck_refuses_single_precision(monkeypatch):
    monkeypatch.setenv("PTSEG_PRECISION", "f32")
    assert run(["gradcheck"]) == 1


@pytest.mark.parametrize("argv", [[], ["bogus"], ["synth"], ["synth", "--out", "x", "--no-such-flag"],
                                  ["train", "--data", "x", "--out", "y", "--variant", "fancy"],
                                  ["eval", "--pred", "a", "b", "--gt", "a"]])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1


def test_missing_file_exits_two(tmp_path):
    assert run(["predict", "--model", str(tmp_path / "none"), "--data", "x", "--out", "y"]) == 2


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "ptseg.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout


def test_project_command(tmp_path):
    depth = np.full((6, 8), 2.0)
    depth[0, 0] = 0.0
    sem = np.arange(48).reshape(6, 8) % 3
    np.save(tmp_path / "d.npy", depth)
    np.save(tmp_path / "s.npy", sem)
    out = tmp_path / "p.txt"
    assert run(["project", "--depth", str(tmp_path / "d.npy"), "--semantic", str(tmp_path / "s.npy"),
                "--focal", "4", "--out", str(out)]) == 0
    cloud = load_cloud(out)
    assert len(cloud) == 47 and np.allclose(cloud.positions[:, 2], 2.0)


def test_synth_is_idempotent(tmp_path):
    a, b = tmp_path / "a.ptc", tmp_path / "b.ptc"
    for p in (a, b):
        assert run(["synth", "--seed", "5", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# colored export


def test_export_line_format(tmp_path):
    c = LabeledPointCloud(np.array([[1.0, 2.0, 3.0]], np.float32), [1], ("ceiling", "floor"), None)
    export_colored(c, [0], palette_for(c.class_names), tmp_path / "o.txt")
    rows = (tmp_path / "o.txt").read_text().splitlines()[2:]
    assert rows == ["1 2 3 0 255 0 0"]


def test_export_round_trip_and_color_histogram(tmp_path, small_cloud, rng):
    labels = rng.integers(0, 4, len(small_cloud))
    before = small_cloud.colors.copy()
    export_colored(small_cloud, labels, palette_for(small_cloud.class_names), tmp_path / "o.txt")
    back = load_cloud(tmp_path / "o.txt")
    assert np.array_equal(back.labels, labels) and np.array_equal(back.positions, small_cloud.positions)
    pal = [BENCHMARK_PALETTE[n] for n in small_cloud.class_names]
    color_ids = [pal.index(tuple(int(v) for v in c)) for c in back.colors]
    assert np.array_equal(np.bincount(color_ids, minlength=4), np.bincount(labels, minlength=4))
    assert np.array_equal(small_cloud.colors, before)


def test_export_palette_checks(tmp_path, small_cloud):
    with pytest.raises(ArgumentError):
        export_colored(small_cloud, small_cloud.labels, [(0, 0, 0)] * 3, tmp_path / "o.txt")
    with pytest.raises(ArgumentError):
        export_colored(small_cloud, small_cloud.labels[:5], DEFAULT_PALETTE, tmp_path / "o.txt")
    with pytest.raises(ArgumentError):
        export_colored(small_cloud, small_cloud.labels, [(0, 0, 300)] * 4, tmp_path / "o.txt")


def test_palette_falls_back_for_unknown_names():
    assert palette_for(("floor", "wall")) == [BENCHMARK_PALETTE["floor"], BENCHMARK_PALETTE["wall"]]
    assert palette_for(("floor", "gizmo")) == DEFAULT_PALETTE


def test_labels_file_checks(tmp_path, small_cloud):
    write_labels(tmp_path / "l", small_cloud.labels, small_cloud)
    assert np.array_equal(read_labels(tmp_path / "l", small_cloud), small_cloud.labels)
    (tmp_path / "bad").write_text("1\n2\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "bad")
    text = (tmp_path / "l").read_text().splitlines()
    (tmp_path / "short").write_text("\n".join(text[:-1]) + "\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "short")
