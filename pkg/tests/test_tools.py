"""gradcheck, bench, plotting and the command line."""

import csv
import json

import numpy as np
import pytest

from mrbcnn import bench, cli, gradcheck, layers
from mrbcnn.gradcheck import gradcheck_config, run_gradcheck
from mrbcnn.network import init_params
from mrbcnn.plotting import plot_recall_curves, plot_training_log
from mrbcnn.rng import Stream
from mrbcnn.tensor import Tensor


@pytest.fixture(scope="module")
def report():
    return run_gradcheck(0)


def test_gradcheck_passes(report):
    assert report.passed, "\n".join(report.lines())
    assert report.worst().max_rel_err <= 1e-4


def test_gradcheck_covers_layers_and_losses(report):
    want = {"conv7", "conv5", "relu", "maxpool", "fc", "dropout-eval", "bilinear_outer", "region_pool", "assemble"}
    assert want <= report.names("layer")
    assert report.names("loss") == {"histogram", "binomial"}


def test_gradcheck_lists_every_parameter(report):
    names = set(init_params(gradcheck_config(), Stream(0)).names())
    assert report.names("histogram") == names
    assert report.names("binomial") == names


def _corrupt_conv(monkeypatch):
    orig = layers.conv2d

    def bad(x, w, b, spec=None):
        y = orig(x, w, b, spec)
        return Tensor._from_op(y.data, (y,), lambda g: (1.01 * g,), "bad_conv")

    monkeypatch.setattr(layers, "conv2d", bad)


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    _corrupt_conv(monkeypatch)
    failing = [r for r in gradcheck.layer_checks(0) if not r.passed]
    assert {r.name for r in failing} == {"conv7", "conv5"}


def test_cli_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--seed", "1"]) == 0
    assert "PASS" in capsys.readouterr().out
    _corrupt_conv(monkeypatch)
    assert cli.main(["gradcheck", "--seed", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_bench_bilinear_mults_and_gate():
    cases = bench.run_bench(bench.default_suite(0, 32), reps=2, warmup=1)
    by = {(c.kernel, c.shape): c for c in cases}
    bil = by[("bilinear_outer", "M=32,N=32,14x11")]
    assert bil.mults == 157_696
    for c in cases:
        assert c.ok and c.max_abs_diff <= 1e-10
        assert c.median_us > 0 and c.p90_us >= c.median_us


def test_bench_reps_change_only_timing():
    suite = bench.default_suite(1, 8)
    a = bench.run_bench(suite, reps=1, warmup=0)
    b = bench.run_bench(suite, reps=100, warmup=0)
    assert [c.checksum for c in a] == [c.checksum for c in b]


def test_bench_failing_gate_reports_no_timing(tmp_path):
    broken = bench.Kernel("conv2d", "broken", 0, lambda: np.zeros(3), lambda: np.ones(3))
    (case,) = bench.run_bench([broken], reps=3)
    assert not case.ok and case.median_us is None and case.p90_us is None
    path = bench.write_bench_csv([case], tmp_path / "b.csv")
    text = path.read_text()
    assert "skipped" in text
    rows = [r for r in text.splitlines() if not r.startswith("#")]
    assert rows == [",".join(bench.CSV_FIELDS)]


def test_bench_cli_csv(tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--reps", "2", "--warmup", "0", "--channels", "8", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# ") and "numpy" in lines[0]
    rows = list(csv.DictReader(lines[1:]))
    assert list(rows[0])[:6] == ["kernel", "shape", "reps", "median_us", "p90_us", "checksum"]
    assert {r["kernel"] for r in rows} == {"conv2d", "bilinear_outer", "region_pool"}


def test_plots_written(tmp_path):
    a = plot_recall_curves({"x": ([1, 2, 3], [0.5, 0.8, 1.0]), "y": ([1, 2, 3], [0.2, 0.6, 1.0])}, tmp_path / "r.png")
    b = plot_training_log([1, 2, 3], [0.3, 0.2, 0.1], tmp_path / "l.png", val=[(2, 0.5)])
    for p in (a, b):
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    again = plot_recall_curves({"x": ([1, 2, 3], [0.5, 0.8, 1.0]), "y": ([1, 2, 3], [0.2, 0.6, 1.0])},
                               tmp_path / "r2.png")
    assert again.read_bytes() == a.read_bytes()


CFG = """\
net.input_h = 40
net.input_w = 24
net.part_height = 24
net.part_stride = 8
net.conv1_channels = 4
net.conv2_channels = 4
net.cell_h = 1
net.cell_w = 1
net.embedding_dim = 16
train.batch = 16
train.max_iters = 4
train.eval_every = 2
train.lr0 = 0.003
data.train_manifest = synth/manifest.csv
data.val_manifest = synth/manifest.csv
out.dir = run
"""


def test_cli_synth_train_eval(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "synth"), "--ids", "6", "--per-id", "4", "--seed", "2"]) == 0
    (tmp_path / "t.cfg").write_text(CFG)
    assert cli.main(["train", "--config", str(tmp_path / "t.cfg"), "--threads", "1"]) == 0
    run = tmp_path / "run"
    assert {"best.ckpt", "latest.ckpt", "train_log.csv", "train_loss.png"} <= {p.name for p in run.iterdir()}
    args = ["eval", "--checkpoint", str(run / "best.ckpt"), "--manifest", str(tmp_path / "synth" / "manifest.csv"),
            "--protocol", "cuhk03-single-shot", "--seed", "0"]
    assert cli.main(args + ["--out", str(tmp_path / "e1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "e2"), "--no-plot"]) == 0
    for name in ("metrics.json", "metrics_recall.csv", "metrics_curve.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    assert (tmp_path / "e1" / "metrics_recall.png").exists()
    assert not (tmp_path / "e2" / "metrics_recall.png").exists()
    summary = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    assert 0 <= summary["recall@1"] <= summary["recall@5"] <= 1


def test_cli_eval_bad_checkpoint(tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(20))
    (tmp_path / "m.csv").write_text("path,person_id,camera_id\n")
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--manifest", str(tmp_path / "m.csv"),
                     "--protocol", "cuhk03-single-shot", "--seed", "0"])
    assert code != 0
    err = capsys.readouterr().err
    assert "error" in err and "magic" in err and "Traceback" not in err


def test_cli_split_counts(tmp_path, capsys):
    from mrbcnn.data import DatasetManifest, Record, load_manifest, write_manifest

    recs = [Record(f"{p}_{j}.ppm", p, j) for p in range(1360) for j in range(2)]
    write_manifest(DatasetManifest(recs, tmp_path), tmp_path / "all.csv")
    assert cli.main(["split", "--manifest", str(tmp_path / "all.csv"), "--out", str(tmp_path / "s")]) == 0
    counts = [len(load_manifest(tmp_path / "s" / f"{n}.csv").identities) for n in ("train", "val", "test")]
    assert counts == [1160, 100, 100]


def test_cli_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 2
