import re

import numpy as np
import pytest

from oracles import replay_trace
from selfact import config as cfgmod
from selfact import dataset as ds
from selfact.cli import main

SMALL = ["--set", "synth.users=3", "--set", "synth.activities=3", "--set", "synth.windows_per_activity=20",
         "--set", "dbscan.min_pts=5"]
CONV = ["--set", "synth.users=2", "--set", "synth.names=walking,jogging", "--set", "synth.windows_per_activity=12",
        "--set", "data.window_len=64", "--set", "encoder.filters=4,4", "--set", "encoder.kernels=5,5",
        "--set", "pretrain.epochs=1", "--set", "pretrain.batch_size=32", "--set", "finetune.epochs=2",
        "--set", "finetune.hidden=16", "--set", "dbscan.min_pts=4"]


def _hash(capsys):
    return re.search(r"hash ([0-9a-f]{64})", capsys.readouterr().out).group(1)


def test_pretrain_writes_a_reloadable_deterministic_model(tmp_path, capsys):
    from selfact import params
    from selfact.encoder import EncoderModel
    assert main(["pretrain", "--out", str(tmp_path / "a.params"), *CONV]) == 0
    h1 = _hash(capsys)
    assert main(["pretrain", "--out", str(tmp_path / "b.params"), *CONV]) == 0
    h2 = _hash(capsys)
    assert h1 == h2
    assert params.param_hash(EncoderModel.load(tmp_path / "a.params").state_dict()) == h1
    assert (tmp_path / "a.params").read_bytes() == (tmp_path / "b.params").read_bytes()


def test_missing_dataset_path(tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    code = main(["pretrain", "--out", str(tmp_path / "m"), "--set", "data.source=csv", "--set", f"data.paths={missing}"])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--out", str(out), "--acc-th", "0.5", *SMALL]) == 0
    return out


def test_run_trace_has_one_line_per_window(run_dir):
    config = cfgmod.build_experiment(cfgmod.resolve(overrides=cfgmod.parse_overrides(SMALL[1::2])))
    from selfact.harness import load_recordings
    rec = load_recordings(config)[0]
    n = len(ds.segment(rec, config.data.window_len, config.data.overlap))
    lines = (run_dir / "trace.csv").read_text().splitlines()
    assert lines[0] == "seq,phase,event,cluster_id,queried,label"
    assert len(lines) == n + 1


def test_run_trace_replays_against_the_oracle(run_dir):
    trace = (run_dir / "trace.csv").read_text().splitlines()
    points = (run_dir / "points.csv").read_text().splitlines()
    rows = [r.split(",") for r in trace[1:]]
    recorded = [(int(r[0]), r[4] == "1") for r in rows if r[1] == "active_learning"]
    assert replay_trace(trace, points) == recorded
    labeled = (run_dir / "labeled.csv").read_text().splitlines()[1:]
    assert [int(l.split(",")[0]) for l in labeled] == [s for s, q in recorded if q]


def test_run_writes_summary_and_classifier(run_dir):
    summary = (run_dir / "summary.txt").read_text()
    assert "run.backend = statistical" in summary and "run.f1 = " in summary
    assert (run_dir / "classifier.params").exists()
    assert (run_dir / "store.txt").read_text().startswith("# noise=")


def test_acc_th_larger_than_stream(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path), "--acc-th", "5000", *SMALL]) == 3
    assert "accumulation never completed" in capsys.readouterr().err


def test_conv_run_requires_model(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path), "--backend", "conv", *SMALL]) == 1
    assert "--model" in capsys.readouterr().err


def test_run_on_a_csv_stream(tmp_path):
    recs = ds.synth_generate(1, ds.DEFAULT_ACTIVITIES[:3], 20, 0.3, seed=5)
    ds.write_csv(recs, tmp_path / "s.csv")
    assert main(["run", "--out", str(tmp_path / "o"), "--stream", str(tmp_path / "s.csv"), "--acc-th", "60",
                 "--set", "dbscan.min_pts=5"]) == 0
    assert "run.acc_th = 60" in (tmp_path / "o" / "summary.txt").read_text()


def test_eval_four_point_sweep(tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["eval", "--out", str(out), "--thresholds", "0.5,0.75,0.9,0.95", *SMALL]) == 0
    printed = capsys.readouterr().out
    assert printed.count("mean F1") == 4
    assert "meta.thresholds = 0.5,0.75,0.9,0.95" in (out / "summary.txt").read_text()
    for name in ("f1_vs_threshold.svg", "clusters_vs_threshold.svg", "al_rate_vs_threshold.svg"):
        assert (out / name).read_text().count('class="point"') == 4


@pytest.mark.parametrize("backend", ["statistical", "conv"])
def test_eval_records_the_backend(tmp_path, backend):
    out = tmp_path / backend
    assert main(["eval", "--out", str(out), "--backend", backend, "--thresholds", "0.75", *CONV]) == 0
    assert f"meta.backend = {backend}" in (out / "summary.txt").read_text()


def test_environment_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("SELFACT_OUT", str(tmp_path / "envout"))
    assert main(["eval", "--thresholds", "0.75", *SMALL]) == 0
    assert (tmp_path / "envout" / "summary.txt").exists()


def test_help_lists_every_key_with_its_default(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for k in cfgmod.KEYS:
        assert re.search(rf"^\s+{re.escape(k.name)}\s+= {re.escape(k.default or '(empty)')}", text, re.M), k.name
    assert "SELFACT_OUT" in text and "exit codes" in text


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["eval", "--no-such-flag"], ["eval", "--set", "x=1"],
                                  ["eval", "--thresholds", "0.5,1.5"]])
def test_usage_errors_exit_1(argv, capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        code = main(argv + ["--out", str(tmp_path)] if argv[:1] == ["eval"] else argv)
        raise SystemExit(code)
    assert exc.value.code == 1


def test_console_entry_point(tmp_path):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "selfact", "run", "--out", str(tmp_path), "--acc-th", "5000"],
                          capture_output=True, text=True)
    assert proc.returncode == 3 and "accumulation never completed" in proc.stderr
