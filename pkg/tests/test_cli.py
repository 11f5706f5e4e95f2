import json

import numpy as np
import pytest

from streamgnn import autodiff as ad
from streamgnn.cli import RunConfig, main

TINY_SYNTH = ["--years", "2", "--nodes", "10", "--growth", "2", "--timesteps", "2100"]
TINY_TRAIN = ["--epochs", "2", "--patience", "2", "--c1", "4", "--c2", "4", "--c3", "3", "--fisher-samples", "16"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(out), "--seed", "3"] + TINY_SYNTH) == 0
    return out


def test_synth_default_sizes(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--timesteps", "100"]) == 0
    assert "80 -> 88 -> 96 -> 104 -> 112" in capsys.readouterr().out
    assert (tmp_path / "drifted.csv").read_text().startswith("year,node_id\n")


def test_synth_is_byte_identical(tmp_path, corpus):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3"] + TINY_SYNTH) == 0
    for f in sorted(corpus.rglob("*")):
        if f.is_file():
            assert (tmp_path / f.relative_to(corpus)).read_bytes() == f.read_bytes(), f


def test_malformed_corpus_exit_code(tmp_path, corpus, capsys):
    import shutil

    bad = tmp_path / "bad"
    shutil.copytree(corpus, bad)
    flow = bad / "year_2" / "flow.csv"
    flow.write_text("\n".join(flow.read_text().splitlines()[:5]) + "\n")
    assert main(["run", "--corpus", str(bad), "--out", str(tmp_path / "r")] + TINY_TRAIN) == 2
    assert "error" in capsys.readouterr().err
    assert main(["run", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "r")] + TINY_TRAIN) == 2


def test_run_and_rerun_from_config(tmp_path, corpus):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--corpus", str(corpus), "--out", str(a), "--no-replay"] + TINY_TRAIN) == 0
    cfg = RunConfig.load(a / "run_config.json")
    assert cfg.plan.use_replay is False and cfg.plan.epochs == 2
    assert main(["run", "--config", str(a / "run_config.json"), "--out", str(b)]) == 0
    for f in ("year_2/params.bin", "year_2/metrics.txt", "year_2/jsd.csv", "report.csv"):
        if f == "report.csv":
            # timing columns differ between runs; compare the metric columns
            ra = [line.split(",")[:10] for line in (a / f).read_text().splitlines()]
            rb = [line.split(",")[:10] for line in (b / f).read_text().splitlines()]
            assert ra == rb
        else:
            assert (a / f).read_bytes() == (b / f).read_bytes()
    for name in ("mae_15", "total_time", "time_per_epoch"):
        assert (a / f"series_{name}.csv").exists()


def test_out_env(tmp_path, corpus, monkeypatch):
    monkeypatch.setenv("STREAMGNN_OUT", str(tmp_path))
    assert main(["run", "--corpus", str(corpus), "--strategy", "static"] + TINY_TRAIN) == 0
    assert (tmp_path / "static" / "report.csv").exists()


def test_bench(tmp_path, corpus, capsys):
    assert main(["bench", "--corpus", str(corpus), "--out", str(tmp_path)] + TINY_TRAIN) == 0
    rows = (tmp_path / "comparison.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["static", "expansible", "retrained", "trafficstream"]


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    assert "[FAIL]" not in capsys.readouterr().out


def test_selfcheck_catches_broken_rule(monkeypatch, capsys):
    good = ad.BACKWARD["relu"]
    monkeypatch.setitem(ad.BACKWARD, "relu", lambda ctx, g, inputs: [2.0 * x for x in good(ctx, g, inputs)])
    assert main(["selfcheck"]) == 1
    assert "[FAIL]" in capsys.readouterr().out


def test_bad_arguments():
    with pytest.raises(SystemExit):
        main(["run", "--strategy", "nope"])
    assert main(["synth", "--out", "/dev/null/x", "--years", "0"]) == 2
