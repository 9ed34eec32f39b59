import json
import math

import numpy as np
import pytest

from deepmc import experiments as ex
from deepmc.exceptions import ConfigError

TINY = """
name = "tiny"
task = "synthetic"
m = 12
n = 10
rank = 2
sample_size = 70
max_iters = 300
snapshot_every = 50
lr = 1e-2
init_std = 1e-2
lambda = 0.05
optimizer = ["adam", "gd"]
depth = [1, 2]
penalty = "ratio"
seed = [0, 1]
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def test_load_config_expands_axes(tiny):
    grid = ex.load_config(tiny)
    runs = grid.runs()
    assert len(runs) == 8
    assert grid.axis_names == ["optimizer", "depth", "seed"]
    assert {r["optimizer"] for r in runs} == {"adam", "gd"}
    assert ex.load_config(tiny, seeds=[3]).runs()[0]["seed"] == 3
    assert len(ex.load_config(tiny, seeds=[3]).runs()) == 4


@pytest.mark.parametrize("text, key", [
    ('depth = "three"', "depth"),
    ("bogus = 1", "bogus"),
    ('task = "imagenet"', "task"),
    ("lr = [0.1]\nseed = []", "seed"),
    ('m = 10\nn = 10\nrank = 11', "rank"),
    ('optimizer = "lbfgs"', "optimizer"),
    ('penalty = "l1"', "penalty"),
    ("max_iters = [1, 2]", "max_iters"),
    ("[table]\nx = 1", "table"),
    ('task = "oracle-validation"\nalpha = 1e-3', "alpha"),
])
def test_config_errors_name_the_key(tmp_path, text, key):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigError) as info:
        ex.load_config(path)
    assert info.value.key_path == key


def test_malformed_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("depth = [1,")
    with pytest.raises(ConfigError):
        ex.load_config(path)


def test_missing_dataset_fails_fast(tmp_path, monkeypatch):
    monkeypatch.setenv("DEEPMC_DATA_ROOT", str(tmp_path))
    path = tmp_path / "ml.toml"
    path.write_text('task = "movielens"\ndata_path = "nowhere/u.data"\n')
    with pytest.raises(ConfigError) as info:
        ex.load_config(path)
    assert "nowhere/u.data" in str(info.value)


def test_include_cycle(tmp_path):
    (tmp_path / "a.toml").write_text(f'include = ["{tmp_path / "b.toml"}"]\n')
    (tmp_path / "b.toml").write_text(f'include = ["{tmp_path / "a.toml"}"]\n')
    with pytest.raises(ConfigError):
        ex.load_config(tmp_path / "a.toml")


def test_presets_ship_the_documented_settings():
    names = ex.preset_names()
    for required in ("table1", "fig1", "fig2", "fig3", "fig4", "rank10", "table2", "appendix-tables"):
        assert required in names
    t1 = ex.load_config("table1")
    runs = t1.runs()
    assert len(runs) == 5 * 6 * 2 * 5
    assert {r["lambda"] for r in runs} == {0.05}
    assert len({ex.run_label(r) for r in runs}) == 60
    assert {r["lambda"] for r in ex.load_config("fig2").runs()} == {1e-4}
    assert {r["lambda"] for r in ex.load_config("fig3").runs()} == {1e-2}
    assert sorted({r["depth"] for r in ex.load_config("fig1").runs()}) == [2, 3, 4, 5]
    assert {r["sample_size"] for r in ex.load_config("rank10").runs()} == {3000, 3500}
    assert len(ex.load_config("appendix-tables").runs()) == 6 * 6 * 2 * 5 + 6 * 3 * 2 * 5


def test_method_parsing_and_labels():
    assert ex.parse_method("dlnn:adam:1:ratio") == {"method": "dlnn", "optimizer": "adam", "depth": 1,
                                                    "penalty": "ratio"}
    assert ex.parse_method("dlnn:gd:3:schatten_ratio:1/3:2/3")["penalty"] == "schatten_ratio:1/3:2/3"
    with pytest.raises(ConfigError):
        ex.parse_method("dlnn:adam")
    base = dict(ex.DEFAULTS)
    assert ex.run_label({**base, "optimizer": "adam", "penalty": "ratio", "lambda": 0.05}) == "adam:1+ratio@0.05"
    assert ex.run_label({**base, "method": "dlnn:gd:3:none"}) == "gd:3+none"
    assert ex.run_label({**base, "method": "nuclear_min"}) == "nuclear_min"
    assert ex.run_id(base) == ex.run_id(dict(reversed(list(base.items()))))


def test_single_cell_grid(tmp_path):
    path = tmp_path / "one.toml"
    path.write_text('m = 8\nn = 8\nrank = 1\nsample_size = 30\nmax_iters = 50\n')
    res = ex.run_grid(path, out=tmp_path / "out", jobs=1)
    assert len(res.records) == 1 and len(res.summary_rows) == 1
    rec, row = res.records[0], res.summary_rows[0]
    assert row["test_error_mean"] == rec["test_error"] and row["n_runs"] == 1
    assert (tmp_path / "out" / rec["snapshot_path"]).exists()


def test_grid_is_idempotent_and_summaries_recompute(tiny, tmp_path):
    out = tmp_path / "out"
    first = ex.run_grid(tiny, out=out, jobs=1)
    assert first.n_failed == 0
    stamp = {p: p.stat().st_mtime_ns for p in (out / "runs").glob("*.json")}
    again = ex.run_grid(tiny, out=out, jobs=1)
    assert {p: p.stat().st_mtime_ns for p in (out / "runs").glob("*.json")} == stamp
    assert again.summary_path.read_text() == first.summary_path.read_text()
    manifest, _ = ex.load_manifest(out)
    ex.write_summary_csv(ex.summarize(manifest["runs"], manifest["axes"]), tmp_path / "recomputed.csv")
    assert (tmp_path / "recomputed.csv").read_text() == first.summary_path.read_text()
    forced = ex.run_grid(tiny, out=out, jobs=1, force=True)
    assert any(p.stat().st_mtime_ns != stamp[p] for p in (out / "runs").glob("*.json"))
    assert forced.summary_path.read_text() == first.summary_path.read_text()


def test_parallel_matches_serial(tiny, tmp_path):
    serial = ex.run_grid(tiny, out=tmp_path / "serial", jobs=1)
    parallel = ex.run_grid(tiny, out=tmp_path / "parallel", jobs=2)
    assert serial.summary_path.read_text() == parallel.summary_path.read_text()


def test_summary_statistics():
    recs = [{"params": {"depth": 1, "seed": s}, "label": "x", "status": "ok", "test_error": v, "effective_rank": 5.0,
             "test_rmse": math.nan, "iterations": 10} for s, v in enumerate([1.0, 2.0, 3.0])]
    row = ex.summarize(recs, ["depth", "seed"])[0]
    assert row["test_error_mean"] == 2.0
    assert row["test_error_stderr"] == pytest.approx(np.std([1, 2, 3], ddof=1) / np.sqrt(3))
    assert row["effective_rank_rounded"] == 5


def test_failed_runs_are_recorded(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("synthetic failure")

    import deepmc.training as training

    monkeypatch.setattr(training, "train", boom)
    path = tmp_path / "one.toml"
    path.write_text('m = 8\nn = 8\nrank = 1\nsample_size = 30\nmax_iters = 5\n')
    res = ex.run_grid(path, out=tmp_path / "out", jobs=1)
    assert res.n_failed == 1
    assert "synthetic failure" in res.records[0]["error"]


def test_baseline_and_oracle_runs(tmp_path):
    path = tmp_path / "b.toml"
    path.write_text('task = "baseline"\nm = 15\nn = 15\nrank = 2\nsample_size = 120\n'
                    'method = ["soft_impute", "nuclear_min"]\n')
    res = ex.run_grid(path, out=tmp_path / "b", jobs=1)
    assert res.n_failed == 0
    assert {r["label"] for r in res.records} == {"soft_impute", "nuclear_min"}
    path = tmp_path / "o.toml"
    path.write_text('task = "oracle-validation"\nsize = 4\ndepth = 2\npenalty = "ratio"\nlambda = 0.5\n'
                    'regime = ["gd", "adam_penalty"]\n')
    res = ex.run_grid(path, out=tmp_path / "o", jobs=1)
    assert res.n_failed == 0
    for rec in res.records:
        report = json.loads((tmp_path / "o" / rec["snapshot_path"]).read_text())
        assert report["max_deviation"][0] == rec["max_deviation"]


@pytest.mark.parametrize("value, text", [(4.2e-7, "4e−7"), (1e-5, "1e−5"), (0.83, "0.83"),
                                         (2.5e-3, "3e−3"), (9.6e-4, "1e−3"), (0.0, "0"),
                                         (None, "\u2014"), (float("nan"), "\u2014")])
def test_format_error(value, text):
    assert ex.format_error(value) == text


def test_format_cell_and_rounding():
    assert ex.format_cell(4.2e-7, 5.04) == "4e−7 / 5"
    assert ex.round_rank(5.5) == 6
    assert ex.round_rank(4.49) == 4
    assert ex.format_cell(None, None) == "\u2014"


def _fake_record(opt, depth, pen, err, rank, seed=0):
    params = dict(ex.DEFAULTS, optimizer=opt, depth=depth, penalty=pen, seed=seed, **{"lambda": 0.05})
    return {"params": params, "label": ex.run_label(params), "status": "ok", "test_error": err,
            "effective_rank": rank, "test_rmse": math.nan, "iterations": 1}


def test_report_table1_cell_and_missing():
    manifest = {"axes": ["optimizer", "depth", "penalty", "seed"],
                "runs": [_fake_record("adam", 1, "ratio", 4.2e-7, 5.04)]}
    text, csv_text, warns = ex.report_table(manifest, "table1")
    assert "4e−7 / 5" in text
    assert len(warns) == 59
    lines = csv_text.strip().splitlines()
    assert len(lines) == 1 + 10
    assert lines[1].split(",")[:3] == ["adam", "1", "4e−7 / 5"]


def test_report_empty_manifest_is_all_dash():
    text, csv_text, warns = ex.report_table({"runs": []}, "table1")
    body = [line.split(",")[2:] for line in csv_text.strip().splitlines()[1:]]
    assert all(cell == "\u2014" for row in body for cell in row)
    assert len(warns) == 60


def test_report_appendix_and_generic():
    manifest = {"axes": ["optimizer", "depth", "penalty", "seed"],
                "runs": [_fake_record("radam", 3, "nuclear", 0.5, 12.0), _fake_record("adam", 1, "schatten:1/2", 0.1, 7)]}
    text, _, _ = ex.report_table(manifest, "appendix-tables")
    assert "0.50 / 12" in text and "0.10 / 7" in text
    text, _, warns = ex.report_table(manifest, "summary")
    assert "radam:3+nuclear@0.05" in text and not warns


def test_report_movielens_table():
    recs = []
    for label, split, rmse in (("lnn", 0.9, 0.95), ("lnn", 0.8, 0.97)):
        params = dict(ex.DEFAULTS, task="movielens", split=split, penalty="ratio", **{"lambda": 1.5})
        recs.append({"params": params, "label": ex.run_label(params), "status": "ok", "test_rmse": rmse})
    text, _, warns = ex.report_table({"runs": recs}, "table2")
    assert "0.950" in text and "0.970" in text and "RMSE 90:10" in text and not warns


def test_plot_data(tiny, tmp_path):
    res = ex.run_grid(tiny, out=tmp_path / "out", jobs=1)
    text, warns = ex.emit_plot_data(res.manifest_path, "fig1")
    assert not warns
    lines = text.strip().splitlines()
    assert lines[0] == "series,x_name,x,metric,value,stderr,n"
    series = {line.split(",")[0] for line in lines[1:]}
    assert len(series) == 4
    metrics = {line.split(",")[3] for line in lines[1:]}
    assert {"train_loss", "test_error", "effective_rank", "sv_1", "sv_2"} <= metrics
    assert all(line.split(",")[-1] == "2" for line in lines[1:])


def test_plot_data_single_run_and_fig4(tmp_path):
    path = tmp_path / "one.toml"
    path.write_text('m = 8\nn = 8\nrank = 1\nsample_size = [20, 30]\nmax_iters = 20\n'
                    'method = ["dlnn:adam:1:ratio", "soft_impute"]\nlambda = 0.05\n')
    res = ex.run_grid(path, out=tmp_path / "out", jobs=1)
    text, _ = ex.emit_plot_data(res.manifest_path, "fig4")
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    assert {r[0] for r in rows} == {"adam:1+ratio@0.05", "soft_impute"}
    assert {r[1] for r in rows} == {"sample_size"} and {r[2] for r in rows} == {"20", "30"}
    assert {r[3] for r in rows} == {"test_error", "effective_rank"}
    path.write_text('m = 8\nn = 8\nrank = 1\nsample_size = 20\nmax_iters = 20\n')
    res = ex.run_grid(path, out=tmp_path / "single", jobs=1)
    text, _ = ex.emit_plot_data(res.manifest_path, "fig1")
    assert len({line.split(",")[0] for line in text.strip().splitlines()[1:]}) == 1


def test_plot_data_missing_snapshot(tiny, tmp_path):
    res = ex.run_grid(tiny, out=tmp_path / "out", jobs=1)
    (tmp_path / "out" / res.records[0]["snapshot_path"]).unlink()
    _, warns = ex.emit_plot_data(res.manifest_path, "fig1")
    assert len(warns) == 1
