"""Configuration-driven experiment grids, run records, tables and plot data.

A config is a flat TOML file. Scalar keys set run parameters; list values
on the keys in ``AXIS_KEYS`` become grid axes whose cartesian product
defines the runs. ``include = ["other", ...]`` concatenates the runs of
other configs (files or preset names) after this one's.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .exceptions import ConfigError, DeepMCError, DivergedError
from .optimizers import OptimizerSpec
from .penalties import parse_penalty

log = logging.getLogger(__name__)

TASKS = ("synthetic", "baseline", "movielens", "oracle-validation")
BASELINE_METHODS = ("soft_impute", "soft_impute_path", "nuclear_min")

DEFAULTS = {
    "task": "synthetic",
    "name": "grid",
    "output_dir": "",
    "include": [],
    # synthetic problem
    "m": 100,
    "n": 100,
    "rank": 5,
    "sample_size": 2000,
    "seed": 0,
    # network and training
    "method": "dlnn",
    "depth": 1,
    "width": 0,
    "optimizer": "adam",
    "lr": 1e-3,
    "penalty": "none",
    "lambda": 0.0,
    "init_std": 1e-3,
    "max_iters": 500_000,
    "loss_floor": 1e-7,
    "snapshot_every": 100,
    "plateau_tol": 0.0,
    "plateau_window": 2000,
    "plateau_arm": 1e-3,
    "top_k": 10,
    # baselines
    "shrink": 0.0,
    "baseline_iters": 0,
    # movielens
    "data_path": "ml-100k/u.data",
    "split": 0.9,
    "model": "lnn",
    "bias": "matrix",
    "n_factors": 64,
    "batch_size": 256,
    "n_epochs": 100,
    "lam_user": 0.0,
    "lam_item": 0.0,
    # dynamics oracle
    "regime": "gd",
    "alpha": 1e-5,
    "size": 6,
    "ladder": 3,
}

AXIS_KEYS = (
    "method", "optimizer", "depth", "penalty", "lambda", "rank", "sample_size", "lr",
    "model", "split", "lam_user", "lam_item", "regime", "alpha", "seed",
)
_LIST_VALUED = ("include",)
_SUMMARY_METRICS = ("test_error", "effective_rank", "test_rmse", "iterations")


@dataclass
class ExperimentGrid:
    task: str
    name: str
    base: dict
    axes: dict
    output_dir: str = ""
    parts: list = field(default_factory=list)

    def own_runs(self):
        keys = list(self.axes)
        out = []
        for combo in itertools.product(*(self.axes[k] for k in keys)):
            params = dict(self.base)
            params.update(zip(keys, combo))
            out.append(params)
        return out

    def runs(self):
        runs = self.own_runs() if self.axes or not self.parts else []
        for part in self.parts:
            runs.extend(part.runs())
        return runs

    @property
    def axis_names(self):
        names = list(self.axes)
        for part in self.parts:
            names += [k for k in part.axis_names if k not in names]
        return names


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("deepmc.presets").iterdir() if p.name.endswith(".toml"))


def _read_config_text(ref):
    ref = str(ref)
    name = ref[len("preset:"):] if ref.startswith("preset:") else None
    if name is None and not Path(ref).exists() and ref in preset_names():
        name = ref
    if name is not None:
        res = resources.files("deepmc.presets") / f"{name}.toml"
        if not res.is_file():
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}", "preset")
        return res.read_text(), f"preset:{name}"
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", "config")
    return path.read_text(), str(path)


def _canon(key, value):
    if key == "lambda":
        return float(value)
    if key in ("depth", "rank", "sample_size", "seed", "m", "n", "width", "max_iters", "snapshot_every",
               "plateau_window", "top_k", "n_factors", "batch_size", "n_epochs", "size", "ladder",
               "baseline_iters"):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return int(value)
    if key in ("lr", "init_std", "loss_floor", "plateau_tol", "plateau_arm", "split", "lam_user", "lam_item", "alpha",
               "shrink"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    return value


def load_config(ref, seeds=None, _seen=None) -> ExperimentGrid:
    """Parse a config file or preset into an :class:`ExperimentGrid`.

    Every run's parameters are validated up front; ``seeds`` (a list)
    replaces any seed axis.
    """
    text, origin = _read_config_text(ref)
    _seen = set() if _seen is None else _seen
    if origin in _seen:
        raise ConfigError(f"include cycle through {origin}", "include")
    _seen = _seen | {origin}
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: {exc}", "config") from exc
    base = dict(DEFAULTS)
    axes = {}
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key in {origin}", key)
        if isinstance(value, dict):
            raise ConfigError("tables are not supported; keep the config flat", key)
        if isinstance(value, list) and key not in _LIST_VALUED:
            if key not in AXIS_KEYS:
                raise ConfigError(f"only {', '.join(AXIS_KEYS)} may be lists", key)
            if not value:
                raise ConfigError("axis must not be empty", key)
            axes[key] = [_canon(key, v) for v in value]
        else:
            base[key] = _canon(key, value)
    if seeds is not None:
        axes.pop("seed", None)
        axes["seed"] = [int(s) for s in seeds]
    if base["task"] not in TASKS:
        raise ConfigError(f"unknown task {base['task']!r}; expected one of {TASKS}", "task")
    parts = [load_config(inc, seeds, _seen) for inc in base.pop("include")]
    grid = ExperimentGrid(base["task"], base["name"], base, axes, base["output_dir"], parts)
    if axes or not parts:
        for params in grid.own_runs():
            validate_params(params)
    return grid


def parse_method(method):
    """``"dlnn"``, ``"dlnn:<optimizer>:<depth>:<penalty>"`` or a baseline name."""
    method = str(method)
    if method in BASELINE_METHODS:
        return {"method": method}
    parts = method.split(":")
    if parts[0] != "dlnn":
        raise ConfigError(f"unknown method {method!r}", "method")
    if len(parts) == 1:
        return {"method": "dlnn"}
    if len(parts) < 4:
        raise ConfigError(f"expected dlnn:<optimizer>:<depth>:<penalty>, got {method!r}", "method")
    try:
        depth = int(parts[2])
    except ValueError as exc:
        raise ConfigError(f"bad depth in {method!r}", "method") from exc
    return {"method": "dlnn", "optimizer": parts[1], "depth": depth, "penalty": ":".join(parts[3:])}


def resolve_params(params):
    """Apply a compound ``method`` and return the effective parameters."""
    out = dict(params)
    out.update(parse_method(params["method"]))
    if out["task"] == "baseline" and out["method"] == "dlnn":
        out["method"] = "soft_impute"
    return out


def validate_params(params):
    from .data import SyntheticSpec, resolve_data_path

    p = resolve_params(params)
    task = p["task"]
    if task in ("synthetic", "baseline"):
        SyntheticSpec(p["m"], p["n"], p["rank"], p["sample_size"], p["seed"])
    if task in ("synthetic", "movielens") and p["method"] == "dlnn":
        OptimizerSpec(p["optimizer"], lr=p["lr"])
        parse_penalty(p["penalty"], p["lambda"])
        if p["depth"] < 1:
            raise ConfigError("depth must be >= 1", "depth")
    if task == "movielens":
        path = resolve_data_path(p["data_path"])
        if not path.exists():
            raise ConfigError(f"dataset not found: {path}", "data_path")
        if p["model"] not in ("lnn", "embedding"):
            raise ConfigError(f"unknown model {p['model']!r}", "model")
        if not 0 < p["split"] <= 1:
            raise ConfigError("split must lie in (0, 1]", "split")
    if task == "oracle-validation":
        from .dynamics import _regime

        try:
            _regime(p["regime"])
        except DeepMCError as exc:
            raise ConfigError(str(exc), "regime") from exc
        if not 0 < p["alpha"] <= 1e-4:
            raise ConfigError("alpha must lie in (0, 1e-4]", "alpha")
        parse_penalty(p["penalty"], p["lambda"])
    return p


def run_id(params):
    blob = json.dumps({k: params[k] for k in sorted(params) if k not in ("output_dir", "name")}, sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def run_label(params):
    p = resolve_params(params)
    if p["task"] == "oracle-validation":
        return f"{p['regime']}:{p['depth']}"
    if p["task"] == "movielens" and p["model"] == "embedding":
        pen = parse_penalty(p["penalty"], 1.0)
        return f"embedding+{pen.token}"
    if p["method"] != "dlnn":
        return p["method"]
    opt = OptimizerSpec(p["optimizer"]).label
    pen = parse_penalty(p["penalty"], p["lambda"])
    label = f"{opt}:{p['depth']}+{pen.token}"
    if pen.kind != "none":
        label += f"@{p['lambda']:g}"
    return label


def _final_metrics(snaps):
    if not snaps:
        return math.nan, math.nan
    return float(snaps[-1].test_error), float(snaps[-1].effective_rank)


def round_rank(value):
    """Nearest integer with halves rounded up."""
    return int(math.floor(value + 0.5)) if math.isfinite(value) else None


def _train_dlnn(p, data, snap_path, bias=None):
    from .models import init_gaussian
    from .training import TrainConfig, snapshots_to_csv, train

    m, n = data.shape
    width = p["width"] or n
    dims = [n] + [width] * (p["depth"] - 1) + [m]
    net = init_gaussian(dims, p["init_std"], p["seed"], bias=bias)
    cfg = TrainConfig(
        max_iters=p["max_iters"],
        loss_floor=p["loss_floor"],
        snapshot_every=p["snapshot_every"],
        seed=p["seed"],
        penalty=parse_penalty(p["penalty"], p["lambda"]),
        optimizer=OptimizerSpec(p["optimizer"], lr=p["lr"]),
        top_k=p["top_k"],
        plateau_tol=p["plateau_tol"] or None,
        plateau_window=p["plateau_window"],
        plateau_arm=p["plateau_arm"],
    )
    try:
        res = train(net, data, cfg)
        status = "ok"
    except DivergedError as exc:
        res = exc.result
        status = "diverged"
    snapshots_to_csv(res.snapshots, snap_path, cfg.top_k)
    return res, status


def execute_run(params, out_dir):
    """Run one configuration and write its snapshot CSV and record JSON."""
    from . import baselines as bl
    from .data import SyntheticSpec, generate_low_rank, load_movielens, resolve_data_path, rmse
    from .training import snapshots_to_csv

    p = resolve_params(params)
    rid = run_id(params)
    runs_dir = Path(out_dir) / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    snap_path = runs_dir / f"{rid}.csv"
    record = {
        "run_id": rid,
        "label": run_label(params),
        "params": params,
        "status": "ok",
        "stop_reason": None,
        "test_error": math.nan,
        "effective_rank": math.nan,
        "effective_rank_rounded": None,
        "test_rmse": math.nan,
        "iterations": 0,
        "wall_time": 0.0,
        "snapshot_path": str(snap_path.relative_to(out_dir)),
        "error": None,
    }
    t0 = time.perf_counter()
    try:
        task = p["task"]
        if task in ("synthetic", "baseline"):
            data = generate_low_rank(SyntheticSpec(p["m"], p["n"], p["rank"], p["sample_size"], p["seed"]))
            if p["method"] == "dlnn":
                res, status = _train_dlnn(p, data, snap_path)
                record["status"] = status
                record["stop_reason"] = res.stop_reason
                record["iterations"] = res.iterations
                record["test_error"], record["effective_rank"] = _final_metrics(res.snapshots)
            else:
                kw = {"max_iters": p["baseline_iters"]} if p["baseline_iters"] else {}
                if p["method"] == "soft_impute":
                    out = bl.soft_impute(data, shrink=p["shrink"] or None, **kw)
                elif p["method"] == "soft_impute_path":
                    out = bl.soft_impute_path(data, **kw)
                else:
                    out = bl.nuclear_min(data, **kw)
                snaps = bl.baseline_snapshots(out, data, p["top_k"])
                snapshots_to_csv(snaps, snap_path, p["top_k"])
                record["stop_reason"] = "converged" if out.converged else "max_iters"
                record["iterations"] = out.iterations
                record["test_error"], record["effective_rank"] = _final_metrics(snaps)
        elif task == "movielens":
            train_m, test = load_movielens(resolve_data_path(p["data_path"]), p["split"], p["seed"])
            if p["model"] == "lnn":
                res, status = _train_dlnn(p, train_m, snap_path, bias=p["bias"] or None)
                record["status"] = status
                record["stop_reason"] = res.stop_reason
                record["iterations"] = res.iterations
                pred = res.net.predict_matrix()
                record["effective_rank"] = _final_metrics(res.snapshots)[1]
                record["test_rmse"] = rmse(pred[test.users, test.items], test.ratings)
            else:
                from .estimators import EmbeddingRecommender

                est = EmbeddingRecommender(
                    n_factors=p["n_factors"], optimizer=p["optimizer"], lr=p["lr"], batch_size=p["batch_size"],
                    n_epochs=p["n_epochs"], penalty=p["penalty"], lam_user=p["lam_user"], lam_item=p["lam_item"],
                    seed=p["seed"], n_users=train_m.shape[0], n_items=train_m.shape[1],
                )
                est.fit(np.column_stack([train_m.rows, train_m.cols]), train_m.values)
                record["iterations"] = est.n_iter_
                record["stop_reason"] = "epochs"
                record["test_rmse"] = rmse(est.predict(np.column_stack([test.users, test.items])), test.ratings)
                with open(snap_path, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["epoch", "train_mse"])
                    w.writerows(enumerate(est.train_mse_, start=1))
        else:
            record.update(_oracle_run(p, runs_dir / f"{rid}.report.json"))
            record["snapshot_path"] = str((runs_dir / f"{rid}.report.json").relative_to(out_dir))
    except Exception as exc:  # a failed run is recorded, never fatal to the grid
        log.exception("run %s failed", rid)
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["wall_time"] = time.perf_counter() - t0
    record["effective_rank_rounded"] = round_rank(record["effective_rank"])
    (runs_dir / f"{rid}.json").write_text(json.dumps(record, indent=2, default=_json_default))
    return record


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj).__name__)


def oracle_instance(size, depth, seed):
    """Balanced net with well-separated singular values plus a random masked target."""
    from .dynamics import balanced_net
    from .training import MaskedMatrix

    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.standard_normal((size, size)))
    v, _ = np.linalg.qr(rng.standard_normal((size, size)))
    sigma = np.linspace(2.0, 0.4, size)
    net = balanced_net(u @ np.diag(sigma) @ v.T, depth, seed=seed)
    truth = rng.standard_normal((size, size))
    mask = rng.random((size, size)) < 0.6
    mask.flat[rng.integers(size * size)] = True
    return net, MaskedMatrix.from_dense(np.where(mask, truth, np.nan))


def _oracle_run(p, report_path):
    from .dynamics import validate_against_trainer

    net, data = oracle_instance(p["size"], p["depth"], p["seed"])
    penalty = parse_penalty(p["penalty"], p["lambda"]) if "penalty" in p["regime"] else None
    rep = validate_against_trainer(p["regime"], net, data, p["alpha"], penalty=penalty, ladder=p["ladder"])
    rep.to_json(report_path)
    return {
        "stop_reason": "validated",
        "max_deviation": rep.max_deviation[0],
        "richardson_ratios": rep.richardson_ratios,
        "psd_margin": rep.psd_margin,
        "degenerate": rep.degenerate,
    }


def _worker(args):
    params, out_dir = args
    return execute_run(params, out_dir)


_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


@dataclass
class GridSummary:
    out_dir: Path
    records: list
    summary_rows: list
    manifest_path: Path
    summary_path: Path

    @property
    def n_failed(self):
        return sum(r["status"] == "failed" for r in self.records)


def run_grid(config, out=None, seeds=None, jobs=None, force=False) -> GridSummary:
    """Run every configuration of a grid and write the summary and manifest.

    Completed runs (same parameter hash) are reused unless ``force``. With
    ``jobs > 1`` runs fan out to single-threaded worker processes.
    """
    grid = config if isinstance(config, ExperimentGrid) else load_config(config, seeds)
    out_dir = Path(out or grid.output_dir or Path("results") / grid.name)
    (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    runs = grid.runs()
    records = [None] * len(runs)
    todo = []
    for i, params in enumerate(runs):
        existing = out_dir / "runs" / f"{run_id(params)}.json"
        if existing.exists() and not force:
            records[i] = json.loads(existing.read_text())
        else:
            todo.append(i)
    log.info("%d runs, %d cached, %d to execute", len(runs), len(runs) - len(todo), len(todo))
    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(todo) > 1:
        saved = {k: os.environ.get(k) for k in _THREAD_VARS}
        os.environ.update({k: "1" for k in _THREAD_VARS})
        try:
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                for i, rec in zip(todo, pool.map(_worker, [(runs[i], out_dir) for i in todo])):
                    records[i] = rec
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    else:
        for i in todo:
            records[i] = execute_run(runs[i], out_dir)
    axis_names = grid.axis_names
    rows = summarize(records, axis_names)
    summary_path = out_dir / "summary.csv"
    write_summary_csv(rows, summary_path)
    manifest = {
        "name": grid.name,
        "task": grid.task,
        "axes": axis_names,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "summary": summary_path.name,
        "runs": records,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, default=_json_default))
    return GridSummary(out_dir, records, rows, manifest_path, summary_path)


def _stats(values):
    vals = np.array([v for v in values if v is not None], dtype=float)
    if vals.size == 0:
        return math.nan, math.nan
    mean = float(np.mean(vals))
    err = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return mean, err


def _group_key(record, axis_names):
    params = record["params"]
    return tuple(params.get(k) for k in axis_names if k != "seed") + (record["label"],)


def summarize(records, axis_names):
    """Mean and standard error over seeds for every other axis combination."""
    groups = {}
    for rec in records:
        groups.setdefault(_group_key(rec, axis_names), []).append(rec)
    keys = [k for k in axis_names if k != "seed"]
    rows = []
    for gkey, recs in groups.items():
        row = dict(zip(keys, gkey[:-1]))
        row["label"] = gkey[-1]
        row["n_runs"] = len(recs)
        row["n_failed"] = sum(r["status"] == "failed" for r in recs)
        row["n_diverged"] = sum(r["status"] == "diverged" for r in recs)
        for metric in _SUMMARY_METRICS:
            mean, err = _stats([r.get(metric) for r in recs])
            row[f"{metric}_mean"] = mean
            row[f"{metric}_stderr"] = err
        row["effective_rank_rounded"] = round_rank(row["effective_rank_mean"])
        rows.append(row)
    return rows


def write_summary_csv(rows, path):
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}", "manifest")
    return json.loads(path.read_text()), path.parent


# table layouts: rows are (optimizer, depth), columns penalty tokens
_RATIO_COLS = ["ratio", "schatten_ratio:1/2:2/3", "schatten_ratio:1/3:2/3", "schatten_ratio:1/3:1/2", "nuclear", "none"]
_COL_TITLES = {
    "ratio": "Ratio",
    "schatten_ratio:1/2:2/3": "Sch 1/2:2/3",
    "schatten_ratio:1/3:2/3": "Sch 1/3:2/3",
    "schatten_ratio:1/3:1/2": "Sch 1/3:1/2",
    "nuclear": "Nuc",
    "none": "None",
    "schatten:1/3": "Sch 1/3",
    "schatten:1/2": "Sch 1/2",
    "schatten:2/3": "Sch 2/3",
}
TABLE_LAYOUTS = {
    "table1": (["adam", "adagrad", "adamax", "rmsprop", "gd"], _RATIO_COLS),
    "table3": (["adam_amsgrad", "adadelta", "gd_momentum", "adamw", "nadam", "radam"], _RATIO_COLS),
    "table4": (["adam_amsgrad", "adam", "adagrad", "adamax", "rmsprop", "gd_momentum"],
               ["schatten:1/3", "schatten:1/2", "schatten:2/3"]),
}
MISSING = "\u2014"


def format_error(value):
    """``4.2e-7`` renders as ``4e-7`` (typographic minus); values in [0.01, 1000) keep two decimals."""
    if value is None or not math.isfinite(value):
        return "div" if value is not None and math.isinf(value) else MISSING
    if value == 0:
        return "0"
    if 0.01 <= abs(value) < 1000:
        return f"{value:.2f}"
    exp = int(math.floor(math.log10(abs(value))))
    mant = math.copysign(math.floor(abs(value) / 10**exp + 0.5), value)
    mant = int(mant)
    if abs(mant) == 10:
        mant //= 10
        exp += 1
    sign = "\u2212" if exp < 0 else "+"
    return f"{mant}e{sign}{abs(exp)}"


def format_cell(err, rank):
    if err is None or (isinstance(err, float) and math.isnan(err)):
        return MISSING
    r = round_rank(rank) if rank is not None else None
    return f"{format_error(err)} / {r if r is not None else MISSING}"


def _index_records(records):
    """``{(optimizer_label, depth, penalty_token): [records]}`` for DLNN runs."""
    out = {}
    for rec in records:
        p = resolve_params(rec["params"])
        if p["task"] != "synthetic" or p["method"] != "dlnn":
            continue
        try:
            key = (OptimizerSpec(p["optimizer"]).label, int(p["depth"]), parse_penalty(p["penalty"]).token)
        except DeepMCError:
            continue
        out.setdefault(key, []).append(rec)
    return out


def _cell_stats(recs):
    ok = [r for r in recs if r["status"] != "failed"]
    if not ok:
        return None, None
    return _stats([r["test_error"] for r in ok])[0], _stats([r["effective_rank"] for r in ok])[0]


def report_table(manifest, preset="table1"):
    """Render a table as ``(text, csv_text, warnings)``.

    Table presets lay out Err/Rk cells; ``table2`` lays out MovieLens RMSE;
    any other name renders one line per summary group.
    """
    if isinstance(manifest, (str, Path)):
        manifest, _ = load_manifest(manifest)
    records = manifest.get("runs", [])
    if preset == "appendix-tables":
        parts = [report_table(manifest, t) for t in ("table3", "table4")]
        return ("\n\n".join(p[0] for p in parts), "\n".join(p[1] for p in parts), sum((p[2] for p in parts), []))
    if preset in TABLE_LAYOUTS:
        return _render_grid_table(records, preset)
    if preset == "table2":
        return _render_movielens_table(records)
    return _render_summary(records, manifest.get("axes", []))


def _render_grid_table(records, preset):
    optimizers, cols = TABLE_LAYOUTS[preset]
    index = _index_records(records)
    header = ["Optimizer", "Depth"] + [_COL_TITLES[c] for c in cols]
    rows, warns = [], []
    for opt in optimizers:
        for depth in (1, 3):
            row = [opt, str(depth)]
            for col in cols:
                recs = index.get((opt, depth, col), [])
                err, rk = _cell_stats(recs)
                if err is None:
                    warns.append(f"missing cell {opt}/depth {depth}/{_COL_TITLES[col]}")
                row.append(format_cell(err, rk))
            rows.append(row)
    return _render(header, rows), _csv_text(header, rows), warns


def _render_movielens_table(records):
    groups = {}
    for rec in records:
        p = resolve_params(rec["params"])
        if p["task"] != "movielens":
            continue
        groups.setdefault((rec["label"], p["split"]), []).append(rec)
    splits = sorted({s for _, s in groups}, reverse=True) or [0.9, 0.8]
    labels = sorted({l for l, _ in groups})
    header = ["Model"] + [f"RMSE {round(s * 100)}:{round(100 - s * 100)}" for s in splits]
    rows, warns = [], []
    for label in labels:
        row = [label]
        for s in splits:
            recs = [r for r in groups.get((label, s), []) if r["status"] != "failed"]
            if not recs:
                warns.append(f"missing cell {label}/split {s}")
                row.append(MISSING)
            else:
                row.append(f"{_stats([r['test_rmse'] for r in recs])[0]:.3f}")
        rows.append(row)
    if not rows:
        warns.append("no MovieLens runs in manifest")
    return _render(header, rows), _csv_text(header, rows), warns


def _render_summary(records, axis_names):
    rows_in = summarize(records, axis_names) if records else []
    header = ["Series", "Runs", "Err", "Rk"]
    rows = []
    for r in rows_in:
        extra = [f"{k}={r[k]}" for k in axis_names if k not in ("seed", "method", "optimizer", "depth", "penalty", "lambda") and k in r]
        name = r["label"] + ("|" + "|".join(extra) if extra else "")
        rows.append([name, str(r["n_runs"]), format_error(r["test_error_mean"]), str(r["effective_rank_rounded"])])
    warns = [] if rows else ["manifest holds no runs"]
    return _render(header, rows), _csv_text(header, rows), warns


def _render(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


TRAJECTORY_METRICS = ("train_loss", "test_error", "effective_rank")


def _series_name(rec, axis_names):
    p = rec["params"]
    extra = [f"{k}={p[k]}" for k in axis_names
             if k not in ("seed", "method", "optimizer", "depth", "penalty", "lambda") and k in p]
    return rec["label"] + ("|" + "|".join(extra) if extra else "")


def emit_plot_data(manifest, figure="fig1", out=None):
    """Long-format ``series,x_name,x,metric,value,stderr,n`` rows.

    ``fig4`` indexes each method by sample size using final metrics; every
    other figure averages snapshot trajectories over seeds per iteration.
    Returns ``(csv_text, warnings)``.
    """
    if isinstance(manifest, (str, Path)):
        manifest, root = load_manifest(manifest)
    else:
        root = Path(manifest.get("root", "."))
    records = [r for r in manifest.get("runs", []) if r["status"] != "failed"]
    axis_names = manifest.get("axes", [])
    rows, warns = [], []
    if figure == "fig4":
        groups = {}
        for rec in records:
            groups.setdefault((rec["label"], rec["params"]["sample_size"]), []).append(rec)
        for (label, size), recs in sorted(groups.items()):
            for metric in ("test_error", "effective_rank"):
                mean, err = _stats([r[metric] for r in recs])
                rows.append([label, "sample_size", size, metric, mean, err, len(recs)])
    else:
        from .training import snapshots_from_csv

        series = {}
        for rec in records:
            path = root / rec["snapshot_path"]
            if not path.exists():
                warns.append(f"missing snapshot file {path}")
                continue
            try:
                snaps = snapshots_from_csv(path)
            except (KeyError, ValueError) as exc:
                warns.append(f"unreadable snapshot file {path}: {exc}")
                continue
            rank = int(rec["params"].get("rank", 5))
            name = _series_name(rec, axis_names)
            bucket = series.setdefault(name, {})
            for s in snaps:
                vals = {m: getattr(s, m) for m in TRAJECTORY_METRICS}
                vals["sv_1"] = s.top_singular_values[0] if s.top_singular_values.size else math.nan
                if s.top_singular_values.size >= rank:
                    vals[f"sv_{rank}"] = s.top_singular_values[rank - 1]
                for metric, v in vals.items():
                    bucket.setdefault((s.iter, metric), []).append(float(v))
        for name in sorted(series):
            for (it, metric), vals in sorted(series[name].items()):
                mean, err = _stats(vals)
                rows.append([name, "iter", it, metric, mean, err, len(vals)])
    header = ["series", "x_name", "x", "metric", "value", "stderr", "n"]
    text = _csv_text(header, [[*r[:4], repr(r[4]), repr(r[5]), r[6]] for r in rows])
    if out is not None:
        Path(out).write_text(text)
    return text, warns
