"""File-based pipeline: simulate -> cluster -> ddg -> fit-stdr -> forecast ->
fit-mrstk -> correct -> evaluate.

Stages communicate only through artifacts in the output directory, so any
stage can be rerun from the earliest missing file. All stages are
deterministic given the configured seeds; wall-clock timings go to a
separate sidecar so reports stay byte-reproducible.
"""

from __future__ import annotations

import csv
import json
import math
import shutil
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import baselines, graph, kriging, metrics, stdr, synth
from .data import (ClusterAssignment, ResolutionView, load_wind_csv,
                   file_checksum, kmeans_cluster, aggregate,
                   pairwise_distances, InsufficientHistoryError)

STAGES = ["simulate", "cluster", "ddg", "fit-stdr", "forecast", "fit-mrstk",
          "correct", "evaluate"]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


@dataclass
class PipelineConfig:
    resolutions: list                 # [(kappa, eta), ...]
    test_start: int                   # raw time units, inclusive
    test_end: int                     # raw time units, exclusive
    val_steps: int = 32               # raw units before test_start fed to the GP
    input: str | None = None          # existing CSV; otherwise simulate
    synth: dict = field(default_factory=dict)
    stdr: dict = field(default_factory=dict)
    mrstk: dict = field(default_factory=dict)
    support_radius_km: float = graph.DEFAULT_RADIUS_KM
    ddg_threshold_rad: float = graph.DEFAULT_THRESHOLD_RAD
    var_order: int = 10
    correct_window: int | None = None   # raw units of residual history; default val_steps
    correct_max_points: int = 400
    seed: int = 0

    def __post_init__(self):
        if not self.resolutions:
            raise ConfigError("resolution set must be non-empty")
        self.resolutions = [(int(k), int(e)) for k, e in self.resolutions]
        if any(k < 1 or e < 1 for k, e in self.resolutions):
            raise ConfigError("resolutions must be positive (kappa, eta) pairs")
        if not 0 < self.test_start < self.test_end:
            raise ConfigError("need 0 < test_start < test_end")
        if self.val_steps < 1:
            raise ConfigError("val_steps must be >= 1")

    @classmethod
    def from_json_file(cls, path) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def stdr_config(self) -> stdr.StdrConfig:
        return stdr.StdrConfig(**{"seed": self.seed, **self.stdr})

    def svgp_config(self) -> kriging.SvgpConfig:
        return kriging.SvgpConfig(**{"seed": self.seed, **self.mrstk})


def _res_tag(kappa: int, eta: int) -> str:
    return f"k{kappa}_e{eta}"


def _write_json(path: Path, payload) -> None:
    path.write_text(payload if isinstance(payload, str)
                    else json.dumps(payload, sort_keys=True, indent=1),
                    encoding="utf-8")


def _test_indices(cfg: PipelineConfig, eta: int, n_times: int):
    val_start = cfg.test_start - cfg.val_steps
    val = [t for t in range(n_times)
           if val_start <= t * eta < cfg.test_start]
    test = [t for t in range(n_times)
            if cfg.test_start <= t * eta < cfg.test_end]
    return val, test


# --- stages -----------------------------------------------------------------

def stage_simulate(cfg: PipelineConfig, out: Path) -> None:
    if cfg.input:
        shutil.copyfile(cfg.input, out / "wind.csv")
        return
    scfg = synth.SynthConfig(**{"seed": cfg.seed, **cfg.synth})
    catalog, records, truth = synth.generate_wind_field(scfg)
    synth.write_wind_csv(catalog, records, out / "wind.csv")
    synth.write_truth_json(truth, out / "truth.json")


def stage_cluster(cfg: PipelineConfig, out: Path) -> None:
    checksum = file_checksum(out / "wind.csv")
    catalog, _ = load_wind_csv(out / "wind.csv")
    for kappa in sorted({k for k, _ in cfg.resolutions}):
        assignment = kmeans_cluster(catalog, kappa, seed=cfg.seed,
                                    source_checksum=checksum)
        _write_json(out / f"cluster_k{kappa}.json", assignment.to_json())


def stage_ddg(cfg: PipelineConfig, out: Path) -> None:
    _, records = load_wind_csv(out / "wind.csv")
    for kappa, eta in cfg.resolutions:
        assignment = ClusterAssignment.from_json(
            (out / f"cluster_k{kappa}.json").read_text())
        view = aggregate(records, assignment, eta)
        _write_json(out / f"view_{_res_tag(kappa, eta)}.json", view.to_json())
        support = graph.build_support(assignment.centroids,
                                      cfg.support_radius_km)
        if support.n_edges:
            bearings = graph.cardinal_bearings(assignment.centroids, support)
            ddg = graph.extract_ddg(view, bearings, support,
                                    cfg.ddg_threshold_rad)
            distances = pairwise_distances(assignment.centroids)
            travel = graph.estimate_travel_times(view, support, distances)
            (out / f"lambda_{_res_tag(kappa, eta)}.csv").write_text(
                travel.to_csv(), encoding="utf-8")
        else:
            ddg = graph.DynamicGraph(
                support=support,
                active=np.zeros((0, view.n_times), dtype=bool),
                threshold_rad=cfg.ddg_threshold_rad)
        _write_json(out / f"ddg_{_res_tag(kappa, eta)}.json", ddg.to_json())


def _load_system(cfg: PipelineConfig, out: Path, kappa: int, eta: int):
    assignment = ClusterAssignment.from_json(
        (out / f"cluster_k{kappa}.json").read_text())
    view = ResolutionView.from_json(
        (out / f"view_{_res_tag(kappa, eta)}.json").read_text())
    ddg = graph.DynamicGraph.from_json(
        (out / f"ddg_{_res_tag(kappa, eta)}.json").read_text())
    distances = pairwise_distances(assignment.centroids)
    travel = graph.estimate_travel_times(view, ddg.support, distances)
    return assignment, view, stdr.EdgeSystem(ddg, travel)


def stage_fit_stdr(cfg: PipelineConfig, out: Path) -> None:
    config = cfg.stdr_config()
    for kappa, eta in cfg.resolutions:
        _, view, system = _load_system(cfg, out, kappa, eta)
        val_start = cfg.test_start - cfg.val_steps
        train_end = min(math.ceil(val_start / eta), view.n_times)
        params, meta = stdr.fit(view.prefix(train_end, config.memory_depth + 1),
                                system, config)
        _write_json(
            out / f"stdr_{_res_tag(kappa, eta)}.json",
            params.to_json(kappa=kappa, eta=eta,
                           support_edges=system.support_edges,
                           config=config, final_loss=meta["final_loss"]))


def _write_forecast_csv(path: Path, view: ResolutionView, ts, preds) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "t", "y_true", "f_pred"])
        for col, t in enumerate(ts):
            for i in range(view.kappa):
                writer.writerow([i, t, repr(float(view.speeds[i, t])),
                                 repr(float(preds[i, col]))])


def _read_forecast_csv(path: Path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append((int(row["i"]), int(row["t"]), float(row["y_true"]),
                         float(row["f_pred"])))
    return rows


def stage_forecast(cfg: PipelineConfig, out: Path) -> None:
    config = cfg.stdr_config()
    for kappa, eta in cfg.resolutions:
        _, view, system = _load_system(cfg, out, kappa, eta)
        val, test = _test_indices(cfg, eta, view.n_times)
        ts = val + test
        if not ts:
            raise InsufficientHistoryError(
                f"no forecastable indices for resolution ({kappa},{eta})")
        preds = stdr.rolling_forecast(view, system, config, ts)
        tag = _res_tag(kappa, eta)
        _write_forecast_csv(out / f"forecast_{tag}.csv", view, ts, preds)

        persist = np.column_stack(
            [baselines.persistence_forecast(view, t) for t in ts])
        _write_forecast_csv(out / f"persistence_{tag}.csv", view, ts, persist)

        var_cols, var_ok = [], True
        for t in ts:
            try:
                params = baselines.var_fit(view.prefix(t, 1), cfg.var_order)
                var_cols.append(baselines.var_forecast(params, view, t))
            except (InsufficientHistoryError,
                    baselines.SingularDesignError):
                var_ok = False
                break
        if var_ok:
            _write_forecast_csv(out / f"var_{tag}.csv", view, ts,
                                np.column_stack(var_cols))


def _build_dataset(cfg: PipelineConfig, out: Path, which: str):
    """MultiResDataset from forecast CSVs; ``which`` is 'val' or 'test'."""
    X, ids, y, f = [], [], [], []
    for kappa, eta in cfg.resolutions:
        assignment = ClusterAssignment.from_json(
            (out / f"cluster_k{kappa}.json").read_text())
        view = ResolutionView.from_json(
            (out / f"view_{_res_tag(kappa, eta)}.json").read_text())
        val, test = _test_indices(cfg, eta, view.n_times)
        wanted = set(val if which == "val" else test)
        for i, t, yt, fp in _read_forecast_csv(
                out / f"forecast_{_res_tag(kappa, eta)}.csv"):
            if t not in wanted:
                continue
            lat, lon = assignment.centroids[i]
            X.append([lat, lon, float(t * eta), float(kappa), float(eta)])
            ids.append([i, t, kappa, eta])
            y.append(yt)
            f.append(fp)
    return kriging.MultiResDataset(X=np.asarray(X), ids=np.asarray(ids),
                                   y=np.asarray(y), f=np.asarray(f),
                                   resolutions=tuple(cfg.resolutions))


def _data_constants(out: Path) -> tuple[float, float]:
    catalog, records = load_wind_csv(out / "wind.csv")
    return float(catalog.n_farms), float(records.n_times)


def stage_fit_mrstk(cfg: PipelineConfig, out: Path) -> None:
    dataset = _build_dataset(cfg, out, "val")
    k_max, t_max = _data_constants(out)
    bias = kriging.estimate_cluster_bias(dataset)
    config = cfg.svgp_config()
    config.n_inducing = min(config.n_inducing, dataset.n)
    state, params, trace = kriging.fit_svgp(dataset, config, bias=bias,
                                            k_max=k_max, t_max=t_max)
    _write_json(out / "svgp.json", state.to_json(params, seed=config.seed))
    _write_json(out / "svgp_bias.json", json.dumps(
        {f"{k},{i}": v for (k, i), v in sorted(bias.values.items())},
        sort_keys=True))
    np.savetxt(out / "svgp_elbo_trace.csv", trace, header="elbo", comments="")


def _load_bias(out: Path) -> kriging.ClusterBias:
    d = json.loads((out / "svgp_bias.json").read_text())
    return kriging.ClusterBias(
        {tuple(int(x) for x in key.split(",")): v for key, v in d.items()})


def stage_correct(cfg: PipelineConfig, out: Path) -> None:
    state, params = kriging.SvgpState.from_json((out / "svgp.json").read_text())
    bias = _load_bias(out)
    past = _build_dataset(cfg, out, "val")
    dataset = _build_dataset(cfg, out, "test")
    corrected = kriging.rolling_correct(
        past, dataset, params, state.noise_var, bias=bias,
        window_raw=cfg.correct_window or cfg.val_steps,
        max_points=cfg.correct_max_points)
    lo1, hi1 = corrected.intervals[1.0]
    lo2, hi2 = corrected.intervals[2.0]
    with open(out / "corrected.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kappa", "eta", "i", "t", "y_true", "f_stdr",
                         "f_corrected", "ci1_lo", "ci1_hi", "ci2_lo",
                         "ci2_hi"])
        for n in range(dataset.n):
            i, t, kappa, eta = dataset.ids[n]
            writer.writerow([kappa, eta, i, t] +
                            [repr(float(v)) for v in
                             (dataset.y[n], dataset.f[n], corrected.mean[n],
                              lo1[n], hi1[n], lo2[n], hi2[n])])


def stage_evaluate(cfg: PipelineConfig, out: Path) -> None:
    per_resolution = {}
    for kappa, eta in cfg.resolutions:
        tag = _res_tag(kappa, eta)
        view = ResolutionView.from_json(
            (out / f"view_{tag}.json").read_text())
        _, test = _test_indices(cfg, eta, view.n_times)
        wanted = set(test)
        entry = {}
        for method, fname in [("stdr", f"forecast_{tag}.csv"),
                              ("persistence", f"persistence_{tag}.csv"),
                              ("var", f"var_{tag}.csv")]:
            path = out / fname
            if not path.exists():
                entry[method] = None
                continue
            rows = [(yt, fp) for _, t, yt, fp in _read_forecast_csv(path)
                    if t in wanted]
            mae, pct = metrics.compute_mae([r[0] for r in rows],
                                           [r[1] for r in rows])
            entry[method] = {"mae": mae, "mae_pct": pct}
        per_resolution[f"{kappa},{eta}"] = entry

    # MRSTK from the corrected CSV
    mrstk_rows: dict[str, list] = {}
    coverage_num = {1: 0, 2: 0}
    coverage_den = 0
    with open(out / "corrected.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = f"{row['kappa']},{row['eta']}"
            y, fc = float(row["y_true"]), float(row["f_corrected"])
            mrstk_rows.setdefault(key, []).append((y, fc))
            coverage_den += 1
            if float(row["ci1_lo"]) <= y <= float(row["ci1_hi"]):
                coverage_num[1] += 1
            if float(row["ci2_lo"]) <= y <= float(row["ci2_hi"]):
                coverage_num[2] += 1
    for key, rows in mrstk_rows.items():
        mae, pct = metrics.compute_mae([r[0] for r in rows],
                                       [r[1] for r in rows])
        per_resolution[key]["mrstk"] = {"mae": mae, "mae_pct": pct}

    aggregate_entry = {}
    for method in ["stdr", "mrstk", "persistence", "var"]:
        maes = [e[method]["mae"] for e in per_resolution.values()
                if e.get(method)]
        aggregate_entry[method] = float(np.mean(maes)) if maes else None
    report = {
        "per_resolution": per_resolution,
        "aggregate_mae": aggregate_entry,
        "coverage": {
            "1_sigma": coverage_num[1] / coverage_den if coverage_den else None,
            "2_sigma": coverage_num[2] / coverage_den if coverage_den else None,
        },
        "test_range_raw": [cfg.test_start, cfg.test_end],
        "resolutions": [list(r) for r in cfg.resolutions],
        "seed": cfg.seed,
    }
    _write_json(out / "report.json", report)

    with open(out / "mae_by_resolution.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kappa", "eta", "stdr_mae", "mrstk_mae",
                         "persistence_mae", "var_mae"])
        for key, entry in per_resolution.items():
            kappa, eta = key.split(",")
            writer.writerow(
                [kappa, eta]
                + [repr(entry[m]["mae"]) if entry.get(m) else ""
                   for m in ["stdr", "mrstk", "persistence", "var"]])

    with open(out / "interval_series.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kappa", "eta", "i", "t", "y_true", "f_corrected",
                         "ci1_lo", "ci1_hi", "ci2_lo", "ci2_hi"])
        with open(out / "corrected.csv", newline="", encoding="utf-8") as src:
            for row in csv.DictReader(src):
                writer.writerow([row["kappa"], row["eta"], row["i"], row["t"],
                                 row["y_true"], row["f_corrected"],
                                 row["ci1_lo"], row["ci1_hi"], row["ci2_lo"],
                                 row["ci2_hi"]])


_STAGE_FUNCS = {
    "simulate": stage_simulate,
    "cluster": stage_cluster,
    "ddg": stage_ddg,
    "fit-stdr": stage_fit_stdr,
    "forecast": stage_forecast,
    "fit-mrstk": stage_fit_mrstk,
    "correct": stage_correct,
    "evaluate": stage_evaluate,
}


def run_stage(name: str, cfg: PipelineConfig, out: Path) -> float:
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        _STAGE_FUNCS[name](cfg, out)
    except ConfigError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    return time.perf_counter() - start


def run_pipeline(cfg: PipelineConfig, out: Path) -> dict:
    """All stages in order; timings go to a non-deterministic sidecar."""
    timings = {}
    for name in STAGES:
        timings[name] = run_stage(name, cfg, out)
    _write_json(out / "timings.json", timings)
    return json.loads((out / "report.json").read_text())
