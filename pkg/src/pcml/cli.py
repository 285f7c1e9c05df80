"""Experiment runner: a JSON config in, tables and SVG plots out.

Subcommands: ``run`` trains and scores every configured seed and writes a
manifest, metrics table, per-seed reports and plots; ``generate-data``
writes only the per-seed datasets; ``evaluate`` aggregates an existing run
directory into a JSON summary on stdout; ``compare`` runs the paired
unconstrained-vs-constrained sweep; ``plot`` renders a single CSV to SVG.

Reproducibility contract: a fixed (config, seed) determines every numeric
output byte.  Floats are serialized with repr, rows are emitted in a fixed
order by a single writer, and the SVG backend is pinned to a fixed hash
salt with no embedded timestamps.  Wall-clock time is the one exception
and is confined to the wall_time_s column of metrics.csv and
comparison.csv.  Outputs are staged in a temporary directory and moved
into place only once the whole run has succeeded, so an interrupted run
leaves no partial artifacts.
"""

import argparse
import csv
import dataclasses
import json
import os
import platform
import shutil
import sys
import tempfile
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import __version__, bench
from .autodiff import NumericOverflowError
from .model import FixedPointError
from .physics import OdeBlowUpError
from .project import ProjectionNonConvergenceError
from .train import (
    DivergenceError,
    Predictor,
    ProjectionTrainingError,
    SimultaneousStallError,
    TrainConfig,
    train,
)
from .uq import PosteriorDrawError, VIConfig, predictive_bands, train_vi

__all__ = [
    "CliError",
    "ModelSpec",
    "UQSpec",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "config_to_json",
    "plot",
    "main",
]

_PROBLEMS = ("reactor", "mixer")
_TOPOLOGIES = ("ml_to_physics", "physics_to_ml", "bidirectional")
_PLOT_KINDS = ("trajectory", "bands", "loss")

_METRICS_COLUMNS = (
    "seed",
    "rmse_train",
    "rmse_test",
    "max_violation",
    "mean_violation",
    "coverage95",
    "mean_band_width",
    "termination",
    "wall_time_s",
)

# everything a single seed may legitimately die of; config errors and bugs
# are not in this list and surface as tracebacks
_SEED_FAILURES = (
    DivergenceError,
    ProjectionTrainingError,
    ProjectionNonConvergenceError,
    OdeBlowUpError,
    FixedPointError,
    NumericOverflowError,
    PosteriorDrawError,
)


class CliError(Exception):
    """User-facing failure; main() turns it into a JSON record on stderr."""

    def __init__(self, message: str, exit_code: int = 2):
        super().__init__(message)
        self.exit_code = int(exit_code)

    def record(self) -> str:
        return json.dumps({"error": str(self)}, sort_keys=True)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelSpec:
    hidden: Tuple[int, ...] = (16,)
    topology: str = "ml_to_physics"
    target_step: float = 0.1

    def __post_init__(self):
        if any((not isinstance(h, int)) or h < 1 for h in self.hidden):
            raise ValueError("hidden layer widths must be positive integers")
        if self.topology not in _TOPOLOGIES:
            raise ValueError(f"topology must be one of {_TOPOLOGIES}, got {self.topology!r}")
        if self.target_step <= 0:
            raise ValueError("target_step must be positive")


@dataclass(frozen=True)
class UQSpec:
    enabled: bool = False
    samples: int = 2000
    beta: float = 0.95
    epochs: int = 100
    elbo_samples: int = 8

    def __post_init__(self):
        if self.samples < 100:
            raise ValueError("samples must be at least 100 for stable quantiles")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie strictly between 0 and 1")
        if self.epochs < 1 or self.elbo_samples < 1:
            raise ValueError("epochs and elbo_samples must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    noise_sigma: float = 0.02
    n_train: int = 20
    n_test: int = 50
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    uq: UQSpec = field(default_factory=UQSpec)
    seeds: Tuple[int, ...] = (0,)
    out: Optional[str] = None

    def __post_init__(self):
        if self.problem not in _PROBLEMS:
            raise ValueError(f"problem must be one of {_PROBLEMS}, got {self.problem!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be at least 1")
        if not self.seeds:
            raise ValueError("seeds must be a non-empty list")
        if any((not isinstance(s, int)) or s < 0 for s in self.seeds):
            raise ValueError("seeds must be nonnegative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must not repeat; every seed names its own artifacts")
        if self.out is not None and not self.out:
            raise ValueError("out must be a non-empty path when given")


_NESTED = {
    "model": ModelSpec,
    "train": TrainConfig,
    "uq": UQSpec,
}


def _loc(section: str, name: str) -> str:
    return f"{section}.{name}" if section else name


def _scalar(typ, raw, where: str):
    if typ is bool:
        if not isinstance(raw, bool):
            raise CliError(f"config key {where!r} must be true or false")
        return raw
    if typ is int:
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise CliError(f"config key {where!r} must be an integer")
        return raw
    if typ is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise CliError(f"config key {where!r} must be a number")
        return float(raw)
    if typ is str:
        if not isinstance(raw, str):
            raise CliError(f"config key {where!r} must be a string")
        return raw
    raise CliError(f"config key {where!r} has an unsupported type")


def _int_tuple(raw, where: str) -> Tuple[int, ...]:
    if not isinstance(raw, list) or any(isinstance(x, bool) or not isinstance(x, int) for x in raw):
        raise CliError(f"config key {where!r} must be a list of integers")
    return tuple(raw)


def _coerce_section(cls, data, section: str):
    """Strict dict -> dataclass: unknown keys rejected, each field type-checked."""
    if not isinstance(data, dict):
        raise CliError(f"config section {section or 'top level'!r} must be a JSON object")
    fields = dataclasses.fields(cls)
    allowed = {f.name for f in fields}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise CliError(
            f"unknown config key {unknown[0]!r} in {section or 'the top level'}; "
            f"allowed keys: {sorted(allowed)}"
        )
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields:
        if f.name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise CliError(f"missing required config key {_loc(section, f.name)!r}")
            continue
        raw = data[f.name]
        where = _loc(section, f.name)
        typ = hints[f.name]
        if f.name in _NESTED:
            kwargs[f.name] = _coerce_section(_NESTED[f.name], raw, where)
        elif f.name == "al":
            kwargs[f.name] = _coerce_section(typ, raw, where)
        elif f.name in ("hidden", "seeds"):
            kwargs[f.name] = _int_tuple(raw, where)
        elif f.name == "z_bounds":
            if raw is None:
                kwargs[f.name] = None
            elif (
                isinstance(raw, list)
                and len(raw) == 2
                and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in raw)
            ):
                kwargs[f.name] = (float(raw[0]), float(raw[1]))
            else:
                raise CliError(f"config key {where!r} must be null or a [low, high] pair")
        elif f.name == "out":
            kwargs[f.name] = None if raw is None else _scalar(str, raw, where)
        else:
            kwargs[f.name] = _scalar(typ, raw, where)
    try:
        return cls(**kwargs)
    except ValueError as err:
        raise CliError(f"invalid config in {section or 'the top level'}: {err}") from err


def config_from_dict(data: dict) -> ExperimentConfig:
    """Validate a parsed JSON object and fill every default."""
    if isinstance(data, dict) and isinstance(data.get("train"), dict) and "seed" in data["train"]:
        raise CliError("per-run seeds come from the top-level 'seeds' list; remove train.seed")
    cfg = _coerce_section(ExperimentConfig, data, "")
    if cfg.out is None:
        cfg = replace(cfg, out=f"runs/{cfg.problem}_{cfg.train.mode}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file {path} does not exist")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as err:
        raise CliError(f"config file {path} is not UTF-8: {err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise CliError(
            f"config file {path} is not valid JSON: {err.msg} at line {err.lineno} column {err.colno}"
        ) from err
    return config_from_dict(data)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def config_to_dict(cfg: ExperimentConfig) -> dict:
    data = _jsonable(dataclasses.asdict(cfg))
    # the per-run seed comes from the top-level list, never from here
    data["train"].pop("seed", None)
    return data


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# shared plumbing


def _make_problem(cfg: ExperimentConfig) -> bench.BenchmarkProblem:
    maker = bench.reactor_problem if cfg.problem == "reactor" else bench.mixer_problem
    return maker(sigma=cfg.noise_sigma)


def _require_runnable(cfg: ExperimentConfig):
    if cfg.model.topology != "ml_to_physics":
        raise CliError(
            "the benchmark problems place the mechanistic map downstream of the "
            "network; only topology 'ml_to_physics' can be run"
        )


def _resolve_seeds(cfg: ExperimentConfig, flag_seed: Optional[int]) -> Tuple[int, ...]:
    """Precedence: --seed flag, then PCML_SEED, then the config list."""
    if flag_seed is not None:
        if flag_seed < 0:
            raise CliError("--seed must be a nonnegative integer")
        return (flag_seed,)
    env = os.environ.get("PCML_SEED")
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise CliError(f"PCML_SEED must be an integer, got {env!r}") from None
        if value < 0:
            raise CliError("PCML_SEED must be a nonnegative integer")
        return (value,)
    return cfg.seeds


def _load_for_command(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    cfg = replace(cfg, seeds=_resolve_seeds(cfg, args.seed))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _resolve_jobs(args) -> int:
    if args.jobs is None:
        return os.cpu_count() or 1
    if args.jobs < 1:
        raise CliError("--jobs must be at least 1")
    return args.jobs


def _guard_out(out: Path, force: bool):
    if out.exists():
        if not out.is_dir():
            raise CliError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise CliError(f"output directory {out} is not empty; rerun with --force to replace it")


def _stage_and_commit(out: Path, write_fn):
    """Write everything into a temp sibling, then atomically take out's place."""
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}-stage-", dir=out.parent))
    try:
        write_fn(stage)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(stage, out)


def _manifest(command: str, cfg: ExperimentConfig, results: dict, artifacts) -> dict:
    return {
        "command": command,
        "config": config_to_dict(cfg),
        "versions": {
            "numpy": np.__version__,
            "pcml": __version__,
            "python": platform.python_version(),
        },
        "seeds": list(cfg.seeds),
        "results": results,
        "artifacts": sorted(artifacts),
    }


def _manifest_json(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


# ---------------------------------------------------------------------------
# run


@dataclass
class _SeedOutcome:
    seed: int
    status: str
    termination: Optional[str] = None
    error: Optional[str] = None
    metrics: Optional[bench.MetricsReport] = None
    train_report_csv: Optional[str] = None
    bands_csv: Optional[str] = None
    trajectory_csv: Optional[str] = None


def _trajectory_csv(test, train_data, pred_test, bands) -> str:
    """Plot-ready long table: test rows carry truth/prediction/bands, train
    rows carry only the noisy measurements."""
    lines = ["x,output_index,truth,prediction,measurement,lower,upper"]
    ny = test.y.shape[1]
    for j in range(ny):
        for i in np.argsort(test.u[:, 0], kind="stable"):
            lo = _cell(bands.lower[i, j]) if bands is not None else ""
            hi = _cell(bands.upper[i, j]) if bands is not None else ""
            lines.append(
                f"{float(test.u[i, 0])!r},{j},{float(test.y[i, j])!r},"
                f"{float(pred_test[i, j])!r},,{lo},{hi}"
            )
    for j in range(ny):
        for i in np.argsort(train_data.u[:, 0], kind="stable"):
            lines.append(f"{float(train_data.u[i, 0])!r},{j},,,{float(train_data.y[i, j])!r},,")
    return "\n".join(lines) + "\n"


def _run_seed(cfg: ExperimentConfig, seed: int) -> _SeedOutcome:
    prob = _make_problem(cfg)
    data_train, data_test, _ = bench.generate_data(prob, cfg.n_train, cfg.n_test, seed)
    model = bench.build_model(prob, cfg.model.hidden, cfg.model.target_step)
    tcfg = replace(cfg.train, seed=seed)
    t0 = time.perf_counter()
    try:
        try:
            report = train(model, data_train, prob.cs, tcfg)
        except SimultaneousStallError as err:
            report = err.report
        theta = report.theta
        estimate = theta
        bands = None
        if cfg.uq.enabled:
            sigma = max(float(np.mean(prob.noise.sigma_vector(prob.output_dim))), 1e-6)
            vi_cfg = VIConfig(
                mode=tcfg.mode,
                learning_rate=tcfg.learning_rate,
                max_epochs=cfg.uq.epochs,
                elbo_samples=cfg.uq.elbo_samples,
                seed=seed,
                projection_tol=tcfg.projection_tol,
            )
            posterior, _ = train_vi(
                model, data_train, vi_cfg, (0.0, 1.0), noise_sigma=sigma, cs=prob.cs
            )
            estimate = posterior
        wall = time.perf_counter() - t0
        metrics = bench.evaluate(
            model,
            estimate,
            prob,
            data_test,
            train=data_train,
            mode=tcfg.mode,
            S=cfg.uq.samples,
            beta=cfg.uq.beta,
            wall_time=wall,
        )
        if cfg.uq.enabled:
            # same seed stream as the scoring pass, so the artifact bands are
            # exactly the scored ones
            bands = predictive_bands(
                model,
                estimate,
                data_test.u,
                S=cfg.uq.samples,
                beta=cfg.uq.beta,
                rng=np.random.default_rng(0),
                mode=tcfg.mode,
                cs=prob.cs,
            )
            pred_test = bands.mean
        else:
            pred_test = Predictor(model, tcfg.mode, prob.cs, 1e-10).predict(data_test.u, theta)
    except _SEED_FAILURES as err:
        return _SeedOutcome(seed, "failed", error=f"{type(err).__name__}: {err}")
    return _SeedOutcome(
        seed,
        "ok",
        termination=report.termination,
        metrics=metrics,
        train_report_csv=report.to_csv_text(),
        bands_csv=bands.to_csv_text() if bands is not None else None,
        trajectory_csv=_trajectory_csv(data_test, data_train, pred_test, bands),
    )


def _metrics_row(oc: _SeedOutcome) -> str:
    m = oc.metrics.to_dict() if oc.metrics is not None else {}
    return ",".join(
        [
            str(oc.seed),
            _cell(m.get("rmse_train")),
            _cell(m.get("rmse_test")),
            _cell(m.get("max_violation")),
            _cell(m.get("mean_violation")),
            _cell(m.get("coverage95")),
            _cell(m.get("mean_band_width")),
            oc.termination if oc.termination is not None else "failed",
            _cell(m.get("wall_time_s")),
        ]
    )


def cmd_run(args) -> int:
    cfg = _load_for_command(args)
    _require_runnable(cfg)
    out = Path(cfg.out)
    _guard_out(out, args.force)
    jobs = _resolve_jobs(args)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        outcomes = list(pool.map(lambda s: _run_seed(cfg, s), cfg.seeds))

    results = {}
    files = {}
    svg_jobs = []
    metrics_lines = [",".join(_METRICS_COLUMNS)]
    for oc in outcomes:
        results[str(oc.seed)] = {
            "status": oc.status,
            "termination": oc.termination,
            "error": oc.error,
        }
        metrics_lines.append(_metrics_row(oc))
        if oc.status != "ok":
            continue
        files[f"train_report_{oc.seed}.csv"] = oc.train_report_csv
        svg_jobs.append((f"train_report_{oc.seed}.csv", "loss", f"loss_{oc.seed}.svg"))
        files[f"trajectory_{oc.seed}.csv"] = oc.trajectory_csv
        svg_jobs.append((f"trajectory_{oc.seed}.csv", "trajectory", f"trajectory_{oc.seed}.svg"))
        if oc.bands_csv is not None:
            files[f"bands_{oc.seed}.csv"] = oc.bands_csv
            svg_jobs.append((f"bands_{oc.seed}.csv", "bands", f"bands_{oc.seed}.svg"))
    files["metrics.csv"] = "\n".join(metrics_lines) + "\n"

    artifacts = sorted(list(files) + [svg for _, _, svg in svg_jobs])
    manifest = _manifest("run", cfg, results, artifacts)

    def write(stage: Path):
        for name, text in files.items():
            (stage / name).write_text(text, encoding="utf-8")
        for csv_name, kind, svg_name in svg_jobs:
            plot(stage / csv_name, kind, stage / svg_name)
        (stage / "run_manifest.json").write_text(_manifest_json(manifest), encoding="utf-8")

    _stage_and_commit(out, write)
    n_ok = sum(1 for oc in outcomes if oc.status == "ok")
    print(f"wrote {out} ({n_ok}/{len(outcomes)} seeds ok)")
    if n_ok == 0:
        raise CliError(
            f"all {len(outcomes)} seeds failed; see {out / 'run_manifest.json'}", exit_code=1
        )
    return 0


# ---------------------------------------------------------------------------
# generate-data


def _dataset_csv(ds) -> str:
    d, k = ds.u.shape[1], ds.y.shape[1]
    header = ",".join([f"u{i}" for i in range(d)] + [f"y{j}" for j in range(k)])
    lines = [header]
    for u, y in zip(ds.u, ds.y):
        lines.append(",".join(repr(float(x)) for x in list(u) + list(y)))
    return "\n".join(lines) + "\n"


def cmd_generate_data(args) -> int:
    cfg = _load_for_command(args)
    out = Path(cfg.out)
    _guard_out(out, args.force)
    prob = _make_problem(cfg)
    files = {}
    results = {}
    for seed in cfg.seeds:
        data_train, data_test, _ = bench.generate_data(prob, cfg.n_train, cfg.n_test, seed)
        files[f"train_data_{seed}.csv"] = _dataset_csv(data_train)
        files[f"test_data_{seed}.csv"] = _dataset_csv(data_test)
        results[str(seed)] = {"status": "ok", "termination": None, "error": None}
    manifest = _manifest("generate-data", cfg, results, sorted(files))

    def write(stage: Path):
        for name, text in files.items():
            (stage / name).write_text(text, encoding="utf-8")
        (stage / "run_manifest.json").write_text(_manifest_json(manifest), encoding="utf-8")

    _stage_and_commit(out, write)
    print(f"wrote {out} ({len(cfg.seeds)} seeds)")
    return 0


# ---------------------------------------------------------------------------
# compare


def _compare_seed(prob, cfg: ExperimentConfig, cfg_ml, cfg_pcml, seed: int):
    data_train, data_test, _ = bench.generate_data(prob, cfg.n_train, cfg.n_test, seed)
    rows = []
    for arm, arm_cfg in (("ml", cfg_ml), ("pcml", cfg_pcml)):
        seeded = replace(arm_cfg, seed=seed)
        try:
            metrics, termination = bench._run_arm(
                prob,
                seeded,
                data_train,
                data_test,
                cfg.model.hidden,
                cfg.model.target_step,
                cfg.uq.enabled,
                cfg.uq.samples,
                cfg.uq.beta,
                cfg.uq.epochs,
                cfg.uq.elbo_samples,
            )
            rows.append(bench.ComparisonRow(seed, arm, metrics, termination))
        except _SEED_FAILURES as err:
            rows.append(bench.ComparisonRow(seed, arm, None, "failed", f"{type(err).__name__}: {err}"))
    return rows


def cmd_compare(args) -> int:
    cfg = _load_for_command(args)
    _require_runnable(cfg)
    out = Path(cfg.out)
    _guard_out(out, args.force)
    jobs = _resolve_jobs(args)
    prob = _make_problem(cfg)
    # the configured training is the constrained arm; the baseline is the
    # same architecture fit to data alone
    cfg_pcml = cfg.train
    cfg_ml = replace(cfg.train, mode="soft", data_weight=1.0, physics_weight=0.0)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        per_seed = list(pool.map(lambda s: _compare_seed(prob, cfg, cfg_ml, cfg_pcml, s), cfg.seeds))
    rows = tuple(row for seed_rows in per_seed for row in seed_rows)
    result = bench.ComparisonResult(prob.name, ("ml", "pcml"), rows)

    results = {}
    for row in rows:
        results.setdefault(str(row.seed), {})[row.arm] = {
            "status": "ok" if row.metrics is not None else "failed",
            "termination": row.termination,
            "error": row.error,
        }
    manifest = _manifest("compare", cfg, results, ["comparison.csv"])

    def write(stage: Path):
        (stage / "comparison.csv").write_text(result.to_csv_text(), encoding="utf-8")
        (stage / "run_manifest.json").write_text(_manifest_json(manifest), encoding="utf-8")

    _stage_and_commit(out, write)
    summary = {
        "problem": result.problem,
        "arms": list(result.arms),
        "paired_seeds": result.paired_seeds(),
        "wins": {arm: result.win_count(arm) for arm in result.arms},
        "mean_band_width": {arm: result.mean_band_width(arm) for arm in result.arms},
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    if all(row.metrics is None for row in rows):
        raise CliError(
            f"all {len(cfg.seeds)} seeds failed in both arms; see {out / 'run_manifest.json'}",
            exit_code=1,
        )
    return 0


# ---------------------------------------------------------------------------
# evaluate (aggregate an existing run directory)


def _read_csv_columns(path: Path) -> dict:
    if not path.exists():
        raise CliError(f"csv file {path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CliError(f"csv file {path} is empty") from None
        rows = list(reader)
    return {name: [row[i] if i < len(row) else "" for row in rows] for i, name in enumerate(header)}


def _column_stats(cells) -> Optional[dict]:
    values = [float(c) for c in cells if c != ""]
    if not values:
        return None
    arr = np.asarray(values)
    return {
        "mean": float(np.mean(arr)),
        "std": float(np.std(arr)),
        "min": float(np.min(arr)),
        "max": float(np.max(arr)),
        "n": len(values),
    }


_AGG_COLUMNS = (
    "rmse_train",
    "rmse_test",
    "max_violation",
    "mean_violation",
    "coverage95",
    "mean_band_width",
)


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    manifest_path = out / "run_manifest.json"
    if not manifest_path.exists():
        raise CliError(f"{out} does not contain run_manifest.json; run an experiment first")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise CliError(f"{manifest_path} is not valid JSON: {err.msg} at line {err.lineno}") from err

    command = manifest.get("command")
    summary = {
        "directory": str(out),
        "command": command,
        "problem": manifest.get("config", {}).get("problem"),
        "mode": manifest.get("config", {}).get("train", {}).get("mode"),
    }
    if command == "compare":
        table = _read_csv_columns(out / "comparison.csv")
        arms = sorted(set(table["arm"]))
        summary["metrics"] = {
            arm: {
                col: _column_stats(
                    [c for c, a in zip(table[col], table["arm"]) if a == arm]
                )
                for col in _AGG_COLUMNS
                if col in table
            }
            for arm in arms
        }
        ok_rows = sum(1 for t in table["termination"] if t != "failed")
        summary["n_rows"] = len(table["termination"])
        summary["n_ok"] = ok_rows
    else:
        table = _read_csv_columns(out / "metrics.csv")
        summary["metrics"] = {col: _column_stats(table[col]) for col in _AGG_COLUMNS if col in table}
        ok_rows = sum(1 for t in table["termination"] if t != "failed")
        summary["n_seeds"] = len(table["seed"])
        summary["n_ok"] = ok_rows
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if ok_rows > 0 else 1


# ---------------------------------------------------------------------------
# plot


_DEFAULT_XLABEL = {"trajectory": "input u0 [-]", "bands": "input u0 [-]", "loss": "epoch [-]"}
_DEFAULT_YLABEL = {"trajectory": "output [-]", "bands": "output [-]", "loss": "loss [-]"}

_TRAJECTORY_COLUMNS = ("x", "output_index", "truth", "prediction", "measurement", "lower", "upper")
_BANDS_COLUMNS = ("u0", "output_index", "mean", "lower", "upper")
_LOSS_COLUMNS = ("epoch", "total_loss")


def _require_columns(table: dict, needed, kind: str, path):
    for col in needed:
        if col not in table:
            raise CliError(
                f"{kind} plot requires column {col!r}; {path} has columns {sorted(table)}"
            )


def _floats_where(cells, mask):
    return np.asarray([float(c) for c, keep in zip(cells, mask) if keep])


def _draw_trajectory(ax, table):
    idx = [int(c) for c in table["output_index"]]
    for j in sorted(set(idx)):
        of_j = [k == j for k in idx]
        color = f"C{j % 10}"
        has_truth = [m and c != "" for m, c in zip(of_j, table["truth"])]
        if any(has_truth):
            x = _floats_where(table["x"], has_truth)
            order = np.argsort(x, kind="stable")
            ax.plot(x[order], _floats_where(table["truth"], has_truth)[order],
                    "--", color=color, linewidth=1.0, label=f"y{j} truth")
        has_pred = [m and c != "" for m, c in zip(of_j, table["prediction"])]
        if any(has_pred):
            x = _floats_where(table["x"], has_pred)
            order = np.argsort(x, kind="stable")
            ax.plot(x[order], _floats_where(table["prediction"], has_pred)[order],
                    "-", color=color, linewidth=1.4, label=f"y{j} prediction")
        has_band = [
            m and lo != "" and hi != ""
            for m, lo, hi in zip(of_j, table["lower"], table["upper"])
        ]
        if any(has_band):
            x = _floats_where(table["x"], has_band)
            order = np.argsort(x, kind="stable")
            ax.fill_between(
                x[order],
                _floats_where(table["lower"], has_band)[order],
                _floats_where(table["upper"], has_band)[order],
                color=color,
                alpha=0.2,
                linewidth=0,
            )
        has_meas = [m and c != "" for m, c in zip(of_j, table["measurement"])]
        if any(has_meas):
            ax.scatter(
                _floats_where(table["x"], has_meas),
                _floats_where(table["measurement"], has_meas),
                s=14,
                color=color,
                marker="o",
                label=f"y{j} data",
            )


def _draw_bands(ax, table):
    idx = [int(c) for c in table["output_index"]]
    for j in sorted(set(idx)):
        of_j = [k == j for k in idx]
        color = f"C{j % 10}"
        x = _floats_where(table["u0"], of_j)
        order = np.argsort(x, kind="stable")
        ax.plot(x[order], _floats_where(table["mean"], of_j)[order],
                "-", color=color, linewidth=1.4, label=f"y{j} mean")
        ax.fill_between(
            x[order],
            _floats_where(table["lower"], of_j)[order],
            _floats_where(table["upper"], of_j)[order],
            color=color,
            alpha=0.2,
            linewidth=0,
        )


def _draw_loss(ax, table):
    epochs = [int(c) for c in table["epoch"]]
    values = []
    for name in ("data_loss", "physics_loss", "total_loss"):
        if name not in table:
            continue
        y = [float(c) for c in table[name] if c != ""]
        values.extend(y)
        ax.plot(epochs[: len(y)], y, "-", linewidth=1.2, label=name)
    if values and all(v > 0 for v in values):
        ax.set_yscale("log")


def plot(csv_path, kind: str, out_svg, xlabel: Optional[str] = None, ylabel: Optional[str] = None):
    """Render one CSV to a self-contained, byte-deterministic SVG."""
    if kind not in _PLOT_KINDS:
        raise CliError(f"plot kind must be one of {_PLOT_KINDS}, got {kind!r}")
    csv_path = Path(csv_path)
    table = _read_csv_columns(csv_path)
    needed = {"trajectory": _TRAJECTORY_COLUMNS, "bands": _BANDS_COLUMNS, "loss": _LOSS_COLUMNS}[kind]
    _require_columns(table, needed, kind, csv_path)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed hash salt and no Date metadata keep the SVG bytes reproducible
    plt.rcParams["svg.hashsalt"] = "pcml"
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    try:
        if kind == "trajectory":
            _draw_trajectory(ax, table)
        elif kind == "bands":
            _draw_bands(ax, table)
        else:
            _draw_loss(ax, table)
        ax.set_xlabel(xlabel if xlabel is not None else _DEFAULT_XLABEL[kind])
        ax.set_ylabel(ylabel if ylabel is not None else _DEFAULT_YLABEL[kind])
        ax.set_title(csv_path.stem)
        handles, _labels = ax.get_legend_handles_labels()
        if handles:
            ax.legend(loc="best", fontsize=8)
        fig.savefig(out_svg, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return Path(out_svg)


def cmd_plot(args) -> int:
    plot(Path(args.csv), args.kind, Path(args.out), xlabel=args.xlabel, ylabel=args.ylabel)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcml",
        description="physics-constrained ML experiment runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, jobs: bool):
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument(
            "--seed", type=int, default=None,
            help="run a single seed (overrides PCML_SEED and the config list)",
        )
        p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        if jobs:
            p.add_argument(
                "--jobs", type=int, default=None,
                help="worker threads for the seed sweep (default: available cores)",
            )

    p_run = sub.add_parser("run", help="train and score every configured seed")
    add_config_flags(p_run, jobs=True)
    p_run.set_defaults(func=cmd_run)

    p_gen = sub.add_parser("generate-data", help="write the per-seed datasets only")
    add_config_flags(p_gen, jobs=False)
    p_gen.set_defaults(func=cmd_generate_data)

    p_cmp = sub.add_parser("compare", help="paired unconstrained-vs-constrained sweep")
    add_config_flags(p_cmp, jobs=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_eval = sub.add_parser("evaluate", help="summarize an existing run directory as JSON")
    p_eval.add_argument("--out", required=True, help="run directory to summarize")
    p_eval.set_defaults(func=cmd_evaluate)

    p_plot = sub.add_parser("plot", help="render one CSV to SVG")
    p_plot.add_argument("--csv", required=True, help="input CSV file")
    p_plot.add_argument("--kind", required=True, choices=_PLOT_KINDS)
    p_plot.add_argument("--out", required=True, help="output SVG path")
    p_plot.add_argument("--xlabel", default=None)
    p_plot.add_argument("--ylabel", default=None)
    p_plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        sys.stderr.write(err.record() + "\n")
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
