"""Benchmark problems with known physics, plus metrics and comparisons.

Two canonical problems: a batch series-reaction reactor (nonlinear
dynamics, one conservation constraint) and a steady-state two-inlet mixer
(algebraic, input-dependent linear balances).  Both carry closed-form
ground truth, so generated datasets are exact up to the declared noise and
every metric is computed against reality rather than against noise.
"""

import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .model import (
    Dataset,
    FixedPointError,
    MLComponent,
    NeuralODEModel,
    OdeBlowUpError,
    PCMLModel,
    Topology,
    identity_physics,
)
from .physics import ConstraintSet, ODESystem, make_species_balance
from .train import (
    DivergenceError,
    Predictor,
    ProjectionTrainingError,
    SimultaneousStallError,
    TrainConfig,
    train,
)
from .uq import GaussianPosterior, VIConfig, coverage, predictive_bands, train_vi

__all__ = [
    "NoiseSpec",
    "BenchmarkProblem",
    "MetricsReport",
    "ComparisonRow",
    "ComparisonResult",
    "reactor_problem",
    "mixer_problem",
    "generate_data",
    "build_model",
    "evaluate",
    "compare_ml_vs_pcml",
]

# reactor rate constants (1/time) and initial charge (mol/L); fixed,
# documented constants chosen for a well-conditioned two-step cascade
REACTOR_K1 = 1.0
REACTOR_K2 = 0.5
REACTOR_C0 = (1.0, 0.0, 0.0)
REACTOR_HORIZON = (0.0, 5.0)
REACTOR_N_OBS = 21

# mixer input box: inlet flows and inlet compositions of component A
MIXER_FLOW_RANGE = (0.5, 2.0)
MIXER_COMP_RANGE = (0.1, 0.9)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian measurement noise, applied to training targets only."""

    sigma: float = 0.02
    bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if np.any(sigma < 0):
            raise ValueError("sigma must be nonnegative")

    def sigma_vector(self, ny: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (ny,))

    def bias_vector(self, ny: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.bias, dtype=np.float64), (ny,))


@dataclass(frozen=True)
class BenchmarkProblem:
    """A ground-truth generator, an input sampling scheme, and the physics.

    ``truth`` maps an input matrix to exact outputs; ``sample_train`` and
    ``sample_test`` produce input matrices for the two roles (the reactor
    trains on an even time grid and tests at random times, the mixer
    samples both from the input box).
    """

    name: str
    input_dim: int
    output_dim: int
    truth: Callable
    sample_train: Callable
    sample_test: Callable
    cs: ConstraintSet
    noise: NoiseSpec
    default_n_train: int
    ode: Optional[ODESystem] = None


def reactor_problem(sigma: float = 0.02, noise_seed: int = 0) -> BenchmarkProblem:
    """Batch series reactions A -> B -> C in a closed, isothermal reactor.

    dC_A/dt = -k1 C_A, dC_B/dt = k1 C_A - k2 C_B, dC_C/dt = k2 C_B with
    k1 = 1.0, k2 = 0.5 and C(0) = (1, 0, 0), observed at 21 even times on
    [0, 5].  Closed: total concentration is conserved, sum_i C_i = 1.  The
    closed-form cascade solution is the ground truth.
    """
    k1, k2 = REACTOR_K1, REACTOR_K2
    t0, tf = REACTOR_HORIZON

    def truth(U):
        t = np.atleast_2d(np.asarray(U, dtype=np.float64))[:, 0]
        ca = np.exp(-k1 * t)
        cb = k1 / (k2 - k1) * (np.exp(-k1 * t) - np.exp(-k2 * t))
        return np.column_stack([ca, cb, 1.0 - ca - cb])

    def sample_train(rng, n):
        return np.linspace(t0, tf, n)[:, None]

    def sample_test(rng, n):
        return np.sort(rng.uniform(t0, tf, n))[:, None]

    rate_matrix = np.array([[-k1, 0.0, 0.0], [k1, -k2, 0.0], [0.0, k2, 0.0]])
    ode = ODESystem(
        state_dim=3,
        rhs=lambda t, x, theta: rate_matrix @ x,
        x0=np.array(REACTOR_C0),
        t_span=REACTOR_HORIZON,
    )
    return BenchmarkProblem(
        name="reactor",
        input_dim=1,
        output_dim=3,
        truth=truth,
        sample_train=sample_train,
        sample_test=sample_test,
        cs=make_species_balance(np.array(REACTOR_C0)),
        noise=NoiseSpec(sigma=sigma, seed=noise_seed),
        default_n_train=REACTOR_N_OBS,
        ode=ode,
    )


def mixer_problem(sigma: float = 0.02, noise_seed: int = 0) -> BenchmarkProblem:
    """Steady-state adiabatic mixing of two inlet streams.

    Inputs u = (F1, xA1, F2, xA2): inlet flows on [0.5, 2] and inlet
    compositions of component A on [0.1, 0.9].  Outputs y = (F_out, G_A,
    G_B): outlet total flow and the two component mass flows; outlet
    composition follows as G_A / F_out.  The balances are linear in y with
    an input-dependent right side: F_out = F1 + F2 and G_A + G_B = F_out.
    """

    def truth(U):
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        f1, x1, f2, x2 = U.T
        f_out = f1 + f2
        g_a = f1 * x1 + f2 * x2
        return np.column_stack([f_out, g_a, f_out - g_a])

    def sample_inputs(rng, n):
        f_lo, f_hi = MIXER_FLOW_RANGE
        x_lo, x_hi = MIXER_COMP_RANGE
        return np.column_stack(
            [
                rng.uniform(f_lo, f_hi, n),
                rng.uniform(x_lo, x_hi, n),
                rng.uniform(f_lo, f_hi, n),
                rng.uniform(x_lo, x_hi, n),
            ]
        )

    a = np.array([[1.0, 0.0, 0.0], [-1.0, 1.0, 1.0]])
    cs = ConstraintSet(
        3,
        linear=(a, lambda u: np.array([u[0] + u[2], 0.0])),
        name="mixer mass balance",
    )
    return BenchmarkProblem(
        name="mixer",
        input_dim=4,
        output_dim=3,
        truth=truth,
        sample_train=sample_inputs,
        sample_test=sample_inputs,
        cs=cs,
        noise=NoiseSpec(sigma=sigma, seed=noise_seed),
        default_n_train=30,
    )


def generate_data(prob: BenchmarkProblem, n_train: int, n_test: int, seed: int):
    """Sample inputs, evaluate ground truth, and add noise to training y only.

    Returns (train, test, (truth_train, truth_test)); the test targets are
    the noiseless truth.  Deterministic per (problem, sizes, seed).
    """
    if n_train < 1:
        raise ValueError("n_train must be at least 1")
    if n_test < 1:
        raise ValueError("n_test must be at least 1")
    rng = np.random.default_rng([prob.noise.seed, seed])
    U_train = prob.sample_train(rng, n_train)
    U_test = prob.sample_test(rng, n_test)
    truth_train = prob.truth(U_train)
    truth_test = prob.truth(U_test)
    sigma = prob.noise.sigma_vector(prob.output_dim)
    bias = prob.noise.bias_vector(prob.output_dim)
    y_train = truth_train + sigma * rng.standard_normal(truth_train.shape) + bias
    return Dataset(U_train, y_train), Dataset(U_test, truth_test), (truth_train, truth_test)


@dataclass(frozen=True)
class MetricsReport:
    """Test-set diagnostics: accuracy, feasibility, and (optionally) UQ.

    coverage95 and mean_band_width are present only when the evaluation was
    given a posterior; rmse_train only when a training set was supplied.
    """

    rmse_test: float
    max_violation: float
    mean_violation: float
    wall_time: float
    rmse_train: Optional[float] = None
    coverage95: Optional[float] = None
    mean_band_width: Optional[float] = None

    def __post_init__(self):
        for name in (
            "rmse_test",
            "max_violation",
            "mean_violation",
            "wall_time",
            "rmse_train",
            "coverage95",
            "mean_band_width",
        ):
            value = getattr(self, name)
            if value is None:
                continue
            value = float(value)
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.coverage95 is not None and not 0.0 <= self.coverage95 <= 1.0:
            raise ValueError(f"coverage95 must lie in [0, 1], got {self.coverage95}")

    def to_dict(self) -> dict:
        return {
            "rmse_train": self.rmse_train,
            "rmse_test": self.rmse_test,
            "max_violation": self.max_violation,
            "mean_violation": self.mean_violation,
            "coverage95": self.coverage95,
            "mean_band_width": self.mean_band_width,
            "wall_time_s": self.wall_time,
        }


def build_model(prob: BenchmarkProblem, hidden: Sequence[int] = (16,), target_step: float = 0.1):
    """The default surrogate for a problem.

    Dynamic problems (those carrying an ODE) get a neural-ODE surrogate
    whose network maps state to state derivative; algebraic problems get a
    feedforward network from inputs to outputs.
    """
    hidden = tuple(int(h) for h in hidden)
    if prob.ode is not None:
        ml = MLComponent([prob.output_dim, *hidden, prob.output_dim])
        return NeuralODEModel(ml, x0=prob.ode.x0, t0=prob.ode.t_span[0], target_step=target_step)
    ml = MLComponent([prob.input_dim, *hidden, prob.output_dim])
    return PCMLModel(ml, identity_physics(prob.output_dim), Topology.ML_TO_P, prob.input_dim)


def _violations(cs: ConstraintSet, U, Y) -> Tuple[float, float]:
    per_row = [cs.violation(u, y) for u, y in zip(U, Y)]
    return float(np.max(per_row)), float(np.mean(per_row))


def evaluate(
    model,
    theta_or_posterior,
    prob: BenchmarkProblem,
    test: Dataset,
    train: Optional[Dataset] = None,
    mode: str = "soft",
    S: int = 2000,
    beta: float = 0.95,
    rng: Optional[np.random.Generator] = None,
    wall_time: Optional[float] = None,
) -> MetricsReport:
    """Score deployed predictions on the test set.

    Violation is measured on exactly what the deployment produces: raw
    network output for soft mode, projected output for the hard modes.  No
    post-hoc cleanup is applied before measuring.  Given a posterior, the
    predictive mean is scored and coverage and band width are added.
    """
    t_start = time.perf_counter()
    predictor = Predictor(model, mode, prob.cs, 1e-10)

    if isinstance(theta_or_posterior, GaussianPosterior):
        post = theta_or_posterior
        if rng is None:
            rng = np.random.default_rng(0)
        bands = predictive_bands(
            model, post, test.u, S=S, beta=beta, rng=rng, mode=mode, cs=prob.cs
        )
        pred_test = bands.mean
        cov = coverage(bands, test.y)
        width = float(np.mean(bands.upper - bands.lower))
        pred_train = None
        if train is not None:
            pred_train = predictive_bands(
                model, post, train.u, S=S, beta=beta, rng=rng, mode=mode, cs=prob.cs
            ).mean
    else:
        theta = np.asarray(theta_or_posterior, dtype=np.float64)
        pred_test = predictor.predict(test.u, theta)
        cov = None
        width = None
        pred_train = predictor.predict(train.u, theta) if train is not None else None

    rmse_test = float(np.sqrt(np.mean((pred_test - test.y) ** 2)))
    rmse_train = (
        float(np.sqrt(np.mean((pred_train - train.y) ** 2))) if pred_train is not None else None
    )
    max_v, mean_v = _violations(prob.cs, test.u, pred_test)
    elapsed = time.perf_counter() - t_start
    return MetricsReport(
        rmse_test=rmse_test,
        max_violation=max_v,
        mean_violation=mean_v,
        wall_time=elapsed if wall_time is None else float(wall_time),
        rmse_train=rmse_train,
        coverage95=cov,
        mean_band_width=width,
    )


_RUN_FAILURES = (
    DivergenceError,
    ProjectionTrainingError,
    OdeBlowUpError,
    FixedPointError,
)


@dataclass(frozen=True)
class ComparisonRow:
    seed: int
    arm: str
    metrics: Optional[MetricsReport]
    termination: str
    error: Optional[str] = None


_COMPARISON_COLUMNS = (
    "seed",
    "arm",
    "rmse_train",
    "rmse_test",
    "max_violation",
    "mean_violation",
    "coverage95",
    "mean_band_width",
    "wall_time_s",
    "termination",
    "error",
)


@dataclass(frozen=True)
class ComparisonResult:
    """Per-seed paired metrics for the two arms, plus aggregates."""

    problem: str
    arms: Tuple[str, str]
    rows: Tuple[ComparisonRow, ...]

    def _arm_rows(self, arm):
        return [r for r in self.rows if r.arm == arm and r.metrics is not None]

    def paired_seeds(self):
        """Seeds where both arms produced metrics."""
        by_arm = {arm: {r.seed for r in self._arm_rows(arm)} for arm in self.arms}
        return sorted(by_arm[self.arms[0]] & by_arm[self.arms[1]])

    def win_count(self, arm: str) -> int:
        """Seeds where this arm's test RMSE strictly beats the other arm's."""
        other = self.arms[1] if arm == self.arms[0] else self.arms[0]
        mine = {r.seed: r.metrics.rmse_test for r in self._arm_rows(arm)}
        theirs = {r.seed: r.metrics.rmse_test for r in self._arm_rows(other)}
        return sum(1 for s in self.paired_seeds() if mine[s] < theirs[s])

    def mean_band_width(self, arm: str) -> Optional[float]:
        widths = [
            r.metrics.mean_band_width
            for r in self._arm_rows(arm)
            if r.metrics.mean_band_width is not None
        ]
        return float(np.mean(widths)) if widths else None

    def to_csv_text(self) -> str:
        lines = [",".join(_COMPARISON_COLUMNS)]
        for r in self.rows:
            m = r.metrics.to_dict() if r.metrics is not None else {}

            def cell(value):
                if value is None:
                    return ""
                return f"{float(value)!r}"

            lines.append(
                ",".join(
                    [
                        str(r.seed),
                        r.arm,
                        cell(m.get("rmse_train")),
                        cell(m.get("rmse_test")),
                        cell(m.get("max_violation")),
                        cell(m.get("mean_violation")),
                        cell(m.get("coverage95")),
                        cell(m.get("mean_band_width")),
                        cell(m.get("wall_time_s")),
                        r.termination,
                        r.error or "",
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "problem": self.problem,
            "arms": list(self.arms),
            "rows": [
                {
                    "seed": r.seed,
                    "arm": r.arm,
                    "metrics": r.metrics.to_dict() if r.metrics is not None else None,
                    "termination": r.termination,
                    "error": r.error,
                }
                for r in self.rows
            ],
            "paired_seeds": self.paired_seeds(),
            "wins": {arm: self.win_count(arm) for arm in self.arms},
            "mean_band_width": {arm: self.mean_band_width(arm) for arm in self.arms},
        }

    def to_json_text(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def _run_arm(prob, cfg, data_train, data_test, hidden, target_step, uq, S, beta,
             vi_epochs, vi_samples):
    model = build_model(prob, hidden, target_step)
    t0 = time.perf_counter()
    termination = None
    try:
        report = train(model, data_train, prob.cs, cfg)
        theta = report.theta
        termination = report.termination
    except SimultaneousStallError as err:
        report = err.report
        theta = report.theta
        termination = report.termination

    estimate = theta
    if uq:
        sigma = float(np.mean(prob.noise.sigma_vector(prob.output_dim)))
        vi_cfg = VIConfig(
            mode=cfg.mode,
            learning_rate=cfg.learning_rate,
            max_epochs=vi_epochs,
            elbo_samples=vi_samples,
            seed=cfg.seed,
            projection_tol=cfg.projection_tol,
        )
        posterior, _ = train_vi(
            model, data_train, vi_cfg, (0.0, 1.0), noise_sigma=max(sigma, 1e-6), cs=prob.cs
        )
        estimate = posterior
    wall = time.perf_counter() - t0
    metrics = evaluate(
        model,
        estimate,
        prob,
        data_test,
        train=data_train,
        mode=cfg.mode,
        S=S,
        beta=beta,
        wall_time=wall,
    )
    return metrics, termination


def compare_ml_vs_pcml(
    prob: BenchmarkProblem,
    cfg_ml: TrainConfig,
    cfg_pcml: TrainConfig,
    n_seeds: int,
    n_train: int = 20,
    n_test: int = 50,
    hidden: Sequence[int] = (16,),
    target_step: float = 0.1,
    uq: bool = False,
    S: int = 2000,
    beta: float = 0.95,
    vi_epochs: int = 100,
    vi_samples: int = 8,
) -> ComparisonResult:
    """Paired per-seed comparison of an unconstrained and a constrained arm.

    Both arms share the architecture, the data, and the per-seed
    initialization; they differ only in the supplied training configs.  A
    failed run is recorded on its row and does not stop the sweep.
    """
    if n_seeds < 3:
        raise ValueError("n_seeds must be at least 3")
    rows = []
    for seed in range(n_seeds):
        data_train, data_test, _ = generate_data(prob, n_train, n_test, seed)
        for arm, cfg in (("ml", cfg_ml), ("pcml", cfg_pcml)):
            cfg_seeded = replace(cfg, seed=seed)
            try:
                metrics, termination = _run_arm(
                    prob, cfg_seeded, data_train, data_test, hidden, target_step, uq, S, beta,
                    vi_epochs, vi_samples,
                )
                rows.append(ComparisonRow(seed, arm, metrics, termination))
            except _RUN_FAILURES as err:
                rows.append(ComparisonRow(seed, arm, None, "failed", str(err)))
    return ComparisonResult(prob.name, ("ml", "pcml"), tuple(rows))
