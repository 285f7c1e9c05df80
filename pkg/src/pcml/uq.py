"""Mean-field variational inference over model parameters.

A Gaussian posterior with diagonal covariance is fitted by maximizing a
Monte Carlo ELBO: the mean Gaussian log-likelihood of the data under
reparameterized parameter draws, minus the closed-form KL divergence from
an isotropic normal prior.  Hard prediction regimes project every sampled
forward pass, so each posterior draw is feasible and the resulting bands
respect the constraints draw by draw.
"""

import math
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import NumericOverflowError
from .model import FixedPointError, OdeBlowUpError, Topology
from .project import ProjectionNonConvergenceError
from .train import (
    AdamState,
    DivergenceError,
    Predictor,
    ProjectionTrainingError,
    TrainConfig,
    TrainReport,
    _BidirectionalAdjoint,
    _ExplicitEngine,
    _require_sequential_support,
    adam_step,
)

__all__ = [
    "GaussianPosterior",
    "PredictiveBands",
    "PosteriorDrawError",
    "VIConfig",
    "kl_gaussian",
    "elbo_estimate",
    "elbo_and_gradient",
    "train_vi",
    "predictive_bands",
    "coverage",
]

_MODES = ("soft", "hard_sequential", "hard_simultaneous")


class PosteriorDrawError(RuntimeError):
    """A forward pass failed for one sampled parameter vector."""

    def __init__(self, message: str, draw: int):
        super().__init__(message)
        self.draw = draw


@dataclass(frozen=True)
class GaussianPosterior:
    """Mean-field Gaussian over the flat parameter vector."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        ls = np.asarray(self.log_sigma, dtype=np.float64).ravel()
        if mu.shape != ls.shape:
            raise ValueError(f"mu and log_sigma must match, got {mu.shape} vs {ls.shape}")
        if mu.size == 0:
            raise ValueError("posterior needs at least one coordinate")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", ls)

    @property
    def size(self) -> int:
        return self.mu.size

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def sample(self, rng: np.random.Generator, S: int) -> np.ndarray:
        """S reparameterized draws, one per row: theta = mu + sigma * eps."""
        eps = rng.standard_normal((S, self.size))
        return self.mu + self.sigma * eps


@dataclass(frozen=True)
class PredictiveBands:
    """Empirical quantile bands over posterior draws at one set of query inputs.

    Band edges are pointwise order statistics; they are widened, where a
    heavy-tailed draw distribution demands it, just enough to contain the
    sample mean, so lower <= mean <= upper always holds.
    """

    u: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    beta: float
    samples: int

    def __post_init__(self):
        for field in ("u", "mean", "lower", "upper"):
            object.__setattr__(self, field, np.asarray(getattr(self, field), dtype=np.float64))
        if self.mean.shape != self.lower.shape or self.mean.shape != self.upper.shape:
            raise ValueError("mean, lower, upper must share one shape")
        if self.u.ndim != 2 or self.mean.ndim != 2 or self.u.shape[0] != self.mean.shape[0]:
            raise ValueError("u and mean must be 2-D with matching row counts")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.samples < 1:
            raise ValueError("samples must be positive")
        if np.any(self.lower > self.mean) or np.any(self.mean > self.upper):
            raise ValueError("bands must satisfy lower <= mean <= upper")

    def to_csv_text(self) -> str:
        u_cols = [f"u{j}" for j in range(self.u.shape[1])]
        lines = [",".join(u_cols + ["output_index", "mean", "lower", "upper"])]
        for i in range(self.mean.shape[0]):
            u_txt = [f"{float(x)!r}" for x in self.u[i]]
            for j in range(self.mean.shape[1]):
                lines.append(
                    ",".join(
                        u_txt
                        + [
                            str(j),
                            f"{float(self.mean[i, j])!r}",
                            f"{float(self.lower[i, j])!r}",
                            f"{float(self.upper[i, j])!r}",
                        ]
                    )
                )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class VIConfig:
    """Settings for ELBO ascent.

    mode selects the prediction regime used inside the likelihood: "soft"
    scores raw forward passes, the hard modes score projected ones.
    """

    mode: str = "soft"
    learning_rate: float = 0.01
    max_epochs: int = 500
    elbo_samples: int = 16
    seed: int = 0
    init_log_sigma: float = -2.0
    projection_tol: float = 1e-10

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.elbo_samples < 1:
            raise ValueError("elbo_samples must be at least 1")
        if self.projection_tol <= 0:
            raise ValueError("projection_tol must be positive")


def _prior_arrays(prior, size: int):
    mu0, sigma0 = prior
    mu0 = np.broadcast_to(np.asarray(mu0, dtype=np.float64), (size,))
    sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=np.float64), (size,))
    if np.any(sigma0 <= 0):
        raise ValueError("prior sigma must be positive")
    return mu0, sigma0


def kl_gaussian(post: GaussianPosterior, prior: Tuple[float, float]) -> float:
    """KL(post || N(mu0, sigma0^2 I)), summed over coordinates."""
    mu0, sigma0 = _prior_arrays(prior, post.size)
    ls = post.log_sigma
    var_ratio = np.exp(2.0 * ls) / sigma0**2
    terms = np.log(sigma0) - ls + 0.5 * (var_ratio + ((post.mu - mu0) / sigma0) ** 2) - 0.5
    # rounding can leave a tiny negative residue at the zero boundary
    return max(0.0, float(np.sum(terms)))


def _kl_gradients(post, mu0, sigma0):
    g_mu = (post.mu - mu0) / sigma0**2
    g_ls = np.exp(2.0 * post.log_sigma) / sigma0**2 - 1.0
    return g_mu, g_ls


class _LikelihoodEngine:
    """Data-fit value and parameter gradient under the chosen regime."""

    def __init__(self, model, dataset, cs, mode, projection_tol):
        if mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {mode!r}")
        self.hard = mode != "soft"
        cfg = TrainConfig(
            mode="hard_sequential" if self.hard else "soft",
            data_weight=1.0,
            physics_weight=0.0,
            projection_tol=projection_tol,
        )
        if self.hard:
            _require_sequential_support(model, cs)
            engine = _ExplicitEngine(model, dataset, cs, cfg)
            self._eval = engine.evaluate_sequential
        elif getattr(model, "topology", None) is Topology.BIDIRECTIONAL:
            engine = _BidirectionalAdjoint(model, dataset, cs, cfg)
            self._eval = engine.evaluate_soft
        else:
            engine = _ExplicitEngine(model, dataset, cs, cfg)
            self._eval = engine.evaluate_soft

    def evaluate(self, theta):
        """Returns (sum of squared errors, its theta-gradient, max violation)."""
        ev = self._eval(theta, 0)
        return ev.data, ev.grad, ev.violation


_DRAW_FAILURES = (
    ProjectionTrainingError,
    ProjectionNonConvergenceError,
    DivergenceError,
    FixedPointError,
    OdeBlowUpError,
    NumericOverflowError,
)


def _elbo_core(engine, n_obs, post, prior, noise_sigma, eps, want_grad):
    """Shared ELBO evaluation over a fixed block of standard-normal draws."""
    mu0, sigma0 = _prior_arrays(prior, post.size)
    sig2 = noise_sigma**2
    const = -0.5 * n_obs * math.log(2.0 * math.pi * sig2)
    sigma = post.sigma
    S = eps.shape[0]

    ll_sum = 0.0
    worst = 0.0
    g_mu = np.zeros(post.size) if want_grad else None
    g_ls = np.zeros(post.size) if want_grad else None
    for s in range(S):
        theta = post.mu + sigma * eps[s]
        try:
            sse, grad_sse, violation = engine.evaluate(theta)
        except _DRAW_FAILURES as err:
            raise PosteriorDrawError(f"forward failed at posterior draw {s}: {err}", s) from err
        ll_sum += -0.5 * sse / sig2 + const
        worst = max(worst, violation)
        if want_grad:
            g_theta = -0.5 * grad_sse / sig2
            g_mu += g_theta
            g_ls += g_theta * sigma * eps[s]

    mean_ll = ll_sum / S
    kl = kl_gaussian(post, prior)
    elbo = mean_ll - kl
    if not want_grad:
        return elbo, None, -mean_ll, kl, worst

    kl_mu, kl_ls = _kl_gradients(post, mu0, sigma0)
    grad = np.concatenate([g_mu / S - kl_mu, g_ls / S - kl_ls])
    return elbo, grad, -mean_ll, kl, worst


def _n_observations(model, dataset) -> int:
    return dataset.n * dataset.y.shape[1]


def elbo_estimate(
    model,
    dataset,
    post: GaussianPosterior,
    prior: Tuple[float, float],
    noise_sigma: float,
    S: int,
    rng: np.random.Generator,
    mode: str = "soft",
    cs=None,
    projection_tol: float = 1e-10,
) -> float:
    """Monte Carlo ELBO from S reparameterized draws of the posterior.

    Deterministic for a given generator state: draws come from one
    eps = rng.standard_normal((S, P)) block.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    if noise_sigma <= 0:
        raise ValueError("noise_sigma must be positive")
    engine = _LikelihoodEngine(model, dataset, cs, mode, projection_tol)
    eps = rng.standard_normal((S, post.size))
    elbo, _, _, _, _ = _elbo_core(
        engine, _n_observations(model, dataset), post, prior, noise_sigma, eps, False
    )
    return elbo


def elbo_and_gradient(
    model,
    dataset,
    post: GaussianPosterior,
    prior: Tuple[float, float],
    noise_sigma: float,
    S: int,
    rng: np.random.Generator,
    mode: str = "soft",
    cs=None,
    projection_tol: float = 1e-10,
):
    """ELBO and its gradient with respect to (mu, log_sigma), concatenated.

    The gradient is the reparameterization estimator over the same draws
    that produced the value, so with a fixed generator seed it is the exact
    gradient of the common-random-numbers ELBO.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    if noise_sigma <= 0:
        raise ValueError("noise_sigma must be positive")
    engine = _LikelihoodEngine(model, dataset, cs, mode, projection_tol)
    eps = rng.standard_normal((S, post.size))
    elbo, grad, _, _, _ = _elbo_core(
        engine, _n_observations(model, dataset), post, prior, noise_sigma, eps, True
    )
    return elbo, grad


def train_vi(
    model,
    dataset,
    cfg: VIConfig,
    prior: Tuple[float, float] = (0.0, 1.0),
    noise_sigma: float = 0.1,
    cs=None,
):
    """Fit the mean-field posterior by Adam ascent on the Monte Carlo ELBO.

    Returns (posterior, report).  The report reuses the training-report
    layout with data_loss = mean negative log-likelihood, physics_loss = KL,
    total_loss = their sum (the negative ELBO), and max_violation taken over
    the epoch's draws.  Coordinates frozen by the model keep their initial
    mean and a collapsed sigma throughout.
    """
    if dataset.n < 1:
        raise ValueError("train_vi needs a non-empty dataset")
    if noise_sigma <= 0:
        raise ValueError("noise_sigma must be positive")

    engine = _LikelihoodEngine(model, dataset, cs, cfg.mode, cfg.projection_tol)
    n_obs = _n_observations(model, dataset)
    P = model.layout.size

    mu = model.init_parameters(cfg.seed).astype(np.float64)
    ls = np.full(P, float(cfg.init_log_sigma))
    frozen = np.asarray(getattr(model, "frozen_indices", np.zeros(0, dtype=int)), dtype=int)
    ls[frozen] = -20.0  # pinned coordinates do not vary across draws
    x = np.concatenate([mu, ls])
    frozen_x = np.concatenate([frozen, frozen + P]) if frozen.size else frozen

    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(2 * P, lr=cfg.learning_rate)
    rows = []
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        post = GaussianPosterior(x[:P], x[P:])
        eps = rng.standard_normal((cfg.elbo_samples, P))
        try:
            elbo, grad, nll, kl, worst = _elbo_core(
                engine, n_obs, post, prior, noise_sigma, eps, True
            )
        except PosteriorDrawError as err:
            raise DivergenceError(f"ELBO ascent failed at epoch {epoch}: {err}", epoch) from err
        if not np.isfinite(elbo) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite ELBO at epoch {epoch}", epoch)
        rows.append((nll, kl, nll + kl, worst))
        step_grad = -grad
        if frozen_x.size:
            step_grad[frozen_x] = 0.0
        x_new = adam_step(state, x, step_grad)
        if frozen_x.size:
            x_new[frozen_x] = x[frozen_x]
        x = x_new

    wall = time.perf_counter() - t0
    report = TrainReport(
        mode=f"vi_{cfg.mode}",
        data_loss=[r[0] for r in rows],
        physics_loss=[r[1] for r in rows],
        total_loss=[r[2] for r in rows],
        max_violation=[r[3] for r in rows],
        theta=x[:P].copy(),
        wall_time=wall,
        termination="max_epochs",
    )
    return GaussianPosterior(x[:P], x[P:]), report


def predictive_bands(
    model,
    post: GaussianPosterior,
    U_query,
    S: int = 2000,
    beta: float = 0.95,
    rng: Optional[np.random.Generator] = None,
    mode: str = "soft",
    cs=None,
    projection_tol: float = 1e-10,
) -> PredictiveBands:
    """Empirical beta-quantile bands over S posterior draws.

    Hard modes project every draw before the quantiles are taken, so band
    edges are order statistics of feasible predictions.
    """
    if S < 100:
        raise ValueError("S must be at least 100 for stable quantiles")
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    U_query = np.atleast_2d(np.asarray(U_query, dtype=np.float64))
    predictor = Predictor(model, mode, cs, projection_tol)
    if rng is None:
        rng = np.random.default_rng(0)

    thetas = post.sample(rng, S)
    draws = np.empty((S, U_query.shape[0], model.output_dim))
    for s in range(S):
        try:
            draws[s] = predictor.predict(U_query, thetas[s])
        except _DRAW_FAILURES as err:
            raise PosteriorDrawError(f"forward failed at posterior draw {s}: {err}", s) from err

    mean = draws.mean(axis=0)
    lo_q = (1.0 - beta) / 2.0
    lower = np.quantile(draws, lo_q, axis=0)
    upper = np.quantile(draws, 1.0 - lo_q, axis=0)
    lower = np.minimum(lower, mean)
    upper = np.maximum(upper, mean)
    return PredictiveBands(U_query, mean, lower, upper, float(beta), S)


def coverage(bands: PredictiveBands, truth) -> float:
    """Fraction of true values inside the bands, counted per coordinate."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != bands.mean.shape:
        raise ValueError(f"truth shape {truth.shape} must match bands {bands.mean.shape}")
    inside = (bands.lower <= truth) & (truth <= bands.upper)
    return float(np.mean(inside))
