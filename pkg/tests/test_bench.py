"""Benchmark problems, data generation, metrics, and the paired comparison."""

import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

from pcml.bench import (
    BenchmarkProblem,
    ComparisonResult,
    MetricsReport,
    NoiseSpec,
    build_model,
    compare_ml_vs_pcml,
    evaluate,
    generate_data,
    mixer_problem,
    reactor_problem,
)
from pcml.model import NeuralODEModel, PCMLModel
from pcml.physics import IntegratorConfig, integrate
from pcml.train import TrainConfig, train
from pcml.uq import VIConfig, train_vi


class TestNoiseSpec:
    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            NoiseSpec(sigma=-0.1)

    def test_vector_sigma_broadcast(self):
        spec = NoiseSpec(sigma=0.05)
        np.testing.assert_array_equal(spec.sigma_vector(3), [0.05, 0.05, 0.05])


class TestReactorProblem:
    def test_shape_and_defaults(self):
        prob = reactor_problem()
        assert prob.name == "reactor"
        assert (prob.input_dim, prob.output_dim) == (1, 3)
        assert prob.default_n_train == 21

    def test_conservation_of_total_concentration(self):
        prob = reactor_problem()
        U = np.linspace(0.0, 5.0, 101)[:, None]
        Y = prob.truth(U)
        assert np.max(np.abs(Y.sum(axis=1) - 1.0)) <= 1e-10

    def test_truth_feasible_under_constraint_set(self):
        prob = reactor_problem()
        U = np.linspace(0.0, 5.0, 21)[:, None]
        Y = prob.truth(U)
        assert max(prob.cs.violation(u, y) for u, y in zip(U, Y)) <= 1e-10

    def test_first_species_closed_form(self):
        prob = reactor_problem()
        ca = prob.truth(np.array([[1.0]]))[0, 0]
        assert abs(ca - 0.367879) <= 1e-6

    def test_intermediate_species_closed_form(self):
        prob = reactor_problem()
        cb = prob.truth(np.array([[1.0]]))[0, 1]
        assert abs(cb - 2.0 * (math.exp(-0.5) - math.exp(-1.0))) <= 1e-5

    def test_ode_integration_matches_closed_form(self):
        prob = reactor_problem()
        times, states = integrate(prob.ode, IntegratorConfig(step=0.05, steps_per_interval=5), None)
        assert np.max(np.abs(states - prob.truth(times[:, None]))) <= 1e-6

    def test_concentrations_nonnegative_and_bounded(self):
        prob = reactor_problem()
        Y = prob.truth(np.linspace(0.0, 5.0, 200)[:, None])
        assert np.all(Y >= -1e-12) and np.all(Y <= 1.0 + 1e-12)


class TestMixerProblem:
    def test_equal_inlets_preserve_composition(self):
        prob = mixer_problem()
        y = prob.truth(np.array([[1.3, 0.4, 1.3, 0.4]]))[0]
        assert y[1] / y[0] == pytest.approx(0.4, abs=1e-14)

    def test_zero_flow_inlet_passes_the_other_through(self):
        prob = mixer_problem()
        y = prob.truth(np.array([[1.7, 0.6, 0.0, 0.9]]))[0]
        assert y[0] == pytest.approx(1.7, abs=1e-14)
        assert y[1] == pytest.approx(1.7 * 0.6, abs=1e-14)

    def test_random_instances_match_hand_balance(self):
        prob = mixer_problem()
        rng = np.random.default_rng(12)
        U = prob.sample_train(rng, 40)
        Y = prob.truth(U)
        for (f1, x1, f2, x2), y in zip(U, Y):
            # component B balance solved independently
            g_b = f1 * (1.0 - x1) + f2 * (1.0 - x2)
            assert abs(y[0] - (f1 + f2)) <= 1e-12
            assert abs(y[1] - (f1 * x1 + f2 * x2)) <= 1e-12
            assert abs(y[2] - g_b) <= 1e-12

    def test_truth_feasible_under_input_dependent_balance(self):
        prob = mixer_problem()
        U = prob.sample_train(np.random.default_rng(3), 60)
        Y = prob.truth(U)
        assert max(prob.cs.violation(u, y) for u, y in zip(U, Y)) <= 1e-10

    def test_inputs_land_in_declared_box(self):
        prob = mixer_problem()
        U = prob.sample_test(np.random.default_rng(8), 500)
        assert np.all(U[:, [0, 2]] >= 0.5) and np.all(U[:, [0, 2]] <= 2.0)
        assert np.all(U[:, [1, 3]] >= 0.1) and np.all(U[:, [1, 3]] <= 0.9)


class TestGenerateData:
    def test_zero_noise_train_equals_truth(self):
        prob = reactor_problem(sigma=0.0)
        tr, te, (truth_train, truth_test) = generate_data(prob, 15, 10, seed=4)
        assert np.array_equal(tr.y, truth_train)
        assert np.array_equal(te.y, truth_test)

    def test_same_seed_identical(self):
        prob = mixer_problem()
        a = generate_data(prob, 12, 9, seed=7)
        b = generate_data(prob, 12, 9, seed=7)
        assert np.array_equal(a[0].u, b[0].u) and np.array_equal(a[0].y, b[0].y)
        assert np.array_equal(a[1].u, b[1].u) and np.array_equal(a[1].y, b[1].y)

    def test_different_seed_differs(self):
        prob = mixer_problem()
        a = generate_data(prob, 12, 9, seed=1)
        b = generate_data(prob, 12, 9, seed=2)
        assert not np.array_equal(a[0].y, b[0].y)

    def test_test_targets_are_noiseless(self):
        prob = reactor_problem(sigma=0.05)
        _, te, (_, truth_test) = generate_data(prob, 10, 25, seed=0)
        assert np.array_equal(te.y, truth_test)
        assert np.array_equal(te.y, prob.truth(te.u))

    def test_noise_statistics(self):
        prob = replace(mixer_problem(), noise=NoiseSpec(sigma=0.05, bias=0.3, seed=2))
        tr, _, (truth_train, _) = generate_data(prob, 10_000, 1, seed=0)
        resid = tr.y - truth_train
        assert abs(float(resid.std()) - 0.05) <= 0.05 * 0.05
        assert abs(float(resid.mean()) - 0.3) <= 0.01

    def test_sizes_validated(self):
        prob = mixer_problem()
        with pytest.raises(ValueError, match="n_train"):
            generate_data(prob, 0, 5, seed=0)


class TestMetricsReport:
    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            MetricsReport(rmse_test=float("nan"), max_violation=0.0, mean_violation=0.0, wall_time=0.1)

    def test_coverage_range_enforced(self):
        with pytest.raises(ValueError, match="coverage95"):
            MetricsReport(
                rmse_test=0.1, max_violation=0.0, mean_violation=0.0, wall_time=0.1, coverage95=1.2
            )

    def test_dict_keys(self):
        m = MetricsReport(rmse_test=0.1, max_violation=0.01, mean_violation=0.005, wall_time=0.2)
        d = m.to_dict()
        assert set(d) == {
            "rmse_train",
            "rmse_test",
            "max_violation",
            "mean_violation",
            "coverage95",
            "mean_band_width",
            "wall_time_s",
        }
        assert d["coverage95"] is None


class _TruthOracle:
    """Stub model that emits the ground truth itself."""

    def __init__(self, prob):
        self.prob = prob
        self.output_dim = prob.output_dim

    def predict_batch(self, U, theta):
        Y = self.prob.truth(U)
        return Y, Y.copy()


class _ConstantModel:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.output_dim = self.value.size

    def predict_batch(self, U, theta):
        Y = np.tile(self.value, (np.atleast_2d(U).shape[0], 1))
        return Y, Y.copy()


class TestEvaluate:
    def test_truth_oracle_scores_perfectly(self):
        prob = reactor_problem()
        _, te, _ = generate_data(prob, 10, 30, seed=1)
        m = evaluate(_TruthOracle(prob), np.zeros(1), prob, te)
        assert m.rmse_test == 0.0
        assert m.max_violation <= 1e-10

    def test_constant_model_matches_analytic_rmse(self):
        prob = reactor_problem()
        _, te, _ = generate_data(prob, 10, 40, seed=5)
        c = np.array([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])
        m = evaluate(_ConstantModel(c), np.zeros(1), prob, te)
        expected = math.sqrt(float(np.mean((c - te.y) ** 2)))
        assert m.rmse_test == pytest.approx(expected, rel=1e-13)

    def test_hard_sequential_predictions_feasible(self):
        prob = mixer_problem()
        tr, te, _ = generate_data(prob, 15, 25, seed=2)
        model = build_model(prob, hidden=())
        cfg = TrainConfig(mode="hard_sequential", physics_weight=0.0, max_epochs=120,
                          learning_rate=0.05, seed=0)
        report = train(model, tr, prob.cs, cfg)
        m = evaluate(model, report.theta, prob, te, train=tr, mode="hard_sequential")
        assert m.max_violation <= 1e-8
        assert m.rmse_train is not None

    def test_point_evaluation_has_no_uq_fields(self):
        prob = mixer_problem()
        _, te, _ = generate_data(prob, 8, 10, seed=0)
        m = evaluate(_TruthOracle(prob), np.zeros(1), prob, te)
        assert m.coverage95 is None and m.mean_band_width is None

    def test_recomputation_identical(self):
        prob = mixer_problem()
        tr, te, _ = generate_data(prob, 10, 12, seed=3)
        model = build_model(prob, hidden=())
        cfg = TrainConfig(mode="soft", physics_weight=0.0, max_epochs=50, learning_rate=0.05, seed=1)
        theta = train(model, tr, prob.cs, cfg).theta
        a = evaluate(model, theta, prob, te, train=tr)
        b = evaluate(model, theta, prob, te, train=tr)
        assert (a.rmse_test, a.rmse_train, a.max_violation, a.mean_violation) == (
            b.rmse_test,
            b.rmse_train,
            b.max_violation,
            b.mean_violation,
        )

    def test_posterior_evaluation_adds_uq_fields(self):
        prob = mixer_problem()
        tr, te, _ = generate_data(prob, 10, 12, seed=3)
        model = build_model(prob, hidden=())
        cfg = VIConfig(max_epochs=40, elbo_samples=4, seed=0)
        post, _ = train_vi(model, tr, cfg, (0.0, 1.0), noise_sigma=0.05)
        m = evaluate(model, post, prob, te, S=200)
        assert m.coverage95 is not None and 0.0 <= m.coverage95 <= 1.0
        assert m.mean_band_width is not None and m.mean_band_width >= 0.0
        # posterior path is deterministic as well (internal fixed generator)
        m2 = evaluate(model, post, prob, te, S=200)
        assert m.rmse_test == m2.rmse_test and m.coverage95 == m2.coverage95


class TestBuildModel:
    def test_reactor_gets_neural_ode(self):
        model = build_model(reactor_problem(), hidden=(6,))
        assert isinstance(model, NeuralODEModel)
        assert model.output_dim == 3

    def test_mixer_gets_feedforward(self):
        model = build_model(mixer_problem(), hidden=(5,))
        assert isinstance(model, PCMLModel)
        assert model.ml.layer_sizes == [4, 5, 3]


def _mixer_cfgs(epochs=120):
    ml = TrainConfig(mode="soft", physics_weight=0.0, max_epochs=epochs, learning_rate=0.05)
    pcml = TrainConfig(mode="hard_sequential", physics_weight=0.0, max_epochs=epochs,
                       learning_rate=0.05)
    return ml, pcml


class TestCompare:
    def test_seed_count_validated(self):
        ml, pcml = _mixer_cfgs()
        with pytest.raises(ValueError, match="n_seeds"):
            compare_ml_vs_pcml(mixer_problem(), ml, pcml, n_seeds=2)

    def test_identical_configs_give_identical_metrics(self):
        prob = mixer_problem()
        cfg, _ = _mixer_cfgs(epochs=60)
        comp = compare_ml_vs_pcml(prob, cfg, cfg, n_seeds=3, n_train=10, n_test=10, hidden=())
        for seed in range(3):
            pair = [r.metrics for r in comp.rows if r.seed == seed]
            assert pair[0].rmse_test == pair[1].rmse_test
            assert pair[0].rmse_train == pair[1].rmse_train
            assert pair[0].max_violation == pair[1].max_violation

    def test_hard_arm_feasible_every_seed(self):
        prob = mixer_problem()
        ml, pcml = _mixer_cfgs(epochs=80)
        comp = compare_ml_vs_pcml(prob, ml, pcml, n_seeds=3, n_train=12, n_test=15, hidden=())
        pcml_rows = [r for r in comp.rows if r.arm == "pcml"]
        assert len(pcml_rows) == 3
        assert all(r.metrics.max_violation <= 1e-8 for r in pcml_rows)

    @pytest.mark.filterwarnings("ignore:overflow")
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_failures_recorded_not_fatal(self):
        prob = mixer_problem()
        ml = TrainConfig(mode="soft", physics_weight=0.0, max_epochs=5, learning_rate=1e200)
        _, pcml = _mixer_cfgs(epochs=30)
        comp = compare_ml_vs_pcml(prob, ml, pcml, n_seeds=3, n_train=8, n_test=8, hidden=())
        ml_rows = [r for r in comp.rows if r.arm == "ml"]
        assert all(r.metrics is None and r.termination == "failed" for r in ml_rows)
        assert all(r.error for r in ml_rows)
        pcml_rows = [r for r in comp.rows if r.arm == "pcml"]
        assert all(r.metrics is not None for r in pcml_rows)
        assert comp.paired_seeds() == []
        assert comp.win_count("pcml") == 0

    def test_reactor_mini_sweep_pcml_advantage(self):
        prob = reactor_problem()
        ml = TrainConfig(mode="soft", physics_weight=0.0, max_epochs=150, learning_rate=0.02)
        pcml = TrainConfig(mode="hard_sequential", physics_weight=0.0, max_epochs=150,
                           learning_rate=0.02)
        comp = compare_ml_vs_pcml(prob, ml, pcml, n_seeds=3, n_train=20, n_test=50)
        assert comp.paired_seeds() == [0, 1, 2]
        assert comp.win_count("pcml") >= 2
        pcml_rows = [r for r in comp.rows if r.arm == "pcml"]
        assert all(r.metrics.max_violation <= 1e-8 for r in pcml_rows)

    def test_csv_one_row_per_seed_per_arm(self):
        prob = mixer_problem()
        ml, pcml = _mixer_cfgs(epochs=40)
        comp = compare_ml_vs_pcml(prob, ml, pcml, n_seeds=3, n_train=8, n_test=8, hidden=())
        rows = list(csv.reader(io.StringIO(comp.to_csv_text())))
        assert rows[0][:4] == ["seed", "arm", "rmse_train", "rmse_test"]
        assert len(rows) - 1 == 6
        arms = [(r[0], r[1]) for r in rows[1:]]
        assert arms == [("0", "ml"), ("0", "pcml"), ("1", "ml"), ("1", "pcml"),
                        ("2", "ml"), ("2", "pcml")]

    def test_json_aggregates(self):
        prob = mixer_problem()
        ml, pcml = _mixer_cfgs(epochs=40)
        comp = compare_ml_vs_pcml(prob, ml, pcml, n_seeds=3, n_train=8, n_test=8, hidden=())
        d = comp.to_json_dict()
        assert d["problem"] == "mixer"
        assert set(d["wins"]) == {"ml", "pcml"}
        assert len(d["rows"]) == 6

    def test_uq_arms_report_band_widths(self):
        prob = mixer_problem()
        ml, pcml = _mixer_cfgs(epochs=40)
        comp = compare_ml_vs_pcml(
            prob, ml, pcml, n_seeds=3, n_train=8, n_test=8, hidden=(),
            uq=True, S=150, vi_epochs=30, vi_samples=4,
        )
        assert comp.mean_band_width("ml") is not None
        assert comp.mean_band_width("pcml") is not None
        for r in comp.rows:
            assert r.metrics.coverage95 is not None


class TestElboTrendOnReactor:
    def test_elbo_improves_across_seeds(self):
        # reduced reactor instance keeps the rollout graph small
        prob = reactor_problem()
        for seed in range(5):
            tr, _, _ = generate_data(prob, 10, 5, seed=seed)
            model = build_model(prob, hidden=(6,), target_step=0.25)
            cfg = VIConfig(mode="soft", learning_rate=0.02, max_epochs=220,
                           elbo_samples=4, seed=seed)
            _, report = train_vi(model, tr, cfg, (0.0, 1.0), noise_sigma=0.02)
            neg_elbo = report.total_loss
            leading = float(np.mean(neg_elbo[:100]))
            trailing = float(np.mean(neg_elbo[-100:]))
            assert trailing <= leading
