"""Train the reactor surrogate three ways and compare constraint violations.

Soft training penalizes violations, so they shrink but never vanish.  Both
hard modes deploy through a projection and land on the constraint to
machine precision.
"""

import numpy as np

from pcml.bench import build_model, generate_data, reactor_problem
from pcml.train import AugmentedLagrangianConfig, Predictor, TrainConfig, train


def worst_violation(prob, test, pred):
    worst = 0.0
    for u, y in zip(test.u, pred):
        worst = max(worst, float(np.max(np.abs(prob.cs.residual(u, y)))))
    return worst


def main():
    prob = reactor_problem(sigma=0.02)
    # test targets are the noiseless truth
    data_train, data_test, _ = generate_data(prob, n_train=14, n_test=40, seed=0)

    configs = {
        "soft": TrainConfig(mode="soft", learning_rate=0.02, max_epochs=120),
        "hard_sequential": TrainConfig(mode="hard_sequential", learning_rate=0.02, max_epochs=120),
        "hard_simultaneous": TrainConfig(
            mode="hard_simultaneous",
            learning_rate=0.02,
            max_epochs=50,
            al=AugmentedLagrangianConfig(outer_iters=4),
        ),
    }

    print(f"{'mode':<18} {'epochs':>6} {'test rmse':>10} {'violation':>10}")
    for mode, cfg in configs.items():
        model = build_model(prob, hidden=(12,), target_step=0.25)
        report = train(model, data_train, prob.cs, cfg)
        pred = Predictor(model, mode, prob.cs).predict(data_test.u, report.theta)
        rmse = float(np.sqrt(np.mean((pred - data_test.y) ** 2)))
        viol = worst_violation(prob, data_test, pred)
        print(f"{mode:<18} {report.epochs:>6} {rmse:>10.4f} {viol:>10.2e}")

    print()
    print("total concentration along one soft prediction vs one projected one:")
    model = build_model(prob, hidden=(12,), target_step=0.25)
    report = train(model, data_train, prob.cs, configs["soft"])
    raw = model.predict_batch(data_test.u[:5], report.theta)[0]
    projected = Predictor(model, "hard_sequential", prob.cs).predict(
        data_test.u[:5], report.theta
    )
    for u, a, b in zip(data_test.u[:5], raw, projected):
        print(f"  t={u[0]:.2f}  raw sum={a.sum():.6f}  projected sum={b.sum():.6f}")


if __name__ == "__main__":
    main()
