"""Paired comparison of a plain network against the constrained hybrid.

Same data, same seeds, same architecture; the only difference is whether
the physics is enforced.  Three seeds keep the run short; the acceptance
suite does the full ten with uncertainty bands on top.
"""

from pcml.bench import compare_ml_vs_pcml, reactor_problem
from pcml.train import TrainConfig

prob = reactor_problem(sigma=0.02)
cfg_ml = TrainConfig(mode="soft", data_weight=1.0, physics_weight=0.0,
                     learning_rate=0.02, max_epochs=100)
cfg_pcml = TrainConfig(mode="hard_sequential", learning_rate=0.02, max_epochs=100)

res = compare_ml_vs_pcml(prob, cfg_ml, cfg_pcml, n_seeds=3,
                         n_train=20, n_test=50, hidden=(16,), target_step=0.1)

print(res.to_csv_text())
wins = res.win_count("pcml")
print(f"constrained arm wins test rmse on {wins}/{len(res.paired_seeds())} seeds")
for row in res.rows:
    if row.metrics is not None:
        print(f"  seed {row.seed} {row.arm:>5}: worst violation {row.metrics.max_violation:.2e}")
