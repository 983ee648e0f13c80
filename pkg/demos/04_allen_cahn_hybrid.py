"""Steady states of Allen-Cahn, classical and learned.

Sample a smooth random forcing, relax a random initial field with the
semi-implicit spectral scheme, and watch energy and residual fall. Then take
a learned spectral update map and run it three ways:
  * for as many steps as it was trained to unroll,
  * for far longer than that,
  * as the first phase of a hybrid solver that hands over to the classical
    scheme once the learned steps stop moving.

Pass the directory of a `bifurcate ac-train` run to use its model. Without
one, a small model is trained here for a minute or two. That rough map
blows up when iterated far past its horizon, and the hybrid still finishes
the solve.

    python demos/04_allen_cahn_hybrid.py [RUN_DIR]
"""
import sys

import numpy as np
import torch

from bifurcate import allencahn as ac
from bifurcate.cli import runs

rng = np.random.default_rng(0)
n = 32
f = ac.grf_sample(n, ac.sample_forcing_spec(rng), rng).values
u0 = ac.grf_sample(n, ac.INIT_SPEC, rng).values

res = ac.imex_solve(f, u0, record_energy=True)
print(f"IMEX converged in {res.steps} steps")
for t in (0, 9, 49, res.steps - 1):
    print(f"  step {t + 1:4d}: energy {res.energies[t]: .5f}  residual {res.residuals[t]:.3e}")

if len(sys.argv) > 1:
    model = runs.load_model(sys.argv[1])
    print(f"\nloaded the learned operator from {sys.argv[1]}")
else:
    train, val = ac.gen_dataset(64, n, rng), ac.gen_dataset(4, n, rng)
    model = ac.SpectralNet(n, 16, 8, rng=np.random.default_rng(1), dtype=torch.float32)
    sched = ac.curriculum(18, lrs=[10 * lr for lr in ac.LRS])
    model, log = ac.train_ac(train, val, "energy", model=model, schedule=sched, batch_size=16)
    print(f"\nlearned operator, best validation residual {log.best_metric:.3e}")

horizon = ac.UNROLLS[-1]
pure = ac.pure_model_solve(model, f, u0, budget=200)
print(f"learned steps only: residual {pure.residuals[horizon - 1]:.3e} after {horizon} steps "
      f"(the trained horizon), {pure.residuals[-1]:.3e} after 200")
hy = ac.hybrid_solve(model, f, u0, budget=200)
print(f"hybrid: hands off at step {hy.handoff_step}, final residual {hy.residuals[-1]:.3e}, "
      f"classical phase monotone: {ac.imex_phase_monotone(hy)}")
