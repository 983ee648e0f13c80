"""Let the dynamics choose the branch, or choose it for them?

Train the same small residual MLP twice on the +-1/|x| toy problem. Once
each random start is pulled toward whichever label is nearest, and once
toward a prescribed branch that flips on every one of n_int log-spaced
intervals. Prescribed switching makes the target discontinuous, and the fit
gets worse as the switching gets denser. The selector the learned dynamics
induce stays smooth in x.

A short schedule keeps this under a couple of minutes; the `desk` profile of
`bifurcate toy-selectors` runs the full comparison.

    python demos/02_learned_versus_prescribed_selectors.py
"""
import numpy as np
import torch

from bifurcate import branches, toy

EPOCHS = 120
tr, va, te = (toy.make_toy("toy1", s) for s in ("train", "val", "test"))
kw = dict(schedule=toy.desk_schedule(EPOCHS, 10, 1e-2), batch_size=8, seed=0)

fit = toy.algorithm1_fit(tr, va, te, model=toy.new_model(0, dtype=torch.float32), **kw)
print(f"nearest-label training: test error {fit.test_error:.4f}")
for n_int in (2, 8):
    man = toy.manual_fit(tr, n_int, va, te, model=toy.new_model(0, dtype=torch.float32), **kw)
    print(f"prescribed, {n_int:2d} intervals: test error {man.test_error:.4f}")

# jumps in the induced selector x -> y_T(y0 = 1, x), counted on a grid uniform in 1/|x|
grid = toy.reciprocal_grid(1000)
vals = toy.induced_selector_values(fit.model, 1.0, grid, 10)
print("\nexceeding cells of the learned selector:", toy.selector_oscillation(vals, grid).exceed_count)
sel = branches.alternating_selector(branches.make_family("algebraic"), 64, "uniform_log_abs_x")
target = np.array([sel([x])[0] for x in grid])
print("exceeding cells of the 64-interval target:", toy.selector_oscillation(target, grid).exceed_count)
