"""One weight-tied update map, many answers.

The double-well equation 4y^3 - 4y + x = 0 has two stable roots for
|x| < 8/(3 sqrt 3) and one outside. We build the regularized update map for
that branch family, iterate it from a spread of starting points and look at
where the iterates end up. Inside the bistable window both roots appear;
past the fold every start lands on the surviving root. At x = 0 the start
y0 = 0 sits exactly where both roots are equally near; the damped map does
not move from there, so it shows up as an extra, unstable, limit.

Then we compare how sharply the naive and the regularized maps react to
the input near a point where two branches are equidistant.

    python demos/01_one_operator_many_branches.py
"""
import numpy as np

from bifurcate import branches, dynamics, metrics

fam = branches.make_family("double_well")
op = branches.regularized_operator(fam)
inits = np.linspace(-3, 3, 13).reshape(-1, 1)

print("x       limits reached from 13 starts     branch values")
for x in (-2.0, -1.0, 0.0, 0.8, 1.4, 2.0):
    rep = dynamics.attractor_sweep(op, [x], inits, T=200, tol=1e-10, dedup_radius=1e-6)
    limits = sorted(round(float(v[0]), 6) for v in rep.limits)
    values = sorted(round(float(v[0]), 6) for v in branches.eval_branches(fam, [x]))
    print(f"{x:5.1f}   {str(limits):32s}  {sorted(set(values))}")

# from y0 = 0 the branches y = x + 1 and y = x - 1 are equidistant exactly at x = 0;
# the naive nearest-branch step jumps across that tie, the damped one does not
pair = branches.make_family("affine_pair")
naive, reg = branches.naive_operator(pair, 0.5), branches.regularized_operator(pair)
print("\nLipschitz estimate of x -> g(0, x) as the grid closes in on x = 0")
for closest in (1e-1, 1e-2, 1e-3):
    half = np.linspace(closest, 0.5, int(0.5 / closest))
    grid = np.concatenate([-half[::-1], half])
    a = metrics.empirical_lipschitz(lambda x: naive.eval([0.0], x), grid)
    b = metrics.empirical_lipschitz(lambda x: reg.eval([0.0], x), grid)
    print(f"  closest |x| = {closest:g}: naive {a:8.1f}   regularized {b:6.3f}")
