"""Finite-branch set-valued maps and the operators built from them.

A :class:`BranchFamily` holds ordered branch maps ``f_1..f_n`` on a bounded
domain. The nearest selector picks the closest branch value to a state with
ties broken by branch order; the naive operator relaxes toward it with a fixed
step, and the regularized operator damps that step so it vanishes on the bad
set (switching configurations and excluded inputs), which keeps the update
Lipschitz in the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import dynamics
from .dynamics import UpdateOperator
from .errors import ConfigError, DomainError, InputError
from .metrics import empirical_lipschitz

EQ_TOL = 1e-9
FOLD = 8.0 / (3.0 * math.sqrt(3.0))
INV_SQRT3 = 1.0 / math.sqrt(3.0)


@dataclass
class BranchFamily:
    branches: Sequence[Callable[[np.ndarray], np.ndarray]]
    boxes: Sequence[tuple]
    output_dim: int = 1
    excluded_points: Sequence = ()
    excluded_hyperplanes: Sequence[tuple] = ()
    name: str = "family"
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if len(self.branches) < 1:
            raise ConfigError("a branch family needs at least one branch")
        self.boxes = [(np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float)))
                      for lo, hi in self.boxes]
        self.excluded_points = [np.atleast_1d(np.asarray(p, float)) for p in self.excluded_points]
        self.excluded_hyperplanes = [(np.atleast_1d(np.asarray(nrm, float)), float(c))
                                     for nrm, c in self.excluded_hyperplanes]

    @property
    def n(self) -> int:
        return len(self.branches)

    @property
    def input_dim(self) -> int:
        return int(self.boxes[0][0].shape[0])

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.min([b[0] for b in self.boxes], axis=0)
        hi = np.max([b[1] for b in self.boxes], axis=0)
        return lo, hi

    def excluded_distance(self, x) -> float:
        x = np.atleast_1d(np.asarray(x, float))
        d = math.inf
        for p in self.excluded_points:
            d = min(d, float(np.linalg.norm(x - p)))
        for nrm, c in self.excluded_hyperplanes:
            d = min(d, abs(float(nrm @ x) - c) / float(np.linalg.norm(nrm)))
        return d

    def _excluded_component(self, x) -> str | None:
        for p in self.excluded_points:
            if np.array_equal(x, p):
                return f"point {p.tolist()}"
        for nrm, c in self.excluded_hyperplanes:
            if float(nrm @ x) == c:
                return f"hyperplane {nrm.tolist()}.x = {c}"
        return None

    def in_domain(self, x, slack: float = 1e-12) -> bool:
        x = np.atleast_1d(np.asarray(x, float))
        inside = any(np.all(x >= lo - slack) and np.all(x <= hi + slack) for lo, hi in self.boxes)
        return inside and self._excluded_component(x) is None

    def values(self, x) -> np.ndarray:
        """Branch values at ``x`` as an ``(n, m)`` array in priority order."""
        x = np.atleast_1d(np.asarray(x, float))
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        bad = self._excluded_component(x)
        if bad is not None:
            raise DomainError(f"{self.name}: x={x.tolist()} lies on excluded {bad}")
        if not any(np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12) for lo, hi in self.boxes):
            raise DomainError(f"{self.name}: x={x.tolist()} is outside the domain")
        vals = np.array([np.atleast_1d(np.asarray(f(x), float)).reshape(self.output_dim)
                         for f in self.branches])
        if len(self._cache) > 8192:
            self._cache.clear()
        self._cache[key] = vals
        return vals

    def collapse_pattern(self, x, tol: float = EQ_TOL) -> tuple:
        """Cluster label per branch: equal labels mean the branches coincide at ``x``."""
        vals = self.values(x)
        labels = [-1] * self.n
        for i in range(self.n):
            if labels[i] >= 0:
                continue
            labels[i] = i
            for j in range(i + 1, self.n):
                if labels[j] < 0 and np.linalg.norm(vals[i] - vals[j]) <= tol:
                    labels[j] = i
        return tuple(labels)


def eval_branches(fam: BranchFamily, x) -> list[np.ndarray]:
    return list(fam.values(x))


@dataclass(frozen=True)
class SelectorChoice:
    branch_index: int  # 1-based, matching the priority order
    value: np.ndarray
    margin: float


def _select(vals: np.ndarray, y: np.ndarray) -> tuple[int, float]:
    d2 = np.sum((vals - y) ** 2, axis=1)
    i = int(np.argmin(d2))
    u = vals[i]
    margin = math.inf
    for j in range(vals.shape[0]):
        gap = float(np.linalg.norm(vals[j] - u))
        if gap <= EQ_TOL:
            continue
        margin = min(margin, (d2[j] - d2[i]) / (2.0 * gap))
    return i, max(margin, 0.0)


def nearest_selector(fam: BranchFamily, y, x) -> SelectorChoice:
    """Closest branch value to ``y``; ties go to the smallest branch index.

    ``margin`` is the distance from ``y`` to the nearest bisector separating
    the selected value from a distinct competitor.
    """
    vals = fam.values(x)
    y = np.atleast_1d(np.asarray(y, float))
    i, margin = _select(vals, y)
    return SelectorChoice(i + 1, vals[i].copy(), margin)


def naive_operator(fam: BranchFamily, eta: float) -> UpdateOperator:
    if not 0.0 < eta < 1.0:
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")

    def step(y, x):
        vals = fam.values(x)
        i, _ = _select(vals, y)
        return (1.0 - eta) * y + eta * vals[i]

    return UpdateOperator(step, fam.output_dim, fam.input_dim, f"naive({fam.name})")


class _Probe:
    """Fixed joint-space probe directions so that probing stays deterministic."""

    def __init__(self, dim: int, count: int, seed: int = 12345):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((count, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        self.dirs = v * rng.uniform(0.0, 1.0, (count, 1)) ** (1.0 / dim)


def _cluster_of(vals, i):
    return frozenset(j for j in range(vals.shape[0]) if np.linalg.norm(vals[j] - vals[i]) <= EQ_TOL)


def bad_set_factor(fam: BranchFamily, y, x, probe_radius: float = 0.5, probe_count: int = 0,
                   _probe: _Probe | None = None) -> float:
    """Safety factor ``rho / (1 + rho)`` with ``rho`` an estimate of the bad-set distance.

    ``rho`` is the smallest of the Voronoi margin of ``y`` at ``x``, the
    distance from ``x`` to the excluded set, and (when ``probe_count > 0``)
    the joint-space distance to switching configurations located by bisection
    from random probes around ``(y, x)``.
    """
    if probe_count < 0:
        raise InputError("probe_count must be >= 0")
    y = np.atleast_1d(np.asarray(y, float))
    x = np.atleast_1d(np.asarray(x, float))
    vals = fam.values(x)
    i, margin = _select(vals, y)
    rho = min(margin, fam.excluded_distance(x))
    if probe_count > 0 and rho > 0:
        rho = min(rho, _probe_distance(fam, y, x, i, vals, probe_radius, probe_count, _probe))
    if math.isinf(rho):
        return 1.0
    return rho / (1.0 + rho)


def _probe_distance(fam, y, x, i, vals, radius, count, probe):
    m = y.shape[0]
    base = np.concatenate([y, x])
    probe = probe or _Probe(base.shape[0], count)
    cluster = _cluster_of(vals, i)
    best = math.inf

    def switched(pt):
        xp = pt[m:]
        if not fam.in_domain(xp):
            return None
        vp = fam.values(xp)
        ip, mp = _select(vp, pt[:m])
        return mp == 0.0 or _cluster_of(vp, ip) != cluster

    for d in probe.dirs[:count]:
        pt = base + radius * d
        s = switched(pt)
        if not s:
            continue
        lo, hi = 0.0, 1.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            sm = switched(base + radius * mid * d)
            if sm is None:
                break
            if sm:
                hi = mid
            else:
                lo = mid
        best = min(best, radius * hi * float(np.linalg.norm(d)))
    return best


@dataclass
class ProfileGrid:
    """Sampling plan for estimating the safe-tube profiles ``H1(R, s)``, ``H2(R, s)``."""

    R_values: Sequence[float] = (2.0, 4.0, 8.0, 16.0)
    s_values: Sequence[float] = tuple(np.linspace(0.02, 0.98, 49))
    n_y: int = 64
    n_x: int = 64
    seed: int = 0


@dataclass
class SafeProfile:
    R: np.ndarray
    s: np.ndarray
    H1: np.ndarray
    H2: np.ndarray

    @property
    def lam(self) -> np.ndarray:
        return 1.0 / (self.H1 + self.H2 + 1.0)

    def theta(self, R: float, r: float) -> float:
        """Integral of ``lambda_R`` from 0 to ``r``; ``lambda_R(0)`` is taken as 0."""
        k = min(int(np.searchsorted(self.R, R)), len(self.R) - 1)
        s = np.concatenate([[0.0], self.s])
        lam = np.concatenate([[0.0], self.lam[k]])
        if r <= 0:
            return 0.0
        r = min(r, s[-1])
        mask = s < r
        ss = np.concatenate([s[mask], [r]])
        ll = np.concatenate([lam[mask], [np.interp(r, s, lam)]])
        return float(trapezoid(ll, ss))


def _sample_domain(fam: BranchFamily, rng, count):
    pts = []
    while len(pts) < count:
        lo, hi = fam.boxes[int(rng.integers(len(fam.boxes)))]
        x = rng.uniform(lo, hi)
        if fam.in_domain(x):
            pts.append(x)
    return np.array(pts)


def estimate_profile(fam: BranchFamily, grid: ProfileGrid) -> SafeProfile:
    """Sampled suprema of the selector's x-slope (H1) and size (H2) on safe tubes."""
    rng = np.random.default_rng(grid.seed)
    R = np.asarray(sorted(grid.R_values), float)
    s = np.asarray(sorted(grid.s_values), float)
    m = fam.output_dim
    H1 = np.zeros((len(R), len(s)))
    H2 = np.zeros((len(R), len(s)))
    xs = _sample_domain(fam, rng, grid.n_x)
    for a, Ra in enumerate(R):
        dirs = rng.standard_normal((grid.n_y, m))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        ys = dirs * Ra * rng.uniform(0, 1, (grid.n_y, 1)) ** (1.0 / m)
        for y in ys:
            om = np.empty(len(xs))
            P = np.empty((len(xs), m))
            for k, x in enumerate(xs):
                vals = fam.values(x)
                i, margin = _select(vals, y)
                rho = min(margin, fam.excluded_distance(x))
                om[k] = 1.0 if math.isinf(rho) else rho / (1.0 + rho)
                P[k] = vals[i]
            for b, sb in enumerate(s):
                keep = om >= sb
                if not np.any(keep):
                    continue
                Pk, xk = P[keep], xs[keep]
                H2[a, b] = max(H2[a, b], float(np.max(np.linalg.norm(Pk, axis=1))))
                if len(xk) > 1:
                    dx = np.linalg.norm(xk[:, None, :] - xk[None, :, :], axis=2)
                    dP = np.linalg.norm(Pk[:, None, :] - Pk[None, :, :], axis=2)
                    off = dx > 0
                    H1[a, b] = max(H1[a, b], float(np.max(dP[off] / dx[off])))
    # the true profiles are nonincreasing in s and nondecreasing in R
    H1 = np.maximum.accumulate(np.maximum.accumulate(H1[:, ::-1], axis=1)[:, ::-1], axis=0)
    H2 = np.maximum.accumulate(np.maximum.accumulate(H2[:, ::-1], axis=1)[:, ::-1], axis=0)
    return SafeProfile(R, s, H1, H2)


def damping(fam: BranchFamily, y, x, mode: str = "margin", profile: SafeProfile | None = None,
            probe_radius: float = 0.5, probe_count: int = 0) -> float:
    omega = bad_set_factor(fam, y, x, probe_radius, probe_count)
    if mode == "margin":
        return omega / (1.0 + omega)
    if mode == "profile":
        if profile is None:
            raise ConfigError("profile mode needs an estimated SafeProfile")
        th = profile.theta(1.0 + float(np.linalg.norm(y)), omega)
        return th / (1.0 + th)
    raise ConfigError(f"unknown damping mode {mode!r}")


def regularized_operator(fam: BranchFamily, mode: str = "margin",
                         profile_grid: ProfileGrid | None = None,
                         probe_radius: float = 0.5, probe_count: int = 0) -> UpdateOperator:
    """Damped relaxation ``(1 - eta) y + eta P_y(x)`` whose step vanishes on the bad set."""
    profile = None
    if mode == "profile":
        if profile_grid is None:
            raise ConfigError("profile mode requires profile_grid")
        profile = estimate_profile(fam, profile_grid)
    elif mode != "margin":
        raise ConfigError(f"unknown damping mode {mode!r}")
    probe = _Probe(fam.output_dim + fam.input_dim, probe_count) if probe_count else None

    def step(y, x):
        vals = fam.values(x)
        i, margin = _select(vals, y)
        rho = min(margin, fam.excluded_distance(x))
        if probe is not None and rho > 0:
            rho = min(rho, _probe_distance(fam, y, np.atleast_1d(x), i, vals,
                                           probe_radius, probe_count, probe))
        omega = 1.0 if math.isinf(rho) else rho / (1.0 + rho)
        if profile is None:
            eta = omega / (1.0 + omega)
        else:
            th = profile.theta(1.0 + float(np.linalg.norm(y)), omega)
            eta = th / (1.0 + th)
        return (1.0 - eta) * y + eta * vals[i]

    op = UpdateOperator(step, fam.output_dim, fam.input_dim, f"regularized[{mode}]({fam.name})")
    if profile is not None:
        object.__setattr__(op, "profile", profile)
    return op


# --- stability of the collapse pattern -------------------------------------------------

def is_stable_input(fam: BranchFamily, x, radius: float = 1e-3, count: int = 16,
                    seed: int = 0) -> bool:
    """Whether the pairwise-equality pattern is constant on a sampled neighbourhood."""
    x = np.atleast_1d(np.asarray(x, float))
    if not fam.in_domain(x):
        return False
    if fam.excluded_distance(x) <= radius:
        return False
    base = fam.collapse_pattern(x)
    rng = np.random.default_rng(seed)
    d = x.shape[0]
    offsets = rng.uniform(-radius, radius, (count, d))
    if d == 1:
        offsets = np.concatenate([offsets, [[radius], [-radius]]])
    for off in offsets:
        xp = x + off
        if not fam.in_domain(xp):
            continue
        if fam.collapse_pattern(xp) != base:
            return False
    return True


# --- verification of the representation property --------------------------------------

@dataclass
class ExpressivityReport:
    x_grid: np.ndarray
    valid_fraction: np.ndarray
    recovered_all: np.ndarray
    stable: np.ndarray
    n_limits: np.ndarray
    lipschitz_coarse: float
    lipschitz_fine: float
    valid_overall: float

    @property
    def item1_regular(self) -> bool:
        # a jump in x makes the estimate scale with 1/h; a Lipschitz slice does not
        return bool(self.lipschitz_fine <= 2.0 * self.lipschitz_coarse + 1e-9)

    @property
    def item2_convergence(self) -> float:
        return float(np.mean(self.valid_fraction[self.stable])) if self.stable.any() else 1.0

    @property
    def item3_recovery(self) -> float:
        return float(np.mean(self.recovered_all[self.stable])) if self.stable.any() else 1.0

    def passed(self, min_valid: float = 0.99) -> bool:
        return self.item1_regular and self.item2_convergence >= min_valid and self.item3_recovery == 1.0

    def rows(self):
        for k, x in enumerate(self.x_grid):
            yield {"x": float(x[0]) if len(x) == 1 else x.tolist(),
                   "stable": bool(self.stable[k]),
                   "valid_fraction": float(self.valid_fraction[k]),
                   "recovered_all": bool(self.recovered_all[k]),
                   "n_limits": int(self.n_limits[k])}


def _as_grid(x_grid) -> np.ndarray:
    g = np.asarray(x_grid, float)
    return g.reshape(-1, 1) if g.ndim == 1 else g


def verify_expressivity(fam: BranchFamily, x_grid, n_inits: int = 50, T: int = 200,
                        tol: float = 1e-6, operator: UpdateOperator | None = None,
                        valid_radius: float | None = None, init_range=(-5.0, 5.0),
                        y0_panel=None, seed: int = 0) -> ExpressivityReport:
    """Check convergence, branch recovery and input regularity on a grid of inputs.

    Every grid input gets ``n_inits`` uniform initializations. A limit counts
    as valid when it lies within ``valid_radius`` (default ``10 * tol``) of a
    branch value. Input regularity is judged from the empirical Lipschitz
    constant of ``x -> g(y0, x)`` on the grid and on a 10x refinement.
    """
    grid = _as_grid(x_grid)
    if n_inits < 2 * fam.n:
        raise ConfigError("n_inits must be at least twice the number of branches")
    op = operator or regularized_operator(fam)
    valid_radius = 10.0 * tol if valid_radius is None else valid_radius
    rng = np.random.default_rng(seed)
    m = fam.output_dim
    valid = np.zeros(len(grid))
    recovered = np.zeros(len(grid), bool)
    stable = np.zeros(len(grid), bool)
    n_limits = np.zeros(len(grid), int)
    for k, x in enumerate(grid):
        if not fam.in_domain(x):
            continue
        stable[k] = is_stable_input(fam, x)
        inits = rng.uniform(init_range[0], init_range[1], (n_inits, m))
        rep = dynamics.attractor_sweep(op, x, inits, T, tol, dedup_radius=valid_radius)
        vals = fam.values(x)
        finals = np.array(list(rep.finals.values())).reshape(-1, m)
        if len(finals):
            dist = np.linalg.norm(finals[:, None, :] - vals[None, :, :], axis=2)
            valid[k] = np.sum(dist.min(axis=1) <= valid_radius) / n_inits
            recovered[k] = bool(np.all(dist.min(axis=0) <= valid_radius))
        n_limits[k] = rep.n_limits
    if y0_panel is None:
        y0_panel = np.linspace(init_range[0], init_range[1], 5).reshape(-1, 1) * np.ones((1, m))
    lip_c, lip_f = _slice_lipschitz(fam, op, grid, np.atleast_2d(y0_panel))
    return ExpressivityReport(grid, valid, recovered, stable, n_limits, lip_c, lip_f,
                              float(np.mean(valid[stable])) if stable.any() else 1.0)


def _slice_lipschitz(fam, op, grid, y0_panel):
    if grid.shape[1] != 1:
        fine = grid
    else:
        g = grid[:, 0]
        fine = np.concatenate([np.linspace(a, b, 11)[:-1] for a, b in zip(g[:-1], g[1:])] + [g[-1:]])
        fine = fine.reshape(-1, 1)
    coarse_est, fine_est = 0.0, 0.0
    for y0 in y0_panel:
        f = lambda x, y0=y0: op.eval(y0, x)
        coarse_est = max(coarse_est, empirical_lipschitz(f, _domain_only(fam, grid)))
        fine_est = max(fine_est, empirical_lipschitz(f, _domain_only(fam, fine)))
    return coarse_est, fine_est


def _domain_only(fam, grid):
    keep = [fam.in_domain(x) for x in grid]
    return grid[np.asarray(keep)]


# --- manual selectors --------------------------------------------------------------------

def alternating_selector(fam: BranchFamily, n_int: int, partition: str = "uniform_x"):
    """Single-valued target switching branch on each of ``n_int`` intervals.

    Intervals are uniform in ``x`` or, for sign-symmetric domains excluding 0,
    uniform in ``log|x|``; the latter partition is shared by both signs, so
    ``x`` and ``-x`` always fall in intervals with the same index.
    Interval ``k`` (left to right in ``x``, or outward in ``|x|``) uses branch
    ``1 + k % 2``.
    """
    if n_int < 1:
        raise ConfigError("n_int must be >= 1")
    if fam.input_dim != 1:
        raise ConfigError("alternating selectors are defined for 1-D domains only")
    if fam.n < 2 and n_int > 1:
        raise ConfigError("alternating needs at least two branches")
    lo, hi = (float(v[0]) for v in fam.bounds)
    if partition == "uniform_x":
        edges = np.linspace(lo, hi, n_int + 1)

        def interval(x):
            return int(np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_int - 1))
    elif partition == "uniform_log_abs_x":
        pos = [b for b in fam.boxes if b[0][0] > 0]
        if not pos or lo >= 0 or fam.in_domain([0.0]):
            raise ConfigError("log|x| partition needs a sign-symmetric domain excluding 0")
        a = min(float(b[0][0]) for b in pos)
        b_ = max(float(b[1][0]) for b in pos)

        def interval(x):
            t = (math.log(abs(x)) - math.log(a)) / (math.log(b_) - math.log(a))
            return int(np.clip(math.floor(t * n_int), 0, n_int - 1))
    else:
        raise ConfigError(f"unknown partition {partition!r}")

    def u(x):
        x = float(np.atleast_1d(x)[0])
        k = interval(x)
        vals = fam.values([x])
        return vals[(k % 2) % fam.n]

    u.interval = interval
    return u


# --- registry ------------------------------------------------------------------------------

def double_well_roots(x: float, tol: float = 1e-13, max_iter: int = 100) -> tuple[float | None, float | None]:
    """Upper and lower stable roots of ``4y^3 - 4y + x = 0`` (``None`` where absent).

    Safeguarded Newton from +-1.2 inside the stable brackets ``[1/sqrt3, 2]``
    and ``[-2, -1/sqrt3]``.
    """
    p = lambda y: 4 * y ** 3 - 4 * y + x
    dp = lambda y: 12 * y ** 2 - 4
    upper = lower = None
    if p(INV_SQRT3) <= 0:
        upper = _rtsafe(p, dp, INV_SQRT3, 2.0, 1.2, tol, max_iter)
    if p(-INV_SQRT3) >= 0:
        lower = _rtsafe(p, dp, -2.0, -INV_SQRT3, -1.2, tol, max_iter)
    return upper, lower


def _rtsafe(p, dp, a, b, y, tol, max_iter):
    fa = p(a)
    if fa > 0:
        a, b = b, a
    # invariant: p(a) <= 0 <= p(b)
    y = min(max(y, min(a, b)), max(a, b))
    for _ in range(max_iter):
        fy = p(y)
        if fy == 0:
            return y
        if fy < 0:
            a = y
        else:
            b = y
        d = dp(y)
        y_new = y - fy / d if d != 0 else 0.5 * (a + b)
        if not (min(a, b) < y_new < max(a, b)):
            y_new = 0.5 * (a + b)
        if abs(y_new - y) <= tol * max(1.0, abs(y)):
            return y_new
        y = y_new
    return y


def _double_well_branch(which: int):
    def f(x):
        up, low = double_well_roots(float(x[0]))
        first, second = (up, low) if which == 0 else (low, up)
        return first if first is not None else second
    return f


def make_family(name: str, **params) -> BranchFamily:
    """Built-in branch families by name."""
    if name == "affine_pair":
        lo, hi = params.get("domain", (-2.0, 2.0))
        return BranchFamily([lambda x: x + 1.0, lambda x: x - 1.0], [(lo, hi)], name=name)
    if name == "algebraic":
        x_min = params.get("x_min", 0.1)
        x_max = params.get("x_max", 10.0)
        return BranchFamily([lambda x: 1.0 / np.abs(x), lambda x: -1.0 / np.abs(x)],
                            [(-x_max, -x_min), (x_min, x_max)],
                            excluded_hyperplanes=[([1.0], 0.0)], name=name)
    if name == "double_well":
        lo, hi = params.get("domain", (-2.5, 2.5))
        excl = [[FOLD], [-FOLD]] if params.get("exclude_folds", False) else []
        return BranchFamily([_double_well_branch(0), _double_well_branch(1)], [(lo, hi)],
                            excluded_points=excl, name=name)
    if name == "relu_pair":
        lo, hi = params.get("domain", (-1.0, 1.0))
        return BranchFamily([lambda x: np.zeros(1), lambda x: np.maximum(x, 0.0)], [(lo, hi)],
                            excluded_points=[[0.0]], name=name)
    if name == "sine":
        lo, hi = params.get("domain", (-3.0, 3.0))
        return BranchFamily([np.sin], [(lo, hi)], name=name)
    raise ConfigError(f"unknown branch family {name!r}; known: {sorted(FAMILIES)}")


FAMILIES = ("affine_pair", "algebraic", "double_well", "relu_pair", "sine")
