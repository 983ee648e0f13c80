"""Weight-tied rollouts: iterate an update map, detect convergence, collect limits."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import DivergenceError, InputError


@dataclass(frozen=True)
class UpdateOperator:
    """A deterministic map ``(state, input) -> state`` reused at every step.

    ``input_dim`` may be ``None`` for operators whose input is a structured
    object (a graph, a forcing field wrapper) rather than a flat vector.
    """

    fn: Callable[[np.ndarray, Any], np.ndarray]
    state_dim: int
    input_dim: int | None = None
    name: str = "operator"

    def eval(self, y, x):
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape[0] != self.state_dim:
            raise InputError(f"{self.name}: state has dim {y.shape[0]}, expected {self.state_dim}")
        if self.input_dim is not None:
            x = np.asarray(x, dtype=float).reshape(-1)
            if x.shape[0] != self.input_dim:
                raise InputError(f"{self.name}: input has dim {x.shape[0]}, expected {self.input_dim}")
        out = np.asarray(self.fn(y, x), dtype=float).reshape(-1)
        if out.shape[0] != self.state_dim:
            raise InputError(f"{self.name}: output has dim {out.shape[0]}, expected {self.state_dim}")
        return out

    __call__ = eval


@dataclass
class Trajectory:
    y0: np.ndarray
    iterates: list[np.ndarray]
    residuals: np.ndarray
    converged: bool
    steps_used: int
    tol: float

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]


@dataclass
class AttractorReport:
    input: Any
    limits: list[np.ndarray]
    init_assignments: dict[int, int]
    unconverged_count: int
    coverage: list[int] = field(default_factory=list)
    finals: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_limits(self) -> int:
        return len(self.limits)


def rollout(op: UpdateOperator, y0, x, T: int, tol: float = 1e-8,
            store_iterates: bool = True) -> Trajectory:
    """Iterate ``op`` from ``y0`` for at most ``T`` steps.

    Stops early once ``||y_{t+1} - y_t||_2 <= tol``. With
    ``store_iterates=False`` only the first and last states are kept.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    if tol < 0:
        raise InputError("tol must be nonnegative")
    y = np.asarray(y0, dtype=float).reshape(-1).copy()
    if not np.all(np.isfinite(y)):
        raise DivergenceError("non-finite initial state", step=0)
    start = y.copy()
    iterates = [start]
    residuals = []
    converged = False
    steps = T
    for t in range(T):
        y_next = op.eval(y, x)
        if not np.all(np.isfinite(y_next)):
            raise DivergenceError(f"non-finite state at step {t + 1}", step=t + 1)
        r = float(np.linalg.norm(y_next - y))
        residuals.append(r)
        y = y_next
        if store_iterates:
            iterates.append(y)
        if r <= tol:
            converged = True
            steps = t + 1
            break
    if not store_iterates:
        iterates.append(y)
    return Trajectory(start, iterates, np.asarray(residuals), converged, steps, tol)


def attractor_sweep(op: UpdateOperator, x, inits: Sequence, T: int, tol: float,
                    dedup_radius: float) -> AttractorReport:
    """Roll out every initialization and merge converged limits.

    Limits are merged greedily in initialization order: a final state joins the
    first existing limit within ``dedup_radius``, otherwise it opens a new one.
    Divergent trajectories are counted as unconverged.
    """
    if len(inits) == 0:
        raise InputError("inits must be nonempty")
    if dedup_radius <= 0:
        raise InputError("dedup_radius must be positive")
    finals: dict[int, np.ndarray] = {}
    unconverged = 0
    for k, y0 in enumerate(inits):
        try:
            traj = rollout(op, y0, x, T, tol, store_iterates=False)
        except DivergenceError:
            unconverged += 1
            continue
        if not traj.converged:
            unconverged += 1
            continue
        finals[k] = traj.final
    return merge_limits(x, finals, unconverged, dedup_radius)


def merge_limits(x, finals: dict[int, np.ndarray], unconverged: int,
                 dedup_radius: float) -> AttractorReport:
    """Greedy radius-merge of converged final states, in initialization order."""
    limits: list[np.ndarray] = []
    coverage: list[int] = []
    assign: dict[int, int] = {}
    for k in sorted(finals):
        y = np.asarray(finals[k], dtype=float).reshape(-1)
        for j, lim in enumerate(limits):
            if np.linalg.norm(y - lim) <= dedup_radius:
                assign[k] = j
                coverage[j] += 1
                break
        else:
            assign[k] = len(limits)
            limits.append(y)
            coverage.append(1)
    return AttractorReport(x, limits, assign, unconverged, coverage, dict(finals))

def fixed_point_residual(op: UpdateOperator, y, x) -> float:
    """Root-mean-square of ``op(y, x) - y`` over the state entries."""
    y = np.asarray(y, dtype=float).reshape(-1)
    out = op.eval(y, x)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite operator output", step=1)
    return float(np.sqrt(np.mean((out - y) ** 2)))


def identity_operator(dim: int = 1) -> UpdateOperator:
    return UpdateOperator(lambda y, x: y, dim, None, "identity")


def scaling_operator(factor: float, dim: int = 1) -> UpdateOperator:
    return UpdateOperator(lambda y, x: factor * y, dim, None, f"scale({factor})")
