"""Grid estimators for Lipschitz constants and discontinuity sets, plus table helpers."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)


def _grid_points(grid) -> np.ndarray:
    g = np.asarray(grid, float)
    if g.ndim == 1:
        g = g.reshape(-1, 1)
    return g


def _adjacent_pairs(grid):
    """Index pairs of neighbouring points: consecutive for 1-D, 4-neighbour for 2-D meshes."""
    g = np.asarray(grid, float)
    if g.ndim == 3:  # (n1, n2, 2) mesh
        n1, n2, _ = g.shape
        idx = np.arange(n1 * n2).reshape(n1, n2)
        pairs = [(a, b) for a, b in zip(idx[:-1].ravel(), idx[1:].ravel())]
        pairs += [(a, b) for a, b in zip(idx[:, :-1].ravel(), idx[:, 1:].ravel())]
        return g.reshape(-1, 2), pairs
    pts = _grid_points(g)
    return pts, [(k, k + 1) for k in range(len(pts) - 1)]


def _evaluate(fn, pts):
    out = []
    for p in pts:
        try:
            v = np.atleast_1d(np.asarray(fn(p), float))
            out.append(v if np.all(np.isfinite(v)) else None)
        except Exception as exc:  # evaluation failures are reported, not fatal
            log.warning("evaluation failed at %s: %s", p, exc)
            out.append(None)
    return out


def empirical_lipschitz(fn: Callable, grid) -> float:
    """Largest difference quotient over adjacent grid points.

    ``grid`` is a 1-D array of points, an ``(N, d)`` array traversed in order,
    or an ``(n1, n2, 2)`` mesh. Points where ``fn`` fails are skipped.
    """
    pts, pairs = _adjacent_pairs(grid)
    if len(pts) < 2:
        raise InputError("need at least two grid points")
    vals = _evaluate(fn, pts)
    best = 0.0
    for a, b in pairs:
        if vals[a] is None or vals[b] is None:
            continue
        dx = float(np.linalg.norm(pts[a] - pts[b]))
        if dx > 0:
            best = max(best, float(np.linalg.norm(vals[a] - vals[b])) / dx)
    return best


@dataclass
class OscillationReport:
    edges: np.ndarray
    oscillation: np.ndarray
    threshold: float
    exceed_count: int
    measure: float

    def at(self, threshold: float) -> "OscillationReport":
        return _summarize(self.edges, self.oscillation, threshold)


def _summarize(edges, osc, threshold):
    if threshold <= 0:
        raise InputError("threshold must be positive")
    exceed = osc > threshold
    widths = np.diff(edges)
    return OscillationReport(edges, osc, threshold, int(exceed.sum()), float(widths[exceed].sum()))


def cell_oscillation(fn: Callable, edges, samples_per_cell: int = 2) -> np.ndarray:
    """Max pairwise output distance inside each 1-D cell.

    With the default of two samples per cell the samples are the cell's
    endpoints, so neighbouring cells share evaluations.
    """
    edges = np.asarray(edges, float)
    if samples_per_cell == 2:
        vals = _evaluate(fn, edges)
        osc = np.empty(len(edges) - 1)
        for k in range(len(edges) - 1):
            a, b = vals[k], vals[k + 1]
            osc[k] = np.nan if a is None or b is None else float(np.linalg.norm(a - b))
        return osc
    osc = np.empty(len(edges) - 1)
    for k in range(len(edges) - 1):
        pts = np.linspace(edges[k], edges[k + 1], samples_per_cell)
        vals = [v for v in _evaluate(fn, pts) if v is not None]
        V = np.array(vals)
        osc[k] = float(np.max(np.linalg.norm(V[:, None] - V[None, :], axis=2))) if len(V) else np.nan
    return osc


def oscillation_measure(fn: Callable, grid, threshold: float,
                        samples_per_cell: int = 2) -> OscillationReport:
    """Cells whose oscillation exceeds ``threshold`` and their total length.

    The total length of exceeding cells is an outer estimate of the measure of
    the discontinuity set; for a regular function it stays bounded in count as
    the grid is refined, for a selector with jumps it equals the jump count.
    """
    edges = np.asarray(grid, float).reshape(-1)
    osc = cell_oscillation(fn, edges, samples_per_cell)
    osc = np.where(np.isnan(osc), 0.0, osc)
    return _summarize(edges, osc, threshold)


def oscillation_from_values(edges, values, threshold: float | None = None,
                            median_factor: float = 5.0) -> OscillationReport:
    """Oscillation report for outputs already evaluated at the cell endpoints.

    Without ``threshold`` the threshold is ``median_factor`` times the median
    cell oscillation.
    """
    edges = np.asarray(edges, float).reshape(-1)
    v = np.asarray(values, float).reshape(len(edges), -1)
    osc = np.nan_to_num(np.linalg.norm(np.diff(v, axis=0), axis=1))
    if threshold is None:
        med = float(np.median(osc))
        threshold = median_factor * med if med > 0 else np.finfo(float).tiny
    return _summarize(edges, osc, threshold)


def median_relative_report(fn: Callable, grid, factor: float = 5.0) -> OscillationReport:
    """Oscillation report at ``factor`` times the median cell oscillation."""
    edges = np.asarray(grid, float).reshape(-1)
    vals = [np.full(1, np.nan) if v is None else v for v in _evaluate(fn, edges)]
    return oscillation_from_values(edges, np.vstack(vals), median_factor=factor)


def percentile_table(samples: Sequence[float], ps: Sequence[float]) -> dict[float, float]:
    """Nearest-rank percentiles: the ``ceil(p/100 * N)``-th smallest sample."""
    x = np.sort(np.asarray(samples, float).reshape(-1))
    if x.size == 0:
        raise InputError("percentile_table needs at least one sample")
    out = {}
    for p in ps:
        if not 0 <= p <= 100:
            raise InputError(f"percentile {p} outside [0, 100]")
        rank = max(1, math.ceil(p / 100.0 * x.size))
        out[p] = float(x[rank - 1])
    return out


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, float)
    return float(v.mean()), float(v.std())


def write_csv(path, rows: Sequence[dict], fieldnames: Sequence[str] | None = None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
