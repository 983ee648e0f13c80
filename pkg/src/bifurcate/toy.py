"""One-dimensional two-branch experiments: datasets, nearest-label training,
manual-selector baselines and branch-recovery sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import branches
from .dynamics import AttractorReport, merge_limits
from .errors import ConfigError, DatasetError
from .metrics import OscillationReport, oscillation_from_values
from .nnet import (Objective, ResidualMLP, Stage, StageSchedule, TrainableOperator,
                   TrainResult, staged_train)

FAMILY_OF = {"toy1": "algebraic", "toy2": "double_well"}
PARTITION_OF = {"algebraic": "uniform_log_abs_x", "double_well": "uniform_x"}
LABEL_TOL = {"algebraic": 1e-12, "double_well": 1e-10}


@dataclass
class ToyDataset:
    """Scalar inputs with every valid output; ``labels`` is ``(N, 2)`` with NaN
    where a branch does not exist."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str
    family_name: str

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, float).reshape(-1)
        self.labels = np.asarray(self.labels, float).reshape(len(self.inputs), -1)

    def __len__(self):
        return len(self.inputs)

    def label_set(self, k: int) -> np.ndarray:
        row = self.labels[k]
        return row[~np.isnan(row)]

    def n_labels(self) -> np.ndarray:
        return np.sum(~np.isnan(self.labels), axis=1)

    def validate(self) -> None:
        """Re-check the defining relation of every label and the excluded set."""
        if self.family_name == "algebraic":
            if np.any(self.inputs == 0):
                raise DatasetError("algebraic dataset contains x=0")
            res = np.abs(np.abs(self.labels) * np.abs(self.inputs)[:, None] - 1.0)
        elif self.family_name == "double_well":
            y = self.labels
            res = np.abs(4 * y ** 3 - 4 * y + self.inputs[:, None])
        else:
            raise DatasetError(f"unknown family {self.family_name!r}")
        bad = np.nanmax(res, axis=1) > LABEL_TOL[self.family_name] * np.maximum(1, np.nanmax(np.abs(self.labels), axis=1))
        if np.any(bad):
            k = int(np.argmax(bad))
            raise DatasetError(f"label check failed at x={self.inputs[k]!r}")
        if np.any(self.n_labels() == 0):
            raise DatasetError("an input has no valid label")


def geometric_grid(ratio: float, lo: float, hi: float, offset: float = 0.0) -> np.ndarray:
    """Points ``ratio**(s + offset)`` inside ``[lo, hi]`` for integer ``s``."""
    lr = math.log(ratio)
    s_lo = math.ceil(math.log(lo) / lr - offset - 1e-12)
    s_hi = math.floor(math.log(hi) / lr - offset + 1e-12)
    return ratio ** (np.arange(s_lo, s_hi + 1) + offset)


def make_toy1(delta: float = 0.1, x_max: float = 10.0, y_max: float = 10.0,
              split: str = "train", density: int = 4) -> ToyDataset:
    """Algebraic pair ``+-1/|x|`` on sign-symmetric geometric grids.

    Train uses ratio ``1+delta``; validation ratio ``1+2*delta`` shifted by half
    a step; test uses ``density`` times the training density, shifted so no
    point coincides with a training point.
    """
    if delta <= 0:
        raise ConfigError("delta must be positive")
    lo = 1.0 / y_max
    if split == "train":
        pos = geometric_grid(1 + delta, lo, x_max)
    elif split == "val":
        pos = geometric_grid(1 + 2 * delta, lo, x_max, offset=0.5)
    elif split == "test":
        pos = geometric_grid((1 + delta) ** (1.0 / density), lo, x_max, offset=0.5)
    else:
        raise ConfigError(f"unknown split {split!r}")
    x = np.concatenate([-pos[::-1], pos])
    lab = np.stack([1.0 / np.abs(x), -1.0 / np.abs(x)], axis=1)
    ds = ToyDataset(x, lab, split, "algebraic")
    ds.validate()
    return ds


def double_well_labels(x: np.ndarray) -> np.ndarray:
    out = np.full((len(x), 2), np.nan)
    for k, xv in enumerate(x):
        up, low = branches.double_well_roots(float(xv))
        for j, r in enumerate((up, low)):
            if r is None:
                continue
            if abs(4 * r ** 3 - 4 * r + xv) > 1e-10:
                raise DatasetError(f"root solve did not converge at x={xv!r}")
            out[k, j] = r
    return out


def make_toy2(n_train: int = 500, n_val: int = 128, range_: tuple[float, float] = (-2.5, 2.5),
              split: str = "train", seed: int = 0, density: int = 4) -> ToyDataset:
    """Stable outer roots of the double-well cubic.

    Train and validation inputs are uniform random (independent streams);
    the test set is a midpoint grid with ``density * n_train`` points.
    """
    lo, hi = range_
    ss = np.random.SeedSequence(seed)
    s_train, s_val = ss.spawn(2)
    if split == "train":
        x = np.sort(np.random.default_rng(s_train).uniform(lo, hi, n_train))
    elif split == "val":
        x = np.sort(np.random.default_rng(s_val).uniform(lo, hi, n_val))
    elif split == "test":
        n = density * n_train
        x = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    else:
        raise ConfigError(f"unknown split {split!r}")
    ds = ToyDataset(x, double_well_labels(x), split, "double_well")
    ds.validate()
    return ds


def make_toy(name: str, split: str, **kw) -> ToyDataset:
    if name in ("toy1", "algebraic"):
        return make_toy1(split=split, **kw)
    if name in ("toy2", "double_well"):
        return make_toy2(split=split, **kw)
    raise ConfigError(f"unknown toy example {name!r}")


def nearest_labels(labels: np.ndarray, y0: np.ndarray) -> np.ndarray:
    """For each row ``k`` and init ``y0[k, m]`` the closest non-NaN label.

    Ties go to the first column.
    """
    d = np.abs(y0[:, :, None] - labels[:, None, :])
    d = np.where(np.isnan(d), np.inf, d)
    idx = np.argmin(d, axis=2)
    return np.take_along_axis(labels[:, None, :].repeat(y0.shape[1], 1), idx[:, :, None], 2)[:, :, 0]


def manual_targets(ds: ToyDataset, n_int: int, partition: str | None = None) -> np.ndarray:
    fam = branches.make_family(ds.family_name)
    u = branches.alternating_selector(fam, n_int, partition or PARTITION_OF[ds.family_name])
    return np.array([float(u([x])[0]) for x in ds.inputs])


# --- objectives -------------------------------------------------------------------------

@dataclass
class ToyBatch:
    y0: torch.Tensor
    ctx: torch.Tensor
    target: torch.Tensor


def _mse(final, batch, stage):
    return torch.mean((final - batch.target) ** 2)


class _ToyObjective(Objective):
    def __init__(self, M: int, init_range: tuple[float, float], batch_size: int, val_inits: int, seed: int,
                 dtype=torch.float64):
        if M < 1:
            raise ConfigError("M must be >= 1")
        self.M, self.init_range, self.batch_size = M, init_range, batch_size
        self.val_inits, self.dtype = val_inits, dtype
        self._val_rng_seed = seed

    def targets(self, ds: ToyDataset, idx: np.ndarray, y0: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def make_batch(self, ds, idx, y0) -> ToyBatch:
        t = lambda a: torch.as_tensor(a.reshape(-1, 1), dtype=self.dtype)
        x = np.repeat(ds.inputs[idx][:, None], y0.shape[1], axis=1)
        return ToyBatch(t(y0), t(x), t(self.targets(ds, idx, y0)))

    def batches(self, ds, rng, stage):
        order = rng.permutation(len(ds))
        for a in range(0, len(ds), self.batch_size):
            idx = order[a:a + self.batch_size]
            y0 = rng.uniform(*self.init_range, (len(idx), self.M))
            yield self.make_batch(ds, idx, y0)

    def loss(self, final, batch, stage):
        return _mse(final, batch, stage)

    def eval_batch(self, ds, n_inits: int, seed: int) -> ToyBatch:
        rng = np.random.default_rng(seed)
        y0 = rng.uniform(*self.init_range, (len(ds), n_inits))
        return self.make_batch(ds, np.arange(len(ds)), y0)

    def validate(self, model, val_set, T, stage):
        if not hasattr(self, "_val_cache") or self._val_cache[0] is not val_set:
            self._val_cache = (val_set, self.eval_batch(val_set, self.val_inits, self._val_rng_seed))
        b = self._val_cache[1]
        with torch.no_grad():
            fin, _ = model.unroll(b.y0, b.ctx, T)
        return self.val_metric(fin, b, val_set)

    def val_metric(self, fin, b, ds) -> float:
        return float(torch.mean((fin - b.target) ** 2))


class NearestLabelObjective(_ToyObjective):
    """Each initialization is supervised by the label closest to it."""

    def targets(self, ds, idx, y0):
        return nearest_labels(ds.labels[idx], y0)

    def val_metric(self, fin, b, ds):
        # squared distance to the nearest valid branch, whichever it is
        n_inits = fin.shape[0] // len(ds)
        f = fin.detach().double().numpy().reshape(len(ds), n_inits)
        d = np.abs(f[:, :, None] - ds.labels[:, None, :])
        return float(np.mean(np.nanmin(d, axis=2) ** 2))


class ManualObjective(_ToyObjective):
    """Every initialization is supervised by one prescribed single-valued target."""

    def __init__(self, target_of: dict[int, np.ndarray], *args, **kw):
        super().__init__(*args, **kw)
        self.target_of = target_of

    def targets(self, ds, idx, y0):
        u = self.target_of[id(ds)]
        return np.repeat(u[idx][:, None], y0.shape[1], axis=1)


# --- fitting ----------------------------------------------------------------------------

DEFAULT_MODEL = {"width": 256, "activation": "tanh"}


def desk_schedule(epochs: int = 500, unroll: int = 10, lr: float = 1e-3,
                  decay: str | None = "cosine") -> StageSchedule:
    extra = {"lr_decay": decay} if decay else {}
    return StageSchedule((Stage(0, unroll, lr, extra),), epochs)


def paper_schedule() -> StageSchedule:
    return StageSchedule.equal_stages([10, 20, 30], 1e-4, 5000)


@dataclass
class FitResult:
    model: TrainableOperator
    train: TrainResult
    test_error: float
    train_error: float
    kind: str
    n_int: int | None = None
    extra: dict = field(default_factory=dict)


def new_model(seed: int = 0, width: int = 256, activation: str = "tanh", dtype=torch.float64) -> ResidualMLP:
    return ResidualMLP(1, 1, width, activation, np.random.default_rng(seed), dtype)


def _error(model, obj: _ToyObjective, ds, T, n_inits, seed, metric: str = "target") -> float:
    b = obj.eval_batch(ds, n_inits, seed)
    with torch.no_grad():
        fin, _ = model.unroll(b.y0, b.ctx, T)
    if metric == "set":
        return obj.val_metric(fin, b, ds)
    return float(torch.mean((fin - b.target) ** 2))


def algorithm1_fit(train: ToyDataset, val: ToyDataset, test: ToyDataset | None = None,
                   model: TrainableOperator | None = None, schedule: StageSchedule | None = None,
                   M: int = 10, init_range=(-5.0, 5.0), batch_size: int = 32, seed: int = 0,
                   test_inits: int = 10, clip_norm: float | None = 1.0, **train_kw) -> FitResult:
    """Train with every sampled initialization pulled toward its nearest label.

    Reported errors are those of the induced selector: the mean squared
    distance from each terminal state to the closest valid branch, rolled out
    for the last stage's unroll. The error against the label nearest to each
    initialization is kept in ``extra["nearest_label_error"]``.
    """
    schedule = schedule or desk_schedule()
    ss = np.random.SeedSequence(seed)
    s_model, s_train, s_val, s_test = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    model = model or new_model(s_model)
    obj = NearestLabelObjective(M, init_range, batch_size, M, s_val, model.params.dtype)
    res = staged_train(model, obj, train, schedule, val, s_train, clip_norm=clip_norm, **train_kw)
    model.params.load(res.params.numpy())
    T = schedule.stages[-1].unroll
    test = test or val
    return FitResult(model, res, _error(model, obj, test, T, test_inits, s_test, "set"),
                     _error(model, obj, train, T, M, s_test, "set"), "bifurcation",
                     extra={"nearest_label_error": _error(model, obj, test, T, test_inits, s_test)})


def manual_fit(train: ToyDataset, n_int: int, val: ToyDataset, test: ToyDataset | None = None,
               model: TrainableOperator | None = None, schedule: StageSchedule | None = None,
               M: int = 10, init_range=(-5.0, 5.0), batch_size: int = 32, seed: int = 0,
               partition: str | None = None, test_inits: int = 10, clip_norm: float | None = 1.0,
               **train_kw) -> FitResult:
    """Same network and schedule, supervised by an interval-alternating selector."""
    schedule = schedule or desk_schedule()
    test = test or val
    targets = {id(d): manual_targets(d, n_int, partition) for d in {id(train): train, id(val): val, id(test): test}.values()}
    ss = np.random.SeedSequence(seed)
    s_model, s_train, s_val, s_test = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    model = model or new_model(s_model)
    obj = ManualObjective(targets, M, init_range, batch_size, M, s_val, model.params.dtype)
    res = staged_train(model, obj, train, schedule, val, s_train, clip_norm=clip_norm, **train_kw)
    model.params.load(res.params.numpy())
    T = schedule.stages[-1].unroll
    return FitResult(model, res, _error(model, obj, test, T, test_inits, s_test),
                     _error(model, obj, train, T, M, s_test), "manual", n_int)


# --- evaluation -------------------------------------------------------------------------

def batched_rollout(model: TrainableOperator, x: np.ndarray, y0: np.ndarray, T: int,
                    keep: Sequence[int] = ()) -> tuple[np.ndarray, np.ndarray, dict]:
    """Roll out every ``(x[k], y0[k, m])`` pair; returns finals, last residuals, snapshots."""
    dt = model.params.dtype
    n, m = y0.shape
    ys = torch.as_tensor(y0.reshape(-1, 1), dtype=dt)
    xs = torch.as_tensor(np.repeat(x[:, None], m, 1).reshape(-1, 1), dtype=dt)
    with torch.no_grad():
        prev, snaps = model.unroll(ys, xs, T - 1, keep=[t for t in keep if t <= T - 1])
        last = model.step(prev, xs)
    if T in keep:
        snaps[T] = last.clone()
    fin = last.double().numpy().reshape(n, m)
    res = np.abs((last - prev).double().numpy()).reshape(n, m)
    return fin, res, {t: v.double().numpy().reshape(n, m) for t, v in snaps.items()}


@dataclass
class RecoveryReport:
    inputs: np.ndarray
    valid_fraction: np.ndarray
    recovered_all: np.ndarray
    n_recovered: np.ndarray
    reports: list[AttractorReport]
    snapshots: dict[int, np.ndarray]
    inits: np.ndarray

    def snapshot_rows(self):
        for t in sorted(self.snapshots):
            for k, x in enumerate(self.inputs):
                for m in range(self.inits.shape[1]):
                    yield {"x": float(x), "init_index": m, "t": t, "y": float(self.snapshots[t][k, m])}


def branch_recovery_eval(model: TrainableOperator, ds: ToyDataset, n_inits: int = 20, T: int = 50,
                         tol: float = 1e-3, valid_radius: float = 0.05, init_range=(-5.0, 5.0),
                         seed: int = 0, snapshot_times: Sequence[int] = (0, 1, 2, 4, 8)) -> RecoveryReport:
    """Attractor sweep per test input with the learned operator.

    A trajectory counts as converged when its last step moved by at most
    ``tol``; a limit is valid within ``valid_radius`` of some label.
    """
    rng = np.random.default_rng(seed)
    y0 = rng.uniform(*init_range, (len(ds), n_inits))
    fin, res, snaps = batched_rollout(model, ds.inputs, y0, T, keep=snapshot_times)
    valid = np.zeros(len(ds))
    rec = np.zeros(len(ds), bool)
    nrec = np.zeros(len(ds), int)
    reports = []
    for k in range(len(ds)):
        conv = np.flatnonzero(res[k] <= tol)
        finals = {int(m): fin[k, m:m + 1] for m in conv}
        reports.append(merge_limits(np.array([ds.inputs[k]]), finals, n_inits - len(conv), valid_radius))
        lab = ds.label_set(k)
        d = np.abs(fin[k][:, None] - lab[None, :])
        ok = np.zeros(n_inits, bool)
        ok[conv] = d[conv].min(axis=1) <= valid_radius
        valid[k] = ok.mean()
        hit = np.array([np.any(ok & (d[:, j] <= valid_radius)) for j in range(len(lab))])
        nrec[k] = int(hit.sum())
        rec[k] = bool(hit.all())
    return RecoveryReport(ds.inputs, valid, rec, nrec, reports, snaps, y0)


def induced_selector_values(model: TrainableOperator, y0: float, xs: np.ndarray, T: int) -> np.ndarray:
    """``x -> y_T(y0, x)`` for a fixed initialization, evaluated in one batch."""
    fin, _, _ = batched_rollout(model, np.asarray(xs, float), np.full((len(xs), 1), float(y0)), T)
    return fin[:, 0]


def reciprocal_grid(n_per_side: int, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    """Sign-symmetric grid uniform in ``1/|x|`` on ``[lo, hi]``.

    On this grid each cell of ``+-1/|x|`` changes by the same amount, so a
    median-relative threshold separates genuine jumps from smooth variation.
    """
    v = np.linspace(1.0 / hi, 1.0 / lo, n_per_side)
    pos = np.sort(1.0 / v)
    return np.concatenate([-pos[::-1], pos])


def selector_oscillation(values: np.ndarray, grid: np.ndarray, median_factor: float = 5.0) -> OscillationReport:
    return oscillation_from_values(grid, values, median_factor=median_factor)


# --- persistence ------------------------------------------------------------------------

TOY_CSV_HEADER = ["x", "label1", "label2", "split"]


def save_toy_csv(path, datasets: Sequence[ToyDataset]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TOY_CSV_HEADER + ["family"])
        for ds in datasets:
            for x, lab in zip(ds.inputs, ds.labels):
                w.writerow([repr(float(x))] + ["" if np.isnan(v) else repr(float(v)) for v in lab]
                           + [ds.split, ds.family_name])


def load_toy_csv(path) -> dict[str, ToyDataset]:
    """Read datasets back, keyed by split; labels are re-verified."""
    rows: dict[str, list] = {}
    fam = None
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        missing = set(TOY_CSV_HEADER) - set(r.fieldnames or [])
        if missing:
            raise DatasetError(f"{path}: missing columns {sorted(missing)}")
        for row in r:
            fam = row.get("family") or fam
            lab = [float(row[c]) if row[c] != "" else np.nan for c in ("label1", "label2")]
            rows.setdefault(row["split"], []).append([float(row["x"])] + lab)
    out = {}
    for split, data in rows.items():
        a = np.asarray(data)
        ds = ToyDataset(a[:, 0], a[:, 1:], split, fam)
        ds.validate()
        out[split] = ds
    return out
