"""Periodic Allen-Cahn steady states on (0, 2pi)^2: random forcings, a spectral
semi-implicit solver, a learned spectral update, diversity-regularized
training, solution clustering and a learned-then-classical hybrid solver."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from .errors import CalibrationError, ConfigError, DatasetError, InputError, StabilityError
from .nnet import (Objective, ParamStore, Stage, StageSchedule, TrainableOperator, TrainResult,
                   dense_forward, staged_train)

EPS = 0.01
STEP_SIZE = 0.2


# --- fields ------------------------------------------------------------------------------

def wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer wavenumber grids ``(k1, k2)`` for the full FFT of an ``n x n`` field."""
    k = np.fft.fftfreq(n, d=1.0 / n)
    return np.meshgrid(k, k, indexing="ij")


class Field2D:
    """Periodic scalar field on an ``n x n`` grid over ``(0, 2pi)^2``."""

    def __init__(self, values):
        v = np.asarray(values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise InputError(f"field must be square, got shape {v.shape}")
        self.values = v
        self._spec = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def spectrum(self) -> np.ndarray:
        if self._spec is None:
            self._spec = np.fft.fft2(self.values)
        return self._spec

    @classmethod
    def from_spectrum(cls, spec) -> "Field2D":
        f = cls(np.real(np.fft.ifft2(spec)))
        f._spec = np.asarray(spec)
        return f

    @classmethod
    def constant(cls, n: int, c: float) -> "Field2D":
        return cls(np.full((n, n), float(c)))

    @classmethod
    def from_function(cls, n: int, fn) -> "Field2D":
        x = 2 * np.pi * np.arange(n) / n
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        return cls(fn(X1, X2))

    def value(self, i: int, j: int) -> float:
        return float(self.values[i % self.n, j % self.n])

    def laplacian(self) -> np.ndarray:
        k1, k2 = wavenumbers(self.n)
        return np.real(np.fft.ifft2(-(k1 ** 2 + k2 ** 2) * self.spectrum))

    def gradient(self) -> tuple[np.ndarray, np.ndarray]:
        k1, k2 = wavenumbers(self.n)
        s = self.spectrum
        return np.real(np.fft.ifft2(1j * k1 * s)), np.real(np.fft.ifft2(1j * k2 * s))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _vals(u) -> np.ndarray:
    return u.values if isinstance(u, Field2D) else np.asarray(u, dtype=float)


# --- random forcings ---------------------------------------------------------------------

@dataclass(frozen=True)
class GrfSpec:
    alpha: float
    ell: float
    amplitude: float
    mean: float = 0.0


INIT_SPEC = GrfSpec(alpha=3.0, ell=8.0, amplitude=0.5, mean=0.0)
FORCING_RANGES = {"alpha": (1.4, 2.8), "ell": (8.0, 14.0), "amplitude": (0.08, 0.20), "mean": (-0.03, 0.03)}


def grf_sample(n: int, spec: GrfSpec, rng: np.random.Generator, max_tries: int = 8) -> Field2D:
    """Periodic Gaussian random field with filter ``exp(-|k|^2/(2 ell^2)) (1+|k|^2)^(-alpha/2)``,
    normalized to mean ``spec.mean`` and standard deviation ``spec.amplitude``."""
    if n < 8 or n % 2:
        raise ConfigError("grid size must be even and >= 8")
    k1, k2 = wavenumbers(n)
    k2sum = k1 ** 2 + k2 ** 2
    filt = np.exp(-k2sum / (2 * spec.ell ** 2)) * (1 + k2sum) ** (-spec.alpha / 2)
    for _ in range(max_tries):
        # the transform of real white noise is conjugate-symmetric by construction
        noise = np.fft.fft2(rng.standard_normal((n, n)))
        noise[0, 0] = 0.0
        z = np.fft.ifft2(noise * filt)
        if np.max(np.abs(z.imag)) > 1e-12 * max(np.max(np.abs(z.real)), 1.0):
            raise StabilityError("GRF sample is not real; conjugate symmetry lost")
        u = z.real - z.real.mean()
        sd = u.std()
        if sd >= 1e-14:
            return Field2D(spec.amplitude * u / sd + spec.mean)
    raise DatasetError("GRF sample kept degenerating")


def sample_forcing_spec(rng: np.random.Generator) -> GrfSpec:
    return GrfSpec(*(float(rng.uniform(*FORCING_RANGES[k])) for k in ("alpha", "ell", "amplitude", "mean")))


def spectral_centroid(u) -> float:
    """Amplitude-weighted mean ``|k|`` of a field's spectrum."""
    v = _vals(u)
    k1, k2 = wavenumbers(v.shape[0])
    a = np.abs(np.fft.fft2(v))
    return float(np.sum(np.sqrt(k1 ** 2 + k2 ** 2) * a) / np.sum(a))


# --- energy and residual -----------------------------------------------------------------

def _check_pair(u, f):
    u, f = _vals(u), _vals(f)
    if u.shape != f.shape:
        raise InputError(f"grid mismatch: {u.shape} vs {f.shape}")
    return u, f


def ac_energy(u, f, eps: float = EPS, gradient: str = "spectral") -> float:
    """Domain-averaged ``eps^2/2 |grad u|^2 + (u^2-1)^2/4 - f u``.

    ``gradient='fd'`` uses periodic forward differences instead of the spectral
    derivative.
    """
    u, f = _check_pair(u, f)
    if eps <= 0:
        raise InputError("eps must be positive")
    if gradient == "spectral":
        # Parseval with |k|^2 keeps the Nyquist mode, matching the spectral Laplacian,
        # so the residual is exactly the first variation of this energy
        k1, k2 = wavenumbers(u.shape[0])
        grad_sq = float(np.sum((k1 ** 2 + k2 ** 2) * np.abs(np.fft.fft2(u)) ** 2)) / u.size ** 2
    elif gradient == "fd":
        h = 2 * np.pi / u.shape[0]
        grad_sq = float(np.mean(((np.roll(u, -1, 0) - u) / h) ** 2 + ((np.roll(u, -1, 1) - u) / h) ** 2))
    else:
        raise ConfigError(f"unknown gradient mode {gradient!r}")
    return 0.5 * eps ** 2 * grad_sq + float(np.mean(0.25 * (u ** 2 - 1) ** 2 - f * u))


def residual_field(u, f, eps: float = EPS) -> np.ndarray:
    u, f = _check_pair(u, f)
    return -eps ** 2 * Field2D(u).laplacian() + u ** 3 - u - f


def residual_mse(u, f, eps: float = EPS) -> float:
    """Mean squared steady-state residual ``-eps^2 lap u + u^3 - u - f``."""
    return float(np.mean(residual_field(u, f, eps) ** 2))


# --- classical solver --------------------------------------------------------------------

@dataclass
class ImexResult:
    u: Field2D
    steps: int
    residuals: np.ndarray
    converged: bool
    energies: np.ndarray | None = None


def imex_solve(f, u0, eps: float = EPS, tau: float = 0.1, tol: float = 1e-5, max_steps: int = 5000,
               record_energy: bool = False) -> ImexResult:
    """Semi-implicit steps ``u_hat <- (u_hat - tau FFT(u^3 - u - f)) / (1 + tau eps^2 |k|^2)``
    until the RMS update is at most ``tol``."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    u, fv = _check_pair(u0, f)
    u = u.copy()
    n = u.shape[0]
    k1, k2 = wavenumbers(n)
    denom = 1 + tau * eps ** 2 * (k1 ** 2 + k2 ** 2)
    res, en = [], []
    converged = False
    steps = 0
    for steps in range(1, max_steps + 1):
        new = np.real(np.fft.ifft2((np.fft.fft2(u) - tau * np.fft.fft2(u ** 3 - u - fv)) / denom))
        if not np.all(np.isfinite(new)):
            raise StabilityError(f"IMEX produced non-finite values at step {steps}; try a smaller tau", step=steps)
        upd = float(np.sqrt(np.mean((new - u) ** 2)))
        u = new
        res.append(residual_mse(u, fv, eps))
        if record_energy:
            en.append(ac_energy(u, fv, eps))
        if upd <= tol:
            converged = True
            break
    return ImexResult(Field2D(u), steps, np.asarray(res), converged, np.asarray(en) if record_energy else None)


def diversity(states) -> float:
    """Mean pairwise ``(1/n^2) ||u_i - u_j||^2`` over ordered pairs ``i != j``."""
    X = np.stack([_vals(s).ravel() for s in states])
    if len(X) < 2:
        raise InputError("diversity needs at least two states")
    d = pdist(X, "sqeuclidean") / X.shape[1]
    return float(2 * d.sum() / (len(X) * (len(X) - 1)))


# --- torch counterparts ------------------------------------------------------------------

class SpectralOps:
    """Cached wavenumber tensors for batched ``(..., n, n)`` fields."""

    def __init__(self, n: int, dtype=torch.float64):
        k1, k2 = wavenumbers(n)
        self.n = n
        self.k1 = torch.as_tensor(k1, dtype=dtype)
        self.k2 = torch.as_tensor(k2, dtype=dtype)
        self.ksq = self.k1 ** 2 + self.k2 ** 2

    def laplacian(self, u):
        return torch.fft.ifft2(-self.ksq * torch.fft.fft2(u)).real

    def mean_grad_sq(self, u):
        """Domain mean of ``|grad u|^2`` by Parseval, Nyquist mode included."""
        s = torch.fft.fft2(u)
        return (self.ksq * (s.real ** 2 + s.imag ** 2)).sum(dim=(-2, -1)) / self.n ** 4

    def energy(self, u, f, eps=EPS):
        """Per-field energy, shape ``u.shape[:-2]``."""
        dens = 0.25 * (u ** 2 - 1) ** 2 - f * u
        return 0.5 * eps ** 2 * self.mean_grad_sq(u) + dens.mean(dim=(-2, -1))

    def residual_mse(self, u, f, eps=EPS):
        r = -eps ** 2 * self.laplacian(u) + u ** 3 - u - f
        return (r ** 2).mean(dim=(-2, -1))


def diversity_torch(states: torch.Tensor) -> torch.Tensor:
    """Diversity of ``M`` states along axis 1 for every leading batch entry.

    Uses ``sum_{i != j} |u_i - u_j|^2 = 2M sum_i |u_i - mean|^2``.
    """
    M = states.shape[1]
    c = states - states.mean(dim=1, keepdim=True)
    return 2.0 / (M - 1) * (c ** 2).mean(dim=(-2, -1)).sum(dim=1)


# --- learned operator --------------------------------------------------------------------

class SpectralNet(TrainableOperator):
    """``u + eta * project(gelu(spectral(lift u) + pointwise(lift u) + inject f)))``.

    The spectral path keeps wavenumbers ``|k1| < modes`` and ``0 <= k2 < modes``
    of the real FFT; ``irfft2`` makes the result real for any weights.
    """

    def __init__(self, n: int, width: int = 8, modes: int = 8, eta: float = STEP_SIZE,
                 rng: np.random.Generator | None = None, dtype=torch.float64, zero_projection: bool = True):
        if 2 * modes > n:
            raise ConfigError("modes must be at most n/2")
        self.n, self.width, self.modes, self.eta = n, width, modes, eta
        w, m = width, modes
        spec_scale = 1.0 / (w * w)
        # a zero projection makes the untrained update the identity, which stays
        # bounded at any rollout length
        scales = {k: spec_scale for k in ("spec_lo.re", "spec_lo.im", "spec_hi.re", "spec_hi.im")}
        if zero_projection:
            scales.update({"proj.weight": 0.0, "proj.bias": 0.0})
        self.params = ParamStore.build({
            "lift.weight": (w, 1), "lift.bias": (w,),
            "spec_lo.re": (w, w, m, m), "spec_lo.im": (w, w, m, m),
            "spec_hi.re": (w, w, m, m), "spec_hi.im": (w, w, m, m),
            "mix.weight": (w, w), "mix.bias": (w,),
            "force.weight": (w, 1), "force.bias": (w,),
            "proj.weight": (1, w), "proj.bias": (1,),
        }, rng if rng is not None else np.random.default_rng(0), dtype,
            scales=scales)

    def _spectral(self, v):
        # v: (B, w, n, n)
        p, m = self.params, self.modes
        vh = torch.fft.rfft2(v)
        out = torch.zeros(v.shape[0], self.width, self.n, self.n // 2 + 1, dtype=vh.dtype)
        lo = torch.complex(p["spec_lo.re"], p["spec_lo.im"])
        hi = torch.complex(p["spec_hi.re"], p["spec_hi.im"])
        out[:, :, :m, :m] = torch.einsum("bixy,ioxy->boxy", vh[:, :, :m, :m], lo)
        out[:, :, -m:, :m] = torch.einsum("bixy,ioxy->boxy", vh[:, :, -m:, :m], hi)
        return torch.fft.irfft2(out, s=(self.n, self.n))

    def phi(self, u, f):
        B = u.shape[0]
        to_ch = lambda t: t.permute(0, 3, 1, 2)
        v = dense_forward(self.params, "lift", u.reshape(B, self.n, self.n, 1))
        z = (to_ch(dense_forward(self.params, "mix", v)) + self._spectral(to_ch(v))
             + to_ch(dense_forward(self.params, "force", f.reshape(B, self.n, self.n, 1))))
        out = dense_forward(self.params, "proj", F.gelu(z).permute(0, 2, 3, 1))
        return out[..., 0]

    def step(self, u, f):
        if u.shape[-2:] != (self.n, self.n) or f.shape != u.shape:
            raise InputError(f"expected fields of shape (B, {self.n}, {self.n}), got {tuple(u.shape)} / {tuple(f.shape)}")
        return u + self.eta * self.phi(u, f)

    def config(self):
        return {"kind": "spectral_net", "n": self.n, "width": self.width, "modes": self.modes, "eta": self.eta}


def model_step_numpy(model: SpectralNet, u, f) -> np.ndarray:
    with torch.no_grad():
        ut = torch.as_tensor(_vals(u)[None], dtype=model.params.dtype)
        ft = torch.as_tensor(_vals(f)[None], dtype=model.params.dtype)
        return model.step(ut, ft)[0].double().numpy()


def learned_operator(model: SpectralNet):
    """Wrap the learned update as a flat-vector :class:`UpdateOperator` (input = forcing field)."""
    from .dynamics import UpdateOperator
    n = model.n
    return UpdateOperator(lambda y, f: model_step_numpy(model, y.reshape(n, n), f).ravel(),
                          n * n, None, "spectral_net")


# --- datasets ----------------------------------------------------------------------------

@dataclass
class AcInstance:
    forcing: np.ndarray
    spec: GrfSpec
    label: np.ndarray | None = None
    label_steps: int = 0


def gen_dataset(n_instances: int, n: int, rng: np.random.Generator) -> list[AcInstance]:
    out = []
    for _ in range(n_instances):
        spec = sample_forcing_spec(rng)
        out.append(AcInstance(grf_sample(n, spec, rng).values, spec))
    return out


def attach_imex_labels(dataset: Sequence[AcInstance], rng: np.random.Generator, eps: float = EPS,
                       tau: float = 0.1, tol: float = 1e-5, max_steps: int = 20000) -> list[ImexResult]:
    """Label every forcing with the IMEX steady state reached from one random initial field."""
    results = []
    for inst in dataset:
        u0 = grf_sample(inst.forcing.shape[0], INIT_SPEC, rng)
        r = imex_solve(inst.forcing, u0, eps, tau, tol, max_steps)
        if not r.converged:
            raise DatasetError(f"IMEX did not reach tol {tol} within {max_steps} steps")
        inst.label, inst.label_steps = r.u.values, r.steps
        results.append(r)
    return results


# --- training ----------------------------------------------------------------------------

@dataclass
class AcBatch:
    y0: torch.Tensor           # (B*M, n, n)
    ctx: torch.Tensor          # forcing repeated, (B*M, n, n)
    B: int
    M: int
    labels: torch.Tensor | None = None


class AcObjective(Objective):
    """``imex_label``: MSE to the stored label. ``energy``: mean energy.
    ``diversity``: mean energy minus ``stage.extra['lambda']`` times the mean
    per-forcing diversity of the ``M`` terminal states."""

    def __init__(self, n: int, objective: str = "energy", M: int = 8, batch_size: int = 16,
                 val_inits: int = 16, seed: int = 0, eps: float = EPS, dtype=torch.float64):
        if objective not in ("energy", "diversity", "imex_label"):
            raise ConfigError(f"unknown objective {objective!r}")
        self.n, self.objective, self.M, self.batch_size = n, objective, M, batch_size
        self.val_inits, self.seed, self.eps, self.dtype = val_inits, seed, eps, dtype
        self.ops = SpectralOps(n, dtype)
        self._val = None

    def make_batch(self, insts, rng, M, with_labels: bool = True) -> AcBatch:
        f = np.stack([i.forcing for i in insts])
        u0 = np.stack([grf_sample(self.n, INIT_SPEC, rng).values for _ in range(len(insts) * M)])
        t = lambda a: torch.as_tensor(a, dtype=self.dtype)
        labels = None
        if self.objective == "imex_label" and with_labels:
            if any(i.label is None for i in insts):
                raise DatasetError("imex_label objective needs labels; run attach_imex_labels first")
            labels = t(np.repeat(np.stack([i.label for i in insts]), M, axis=0))
        return AcBatch(t(u0), t(np.repeat(f, M, axis=0)), len(insts), M, labels)

    def batches(self, dataset, rng, stage):
        order = rng.permutation(len(dataset))
        for a in range(0, len(dataset), self.batch_size):
            yield self.make_batch([dataset[i] for i in order[a:a + self.batch_size]], rng, self.M)

    def components(self, final, batch) -> tuple[torch.Tensor, torch.Tensor]:
        energy = self.ops.energy(final, batch.ctx, self.eps).mean()
        div = diversity_torch(final.reshape(batch.B, batch.M, self.n, self.n)).mean()
        return energy, div

    def loss(self, final, batch, stage):
        if self.objective == "imex_label":
            return ((final - batch.labels) ** 2).mean()
        energy = self.ops.energy(final, batch.ctx, self.eps).mean()
        lam = float(stage.extra.get("lambda", 0.0)) if self.objective == "diversity" else 0.0
        if lam == 0.0:
            return energy
        return energy - lam * diversity_torch(final.reshape(batch.B, batch.M, self.n, self.n)).mean()

    def validate(self, model, val_set, T, stage):
        if self._val is None or self._val[0] is not val_set:
            # validation scores the residual, so unlabelled forcings are fine here
            batch = self.make_batch(list(val_set), np.random.default_rng(self.seed), self.val_inits, with_labels=False)
            self._val = (val_set, batch)
        b = self._val[1]
        with torch.no_grad():
            fin, _ = model.unroll(b.y0, b.ctx, T)
            return float(self.ops.residual_mse(fin, b.ctx, self.eps).mean())


LAMBDA_SCHEDULES = {
    0.0: [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    0.5: [0.5, 0.2, 0.06, 0.02, 0.006, 0.0],
    1.2: [1.2, 0.5, 0.16, 0.05, 0.016, 0.0],
    2.0: [2.0, 0.9, 0.28, 0.09, 0.028, 0.0],
}
UNROLLS = [2, 4, 8, 12, 16, 20]
LRS = [1e-3, 8e-4, 6e-4, 4e-4, 3e-4, 2e-4]


def curriculum(epochs: int = 120, lambdas: Sequence[float] | None = None, unrolls=UNROLLS, lrs=LRS) -> StageSchedule:
    """Six equal-ish stages over ``epochs`` with the given unrolls, learning rates and diversity weights."""
    k = len(unrolls)
    starts = [round(i * epochs / k) for i in range(k)]
    lambdas = lambdas if lambdas is not None else [0.0] * k
    if len(lambdas) != k:
        raise ConfigError("one diversity weight per stage required")
    return StageSchedule.from_lists(starts, unrolls, lrs, epochs, [{"lambda": float(l)} for l in lambdas])


def train_ac(dataset: Sequence[AcInstance], val_set: Sequence[AcInstance], objective: str = "energy",
             lambda_init: float | None = None, model: SpectralNet | None = None,
             schedule: StageSchedule | None = None, M: int = 8, batch_size: int = 16, val_inits: int = 16,
             weight_decay: float = 1e-4, seed: int = 0, width: int = 8, modes: int = 8,
             dtype=torch.float32, **train_kw) -> tuple[SpectralNet, TrainResult]:
    """Train the spectral update with the requested objective; the checkpoint with
    the smallest validation residual (at twice the stage unroll) is returned."""
    n = dataset[0].forcing.shape[0]
    if schedule is None:
        lam = LAMBDA_SCHEDULES[lambda_init] if lambda_init is not None else None
        schedule = curriculum(40, lam)
    ss = np.random.SeedSequence(seed)
    s_model, s_train, s_val = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    model = model or SpectralNet(n, width, modes, rng=np.random.default_rng(s_model), dtype=dtype)
    obj = AcObjective(n, objective, M, batch_size, val_inits, s_val, dtype=model.params.dtype)
    res = staged_train(model, obj, list(dataset), schedule, list(val_set), s_train,
                       weight_decay=weight_decay, val_unroll_factor=2, reseed_from_stage_best=False, **train_kw)
    model.params.load(res.params.numpy())
    return model, res


# --- evaluation --------------------------------------------------------------------------

def rollout_fields(model: SpectralNet, forcings: Sequence[np.ndarray], inits: Sequence[np.ndarray],
                   T: int, chunk: int = 256) -> np.ndarray:
    """Terminal states for paired ``(forcing, init)`` lists, evaluated in chunks."""
    out = []
    dt = model.params.dtype
    with torch.no_grad():
        for a in range(0, len(inits), chunk):
            u = torch.as_tensor(np.stack(inits[a:a + chunk]), dtype=dt)
            f = torch.as_tensor(np.stack(forcings[a:a + chunk]), dtype=dt)
            fin, _ = model.unroll(u, f, T)
            out.append(fin.double().numpy())
    return np.concatenate(out)


@dataclass
class AcStates:
    """Terminal states per instance, ``states[k]`` has shape ``(M, n, n)``."""

    states: list[np.ndarray]
    forcings: list[np.ndarray]


def eval_states(model: SpectralNet, dataset: Sequence[AcInstance], n_inits: int = 16, T: int = 40,
                seed: int = 0) -> AcStates:
    rng = np.random.default_rng(seed)
    n = dataset[0].forcing.shape[0]
    inits = [grf_sample(n, INIT_SPEC, rng).values for _ in range(len(dataset) * n_inits)]
    forc = [d.forcing for d in dataset for _ in range(n_inits)]
    fin = rollout_fields(model, forc, inits, T)
    return AcStates([fin[k * n_inits:(k + 1) * n_inits] for k in range(len(dataset))],
                    [d.forcing for d in dataset])


def pairwise_rmse(states: np.ndarray) -> np.ndarray:
    X = np.asarray(states).reshape(len(states), -1)
    return squareform(pdist(X, "euclidean") / math.sqrt(X.shape[1]))


def cluster_solutions(states, threshold: float) -> tuple[int, np.ndarray]:
    """Single-linkage grouping: connect states with pairwise RMSE ``<= threshold``."""
    if threshold <= 0:
        raise ConfigError("threshold must be positive")
    D = pairwise_rmse(np.stack([_vals(s) for s in states]))
    count, labels = connected_components(csr_matrix(D <= threshold), directed=False)
    return int(count), labels


def calibrate_threshold(states: AcStates, target_mean: float = 1.05) -> float:
    """Smallest threshold whose mean cluster count over the instances is at most
    ``target_mean``. The mean count only changes at observed pairwise distances,
    so the search is a bisection over their sorted union."""
    mats = [pairwise_rmse(s) for s in states.states]
    cand = np.unique(np.concatenate([m[np.triu_indices(len(m), 1)] for m in mats]))
    cand = cand[cand > 0]
    if len(cand) == 0:
        raise CalibrationError("all states identical; any positive threshold gives one cluster")

    def mean_count(t):
        return float(np.mean([connected_components(csr_matrix(m <= t), directed=False)[0] for m in mats]))

    if mean_count(cand[-1]) > target_mean:
        raise CalibrationError(f"even the largest distance {cand[-1]:.3g} leaves mean count above {target_mean}")
    lo, hi = 0, len(cand) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if mean_count(cand[mid]) <= target_mean:
            hi = mid
        else:
            lo = mid + 1
    return float(cand[lo])


@dataclass
class AcEvaluation:
    residual_mean: np.ndarray          # per instance, mean over inits
    residual_best: np.ndarray          # per instance, best over inits
    energy_mean: np.ndarray
    clusters: np.ndarray | None = None

    def summary(self) -> dict:
        out = {"residual_mean": float(self.residual_mean.mean()), "residual_best": float(self.residual_best.mean()),
               "energy_mean": float(self.energy_mean.mean())}
        if self.clusters is not None:
            out["clusters_mean"] = float(self.clusters.mean())
            out["clusters_std"] = float(self.clusters.std())
        return out


def evaluate_states(states: AcStates, threshold: float | None = None, eps: float = EPS) -> AcEvaluation:
    rm, rb, em, cl = [], [], [], []
    for S, f in zip(states.states, states.forcings):
        r = np.array([residual_mse(s, f, eps) for s in S])
        rm.append(r.mean())
        rb.append(r.min())
        em.append(np.mean([ac_energy(s, f, eps) for s in S]))
        if threshold is not None:
            cl.append(cluster_solutions(S, threshold)[0])
    return AcEvaluation(np.array(rm), np.array(rb), np.array(em), np.array(cl) if threshold is not None else None)


# --- hybrid solver -----------------------------------------------------------------------

@dataclass
class HybridResult:
    u: np.ndarray
    residuals: np.ndarray
    energies: np.ndarray
    handoff_step: int
    phase: np.ndarray          # 0 = learned, 1 = classical


def hybrid_solve(model: SpectralNet, f, u0, budget: int = 200, handoff_tol: float = 1e-2,
                 max_model_steps: int = 50, eps: float = EPS, tau: float = 0.1,
                 imex_tol: float = 0.0) -> HybridResult:
    """Learned steps until the fixed-point residual drops to ``handoff_tol`` (or
    ``max_model_steps``), then IMEX for the rest of the ``budget``.

    The fixed-point residual is the RMS of ``g(u) - u``. ``imex_tol=0`` runs the
    classical phase for the full remaining budget.
    """
    if budget < max_model_steps:
        raise ConfigError("budget must cover the learned phase")
    fv = _vals(f)
    u = _vals(u0).copy()
    res, en, phase = [], [], []
    handoff = max_model_steps
    for t in range(1, max_model_steps + 1):
        new = model_step_numpy(model, u, fv)
        if not np.all(np.isfinite(new)):
            raise StabilityError(f"learned update produced non-finite values at step {t}", step=t)
        r_fp = float(np.sqrt(np.mean((new - u) ** 2)))
        u = new
        res.append(residual_mse(u, fv, eps))
        en.append(ac_energy(u, fv, eps))
        phase.append(0)
        if r_fp <= handoff_tol:
            handoff = t
            break
    remaining = budget - handoff
    if remaining > 0:
        r = imex_solve(fv, u, eps, tau, imex_tol, remaining, record_energy=True)
        u = r.u.values
        res += list(r.residuals)
        en += list(r.energies)
        phase += [1] * len(r.residuals)
    return HybridResult(u, np.asarray(res), np.asarray(en), handoff, np.asarray(phase))


def imex_phase_monotone(result: HybridResult, rtol: float = 0.0) -> bool:
    """Whether the residual never increases during the classical phase."""
    r = result.residuals[result.phase == 1]
    return bool(np.all(np.diff(r) <= rtol * np.abs(r[:-1])))


def pure_model_solve(model: SpectralNet, f, u0, budget: int = 200, eps: float = EPS) -> HybridResult:
    fv = _vals(f)
    u = _vals(u0).copy()
    res, en = [], []
    for _ in range(budget):
        u = model_step_numpy(model, u, fv)
        res.append(residual_mse(u, fv, eps))
        en.append(ac_energy(u, fv, eps))
    return HybridResult(u, np.asarray(res), np.asarray(en), budget, np.zeros(budget, int))


# --- persistence -------------------------------------------------------------------------

FIELD_SIDECAR = ["index", "kind", "alpha", "ell", "amplitude", "mean", "label_steps"]


def write_fields(path, fields: Sequence[np.ndarray]) -> None:
    """Flat binary: int64 header ``(n, count)`` then float64 values, row-major."""
    arr = np.ascontiguousarray(np.stack([_vals(f) for f in fields]), dtype="<f8")
    count, n, n2 = arr.shape
    if n != n2:
        raise InputError("fields must be square")
    with open(path, "wb") as fh:
        np.asarray([n, count], dtype="<i8").tofile(fh)
        arr.tofile(fh)


def read_fields(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = np.fromfile(fh, dtype="<i8", count=2)
        if len(head) != 2:
            raise DatasetError(f"{path}: truncated header")
        n, count = (int(v) for v in head)
        data = np.fromfile(fh, dtype="<f8")
    if data.size != n * n * count:
        raise DatasetError(f"{path}: expected {count} fields of {n}x{n}, found {data.size} values")
    return data.reshape(count, n, n)


def save_dataset(directory, dataset: Sequence[AcInstance], split: str) -> None:
    os.makedirs(directory, exist_ok=True)
    write_fields(os.path.join(directory, f"{split}_forcing.bin"), [d.forcing for d in dataset])
    has_labels = all(d.label is not None for d in dataset)
    if has_labels:
        write_fields(os.path.join(directory, f"{split}_label.bin"), [d.label for d in dataset])
    with open(os.path.join(directory, f"{split}_forcing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELD_SIDECAR)
        for k, d in enumerate(dataset):
            w.writerow([k, "forcing", d.spec.alpha, d.spec.ell, d.spec.amplitude, d.spec.mean, d.label_steps])


def load_dataset(directory, split: str) -> list[AcInstance]:
    fpath = os.path.join(directory, f"{split}_forcing.bin")
    if not os.path.exists(fpath):
        raise DatasetError(f"no {split} forcings in {directory}")
    forc = read_fields(fpath)
    lpath = os.path.join(directory, f"{split}_label.bin")
    labels = read_fields(lpath) if os.path.exists(lpath) else [None] * len(forc)
    with open(os.path.join(directory, f"{split}_forcing.csv"), newline="") as fh:
        meta = list(csv.DictReader(fh))
    if len(meta) != len(forc):
        raise DatasetError(f"{split}: sidecar has {len(meta)} rows for {len(forc)} fields")
    return [AcInstance(f, GrfSpec(float(m["alpha"]), float(m["ell"]), float(m["amplitude"]), float(m["mean"])),
                       lab, int(m["label_steps"])) for f, lab, m in zip(forc, labels, meta)]
