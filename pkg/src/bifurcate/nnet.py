"""Trainable update operators: flat parameter stores, dense layers, unrolled
gradients, AdamW steps and the staged-unroll training loop.

Automatic differentiation is delegated to torch; parameters live in one flat
leaf tensor so that checkpoints, gradient checks and the optimizer all see a
single vector.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (ConfigError, InputError, LayoutError, TrainingAbortedError,
                     TrainingStepError)

log = logging.getLogger(__name__)

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": torch.tanh,
    "gelu": F.gelu,  # exact erf form
    "identity": lambda z: z,
}


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class Slot:
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamStore:
    """One flat parameter vector with named views into it.

    ``values`` is a torch leaf tensor with ``requires_grad``; ``grads`` is its
    gradient buffer (allocated on first use).
    """

    def __init__(self, layout: dict[str, Slot], values: torch.Tensor):
        total = sum(s.size for s in layout.values())
        if values.ndim != 1 or values.numel() != total:
            raise LayoutError(f"layout covers {total} entries, vector has {values.numel()}")
        ends = sorted((s.offset, s.offset + s.size) for s in layout.values())
        pos = 0
        for a, b in ends:
            if a != pos:
                raise LayoutError("layout slices must be disjoint and contiguous")
            pos = b
        self.layout = dict(layout)
        self.values = values.detach().clone().requires_grad_(True)

    @classmethod
    def build(cls, shapes: dict[str, tuple[int, ...]], rng: np.random.Generator,
              dtype=torch.float64, scales: dict[str, float] | None = None) -> "ParamStore":
        """Allocate slots in insertion order with uniform(+-1/sqrt(fan_in)) init.

        Fan-in is the last axis of a weight's shape; a bias ``<p>.bias`` uses
        the fan-in of ``<p>.weight``. ``scales`` overrides the bound per name.
        """
        layout, off = {}, 0
        chunks = []
        for name, shape in shapes.items():
            shape = tuple(int(d) for d in shape)
            slot = Slot(off, shape)
            layout[name] = slot
            off += slot.size
            if scales and name in scales:
                bound = scales[name]
            else:
                ref = shapes.get(name.rsplit(".", 1)[0] + ".weight", shape) if name.endswith(".bias") else shape
                fan_in = ref[-1] if len(ref) else 1
                bound = 1.0 / math.sqrt(max(fan_in, 1))
            chunks.append(rng.uniform(-bound, bound, slot.size))
        vec = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(layout, torch.tensor(vec, dtype=dtype))

    @property
    def size(self) -> int:
        return self.values.numel()

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def grads(self) -> torch.Tensor:
        if self.values.grad is None:
            self.values.grad = torch.zeros_like(self.values)
        return self.values.grad

    def zero_grad(self) -> None:
        if self.values.grad is not None:
            self.values.grad.zero_()

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            s = self.layout[name]
        except KeyError:
            raise LayoutError(f"no parameter slot named {name!r}") from None
        return self.values[s.offset:s.offset + s.size].view(s.shape)

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy().astype(np.float64).copy()

    def load(self, vec) -> None:
        vec = torch.as_tensor(np.asarray(vec), dtype=self.dtype)
        if vec.shape != self.values.shape:
            raise LayoutError("vector length does not match layout")
        with torch.no_grad():
            self.values.copy_(vec)

    def copy(self) -> "ParamStore":
        return ParamStore(self.layout, self.values)

    def to(self, dtype) -> "ParamStore":
        return ParamStore(self.layout, self.values.detach().to(dtype))

    def layout_table(self) -> list[dict]:
        return [{"name": k, "offset": s.offset, "shape": list(s.shape)} for k, s in self.layout.items()]

    @classmethod
    def from_table(cls, table: Sequence[dict], values, dtype=torch.float64) -> "ParamStore":
        layout = {r["name"]: Slot(int(r["offset"]), tuple(r["shape"])) for r in table}
        return cls(layout, torch.as_tensor(np.asarray(values), dtype=dtype))


def dense_forward(params: ParamStore, prefix: str, inp, activation: str = "identity") -> torch.Tensor:
    """``activation(inp @ W.T + b)`` using slots ``<prefix>.weight`` and ``<prefix>.bias``."""
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    W = params[prefix + ".weight"]
    inp = torch.as_tensor(inp, dtype=params.dtype)
    if W.ndim != 2 or inp.shape[-1] != W.shape[1]:
        raise LayoutError(f"{prefix}: input width {inp.shape[-1]} does not match weight {tuple(W.shape)}")
    z = inp @ W.T
    if prefix + ".bias" in params:
        b = params[prefix + ".bias"]
        if b.shape != (W.shape[0],):
            raise LayoutError(f"{prefix}: bias shape {tuple(b.shape)} does not match weight")
        z = z + b
    return ACTIVATIONS[activation](z)


# ---------------------------------------------------------------- models

class TrainableOperator:
    """Base class for weight-tied update maps over a :class:`ParamStore`.

    Subclasses implement ``step(state, ctx)`` on torch tensors; ``ctx`` carries
    whatever the input is (an x batch, a graph batch, a forcing batch).
    """

    params: ParamStore

    def step(self, state: torch.Tensor, ctx: Any) -> torch.Tensor:
        raise NotImplementedError

    def unroll(self, state: torch.Tensor, ctx: Any, T: int, keep: Sequence[int] = ()) -> tuple[torch.Tensor, dict]:
        snaps = {}
        if 0 in keep:
            snaps[0] = state.detach().clone()
        for t in range(T):
            state = self.step(state, ctx)
            if t + 1 in keep:
                snaps[t + 1] = state.detach().clone()
        return state, snaps

    def config(self) -> dict:
        return {}


class ResidualMLP(TrainableOperator):
    """``y + W2 act(W1 [y, x] + b1) + b2``: the two-layer toy network."""

    def __init__(self, state_dim: int, input_dim: int, width: int = 256, activation: str = "tanh",
                 rng: np.random.Generator | None = None, dtype=torch.float64):
        self.state_dim, self.input_dim, self.width, self.activation = state_dim, input_dim, width, activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = ParamStore.build({
            "hidden.weight": (width, state_dim + input_dim),
            "hidden.bias": (width,),
            "out.weight": (state_dim, width),
            "out.bias": (state_dim,),
        }, rng, dtype)

    def step(self, y, x):
        h = dense_forward(self.params, "hidden", torch.cat([y, x], dim=-1), self.activation)
        return y + dense_forward(self.params, "out", h)

    def config(self):
        return {"kind": "residual_mlp", "state_dim": self.state_dim, "input_dim": self.input_dim,
                "width": self.width, "activation": self.activation}


def as_update_operator(model: TrainableOperator, state_dim: int, input_dim: int | None = None,
                       name: str = "learned"):
    """Wrap a trainable model as a numpy :class:`~bifurcate.dynamics.UpdateOperator`."""
    from .dynamics import UpdateOperator

    def fn(y, x):
        with torch.no_grad():
            yt = torch.as_tensor(y, dtype=model.params.dtype).reshape(1, -1)
            xt = torch.as_tensor(np.asarray(x, float), dtype=model.params.dtype).reshape(1, -1)
            return model.step(yt, xt).reshape(-1).double().numpy()
    return UpdateOperator(fn, state_dim, input_dim, name)


# ---------------------------------------------------------------- gradients

def unrolled_grad(model: TrainableOperator, loss: Callable[[torch.Tensor, Any], torch.Tensor],
                  batch: Any, T: int, y0: torch.Tensor | None = None) -> float:
    """Unroll ``T`` shared steps, evaluate ``loss(final, batch)`` and accumulate
    its gradient into ``model.params.grads``.

    ``y0`` defaults to ``batch.y0`` and ``batch.ctx`` is passed to ``step``.
    Non-finite loss or gradient raises :class:`TrainingStepError` and leaves
    the gradient buffer zeroed.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    state = batch.y0 if y0 is None else y0
    final, _ = model.unroll(state, batch.ctx, T)
    value = loss(final, batch)
    if not torch.isfinite(value):
        model.params.zero_grad()
        raise TrainingStepError(f"non-finite loss {float(value.detach())}")
    value.backward()
    if not torch.all(torch.isfinite(model.params.grads)):
        model.params.zero_grad()
        raise TrainingStepError("non-finite gradient")
    return float(value.detach())


def finite_difference_grad(fn: Callable[[], float], params: ParamStore, coords: Iterable[int],
                           h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar ``fn()`` w.r.t. selected flat coordinates."""
    out = []
    with torch.no_grad():
        for i in coords:
            orig = params.values[i].item()
            params.values[i] = orig + h
            fp = float(fn())
            params.values[i] = orig - h
            fm = float(fn())
            params.values[i] = orig
            out.append((fp - fm) / (2 * h))
    return np.asarray(out)


@dataclass
class GradCheck:
    rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    coords: np.ndarray

    def ok(self, tol: float = 1e-5) -> bool:
        return self.rel_error <= tol


def gradient_check(fn: Callable[[], torch.Tensor], params: ParamStore, n_coords: int | None = 40,
                   h: float = 1e-5, seed: int = 0) -> GradCheck:
    """Compare autograd against central differences on a random coordinate subset.

    Relative error is ``||g_ad - g_fd|| / max(||g_ad||, ||g_fd||)`` over the
    chosen coordinates. Run in float64.
    """
    params.zero_grad()
    val = fn()
    val.backward()
    g = params.grads.detach().double().numpy().copy()
    params.zero_grad()
    rng = np.random.default_rng(seed)
    n = params.size
    coords = np.arange(n) if n_coords is None or n_coords >= n else np.sort(rng.choice(n, n_coords, replace=False))
    num = finite_difference_grad(lambda: float(fn().detach()), params, coords, h)
    ana = g[coords]
    denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-300)
    return GradCheck(float(np.linalg.norm(ana - num) / denom), ana, num, coords)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    """AdamW hyper-parameters plus the moment buffers (held by torch)."""

    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    clip_norm: float | None = None
    _opt: torch.optim.AdamW | None = field(default=None, repr=False)

    def bind(self, params: ParamStore) -> "OptimState":
        self._opt = torch.optim.AdamW([params.values], lr=self.lr, betas=(self.beta1, self.beta2),
                                      eps=self.eps_hat, weight_decay=self.weight_decay)
        return self

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        if self._opt is not None:
            for g in self._opt.param_groups:
                g["lr"] = lr

    def _buf(self, key):
        st = self._opt.state.get(self._opt.param_groups[0]["params"][0], {}) if self._opt else {}
        return st.get(key)

    @property
    def step_count(self) -> int:
        s = self._buf("step")
        return int(s) if s is not None else 0

    @property
    def first_moment(self):
        return self._buf("exp_avg")

    @property
    def second_moment(self):
        return self._buf("exp_avg_sq")

    def state_dict(self) -> dict:
        return self._opt.state_dict() if self._opt else {}

    def load_state_dict(self, sd: dict) -> None:
        if sd:
            self._opt.load_state_dict(sd)
            self.set_lr(self.lr)


def optim_step(params: ParamStore, opt: OptimState) -> None:
    """One AdamW step with decoupled weight decay; grads are zeroed afterwards.

    With ``opt.clip_norm`` set, the gradient is first rescaled to at most that
    Euclidean norm.

    Non-finite gradients reject the step and leave values and moments as they were.
    """
    if opt._opt is None:
        opt.bind(params)
    g = params.grads
    if not torch.all(torch.isfinite(g)):
        params.zero_grad()
        raise TrainingStepError("non-finite gradient; step rejected")
    if opt.clip_norm:
        torch.nn.utils.clip_grad_norm_([params.values], opt.clip_norm)
    opt._opt.step()
    params.zero_grad()


# ---------------------------------------------------------------- staged training

@dataclass(frozen=True)
class Stage:
    start_epoch: int
    unroll: int
    lr: float
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[Stage, ...]
    epochs: int

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("schedule needs at least one stage")
        starts = [s.start_epoch for s in self.stages]
        if starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("stage start epochs must increase strictly from 0")
        if any(s.unroll < 1 for s in self.stages):
            raise ConfigError("unroll lengths must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")

    @classmethod
    def from_lists(cls, starts, unrolls, lrs, epochs, extras=None) -> "StageSchedule":
        if not (len(starts) == len(unrolls) == len(lrs)):
            raise ConfigError("starts, unrolls and lrs must have equal length")
        extras = extras or [{} for _ in starts]
        return cls(tuple(Stage(int(a), int(b), float(c), dict(e)) for a, b, c, e in zip(starts, unrolls, lrs, extras)),
                   int(epochs))

    @classmethod
    def equal_stages(cls, unrolls, lr, epochs_per_stage, extras=None) -> "StageSchedule":
        n = len(unrolls)
        return cls.from_lists([k * epochs_per_stage for k in range(n)], unrolls,
                              lr if isinstance(lr, (list, tuple)) else [lr] * n,
                              n * epochs_per_stage, extras)

    def stage_index(self, epoch: int) -> int:
        k = 0
        for i, s in enumerate(self.stages):
            if epoch >= s.start_epoch:
                k = i
        return k

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "stages": [
            {"start_epoch": s.start_epoch, "unroll": s.unroll, "lr": s.lr, "extra": s.extra} for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        return cls(tuple(Stage(int(s["start_epoch"]), int(s["unroll"]), float(s["lr"]), dict(s.get("extra", {})))
                         for s in d["stages"]), int(d["epochs"]))


def stage_lr(schedule: StageSchedule, epoch: int) -> float:
    """Learning rate for ``epoch``: constant per stage unless the stage's
    ``extra`` asks for ``lr_decay: cosine`` (decay to ``lr_floor`` times lr)."""
    k = schedule.stage_index(epoch)
    st = schedule.stages[k]
    if st.extra.get("lr_decay") != "cosine":
        return st.lr
    end = schedule.stages[k + 1].start_epoch if k + 1 < len(schedule.stages) else schedule.epochs
    frac = (epoch - st.start_epoch) / max(end - st.start_epoch, 1)
    floor = float(st.extra.get("lr_floor", 0.01))
    return st.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


class Objective:
    """What staged training needs from an experiment.

    ``batches`` yields batches (objects with ``y0`` and ``ctx``) for one epoch,
    drawing all randomness from ``rng``; ``loss`` maps terminal states to a
    scalar; ``validate`` returns the validation metric (lower is better).
    """

    def batches(self, dataset, rng: np.random.Generator, stage: Stage) -> Iterable[Any]:
        raise NotImplementedError

    def loss(self, final: torch.Tensor, batch: Any, stage: Stage) -> torch.Tensor:
        raise NotImplementedError

    def validate(self, model: TrainableOperator, val_set, T: int, stage: Stage) -> float:
        raise NotImplementedError


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    epoch: int
    values: np.ndarray
    optimizer: dict
    rng_state: dict
    stage_best: tuple[float, np.ndarray | None]
    overall_best: tuple[float, np.ndarray | None]
    log: list[dict]


@dataclass
class TrainResult:
    params: ParamStore
    log: list[dict]
    best_metric: float
    state: TrainState


def staged_train(model: TrainableOperator, objective: Objective, dataset, schedule: StageSchedule,
                 val_set, seed: int | np.random.SeedSequence = 0, *, weight_decay: float = 0.0,
                 clip_norm: float | None = None, val_unroll_factor: int = 1, reseed_from_stage_best: bool = True,
                 resume: TrainState | None = None, stop_after_epoch: int | None = None,
                 on_epoch: Callable[[TrainState], None] | None = None) -> TrainResult:
    """Run the epoch loop over the schedule's stages.

    Each epoch re-samples initializations through ``objective.batches`` and ends
    with a validation pass at ``val_unroll_factor`` times the current unroll.
    When a stage ends the best checkpoint seen during it becomes the starting
    point of the next stage (with a fresh optimizer). The returned parameters
    are the overall best checkpoint.

    ``stop_after_epoch`` ends the run early (used to simulate interruption);
    ``resume`` continues from a saved :class:`TrainState`.
    """
    rng = np.random.default_rng(seed)
    opt = OptimState(lr=schedule.stages[0].lr, weight_decay=weight_decay, clip_norm=clip_norm).bind(model.params)
    start_epoch = 0
    stage_best: tuple[float, np.ndarray | None] = (math.inf, None)
    overall_best: tuple[float, np.ndarray | None] = (math.inf, None)
    history: list[dict] = []
    if resume is not None:
        model.params.load(resume.values)
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        opt.set_lr(schedule.stages[schedule.stage_index(max(resume.epoch - 1, 0))].lr)
        opt.load_state_dict(resume.optimizer)
        start_epoch = resume.epoch
        stage_best, overall_best = resume.stage_best, resume.overall_best
        history = list(resume.log)

    def snapshot(epoch):
        return TrainState(epoch, model.params.numpy(), copy.deepcopy(opt.state_dict()),
                          copy.deepcopy(rng.bit_generator.state), stage_best, overall_best, list(history))

    prev_stage = schedule.stage_index(start_epoch - 1) if start_epoch > 0 else None
    for epoch in range(start_epoch, schedule.epochs):
        k = schedule.stage_index(epoch)
        stage = schedule.stages[k]
        if prev_stage is not None and k != prev_stage:
            if reseed_from_stage_best and stage_best[1] is not None:
                model.params.load(stage_best[1])
            opt = OptimState(lr=stage.lr, weight_decay=weight_decay, clip_norm=clip_norm).bind(model.params)
            stage_best = (math.inf, None)
        elif prev_stage is None:
            opt.set_lr(stage.lr)
        prev_stage = k
        opt.set_lr(stage_lr(schedule, epoch))

        losses, rejected = [], 0
        for batch in objective.batches(dataset, rng, stage):
            try:
                val = unrolled_grad(model, lambda fin, b: objective.loss(fin, b, stage), batch, stage.unroll)
                optim_step(model.params, opt)
                losses.append(val)
            except TrainingStepError as exc:
                rejected += 1
                log.debug("epoch %d: step rejected (%s)", epoch, exc)
        if not losses and rejected:
            raise TrainingAbortedError(f"all {rejected} steps rejected in epoch {epoch} (stage {k}, lr {stage.lr})")

        metric = float(objective.validate(model, val_set, val_unroll_factor * stage.unroll, stage))
        if not math.isfinite(metric):
            metric = math.inf
        if metric < stage_best[0]:
            stage_best = (metric, model.params.numpy())
        if metric < overall_best[0]:
            overall_best = (metric, model.params.numpy())
        history.append({"epoch": epoch, "stage": k, "unroll": stage.unroll, "lr": opt.lr,
                        "train_loss": float(np.mean(losses)) if losses else math.nan,
                        "val_metric": metric, "rejected": rejected})
        if on_epoch is not None:
            on_epoch(snapshot(epoch + 1))
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break

    final_state = snapshot(len(history) if history else start_epoch)
    best = model.params.copy()
    if overall_best[1] is not None:
        best.load(overall_best[1])
    return TrainResult(best, history, overall_best[0], final_state)


def sample_uniform(rng: np.random.Generator, low: float, high: float, shape, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(rng.uniform(low, high, shape), dtype=dtype)
