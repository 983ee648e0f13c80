"""Frustrated antiferromagnetic Ising instances on triangular lattices, a
recurrent message-passing solver trained without labels, and the exact or
annealed oracle used for comparison."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np
import torch

from .errors import ConfigError, DatasetError, InputError
from .metrics import percentile_table
from .nnet import (Objective, ParamStore, Stage, StageSchedule, TrainableOperator, TrainResult,
                   dense_forward, staged_train)

log = logging.getLogger(__name__)

EXHAUSTIVE_CAP = 24


# --- instances ---------------------------------------------------------------------------

@dataclass
class IsingInstance:
    n_nodes: int
    edges: np.ndarray            # (E, 2) int, i < j
    J: np.ndarray                # (E,) couplings
    label_spins: np.ndarray | None = None
    label_exact: bool = False
    split: str = "train"
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.J = np.asarray(self.J, dtype=float).reshape(-1)
        if len(self.J) != len(self.edges):
            raise InputError("one coupling per edge required")
        if np.any(self.edges[:, 0] >= self.edges[:, 1]):
            raise InputError("edges must be stored with i < j (no self loops)")
        if np.any(self.edges < 0) or np.any(self.edges >= self.n_nodes):
            raise InputError("edge endpoint out of range")
        if len({tuple(e) for e in self.edges.tolist()}) != len(self.edges):
            raise InputError("duplicate edge")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        g.add_weighted_edges_from((int(i), int(j), float(w)) for (i, j), w in zip(self.edges, self.J))
        return g

    def with_couplings(self, J) -> "IsingInstance":
        return IsingInstance(self.n_nodes, self.edges, J, self.label_spins, self.label_exact, self.split, self.shape)


def lattice_shapes(min_nodes: int = 6, max_nodes: int = 30, max_side: int = 20) -> list[tuple[int, int]]:
    """All ``(rows, cols)`` with ``rows, cols >= 2`` whose lattice size is in range."""
    out = []
    for m in range(2, max_side + 1):
        for n in range(2, max_side + 1):
            k = nx.triangular_lattice_graph(m, n).number_of_nodes()
            if min_nodes <= k <= max_nodes:
                out.append((m, n))
    return out


def gen_triangular_instance(rows: int, cols: int, rng: np.random.Generator,
                            j_range: tuple[float, float] = (0.5, 1.5), split: str = "train") -> IsingInstance:
    """Triangular lattice with i.i.d. couplings ``J = -Unif[j_range]``."""
    if rows < 2 or cols < 2:
        raise ConfigError("rows and cols must be >= 2")
    g = nx.triangular_lattice_graph(rows, cols)
    index = {v: k for k, v in enumerate(sorted(g.nodes()))}
    e = np.array(sorted((min(index[a], index[b]), max(index[a], index[b])) for a, b in g.edges()), dtype=np.int64)
    J = -rng.uniform(j_range[0], j_range[1], len(e))
    return IsingInstance(len(index), e, J, split=split, shape=(rows, cols))


def gen_dataset(n_graphs: int, rng: np.random.Generator, min_nodes: int = 6, max_nodes: int = 30,
                split: str = "train", j_range: tuple[float, float] = (0.5, 1.5)) -> list[IsingInstance]:
    shapes = lattice_shapes(min_nodes, max_nodes)
    if not shapes:
        raise ConfigError(f"no lattice shape with {min_nodes}..{max_nodes} nodes")
    picks = rng.integers(0, len(shapes), n_graphs)
    return [gen_triangular_instance(*shapes[p], rng, j_range, split) for p in picks]


# --- energies ----------------------------------------------------------------------------

def _check_spins(inst, s, binary):
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.shape[0] != inst.n_nodes:
        raise InputError(f"expected {inst.n_nodes} spins, got {s.shape[0]}")
    if binary and not np.all(np.abs(s) == 1):
        raise InputError("spins must be +1 or -1")
    if not np.all(np.isfinite(s)):
        raise InputError("non-finite spins")
    return s


def ising_energy(inst: IsingInstance, s) -> float:
    """``-1/2 * sum J_ij s_i s_j`` over undirected edges, each counted once."""
    s = _check_spins(inst, s, True)
    return float(-0.5 * np.sum(inst.J * s[inst.edges[:, 0]] * s[inst.edges[:, 1]]))


def relaxed_loss(inst: IsingInstance, s_hat) -> float:
    """Continuous-spin energy plus the binarization penalty, per node."""
    s = _check_spins(inst, s_hat, False)
    e = -0.5 * np.sum(inst.J * s[inst.edges[:, 0]] * s[inst.edges[:, 1]])
    return float((e + np.sum((s ** 2 - 1) ** 2)) / inst.n_nodes)


def round_spins(s_hat) -> np.ndarray:
    """Elementwise sign with ``sign(0) = +1``."""
    s = np.asarray(s_hat, dtype=float)
    return np.where(s >= 0, 1.0, -1.0)


# --- oracle ------------------------------------------------------------------------------

@dataclass
class OracleResult:
    spins: np.ndarray
    energy: float
    exact: bool


def _spins_of(idx: np.ndarray, n: int) -> np.ndarray:
    # bit i set -> spin i is -1
    bits = (idx[:, None] >> np.arange(n)[None, :]) & 1
    return 1.0 - 2.0 * bits


def exhaustive_ground_state(inst: IsingInstance) -> OracleResult:
    """Global minimizer over all spin vectors, lowest-index tie-break.

    Vector ``k`` has spin ``i = -1`` iff bit ``i`` of ``k`` is set. Since
    ``E(s) = E(-s)`` only indices with the top bit clear are enumerated; the
    flipped partner of each has a larger index. The search is split into low
    and high bit blocks so each block contributes a precomputed energy table
    plus a cross term.
    """
    n = inst.n_nodes
    if n > EXHAUSTIVE_CAP:
        raise ConfigError(f"exhaustive oracle limited to {EXHAUSTIVE_CAP} nodes; use mode='anneal'")
    if n == 1:
        return OracleResult(np.ones(1), 0.0, True)
    free = n - 1                       # top spin fixed to +1
    n_low = min(free, 12)
    n_high = n - n_low                 # includes the fixed top spin
    Jm = np.zeros((n, n))
    Jm[inst.edges[:, 0], inst.edges[:, 1]] = inst.J
    Jm = Jm + Jm.T
    S_low = _spins_of(np.arange(2 ** n_low), n_low)
    J_ll = Jm[:n_low, :n_low]
    E_low = -0.25 * np.einsum("ki,ij,kj->k", S_low, J_ll, S_low)
    J_lh = Jm[:n_low, n_low:]
    J_hh = Jm[n_low:, n_low:]
    best_e, best_k = math.inf, -1
    n_high_free = n_high - 1
    for h in range(2 ** n_high_free):
        sh = _spins_of(np.array([h]), n_high)[0]
        e_high = -0.25 * sh @ J_hh @ sh
        cross = -0.5 * (S_low @ (J_lh @ sh))
        e = E_low + cross + e_high
        k = int(np.argmin(e))
        if e[k] < best_e:
            best_e, best_k = float(e[k]), k + (h << n_low)
    s = _spins_of(np.array([best_k]), n)[0]
    return OracleResult(s, ising_energy(inst, s), True)


def anneal_ground_state(inst: IsingInstance, rng: np.random.Generator, sweeps: int = 400,
                        t_start: float = 3.0, t_end: float = 0.02, restarts: int = 4) -> OracleResult:
    """Single-spin-flip simulated annealing with geometric cooling; best state seen."""
    n = inst.n_nodes
    nbrs = [[] for _ in range(n)]
    for (i, j), w in zip(inst.edges, inst.J):
        nbrs[i].append((j, w))
        nbrs[j].append((i, w))
    nbr_idx = [np.array([j for j, _ in a], dtype=np.int64) for a in nbrs]
    nbr_w = [np.array([w for _, w in a]) for a in nbrs]
    temps = t_start * (t_end / t_start) ** (np.arange(sweeps) / max(sweeps - 1, 1))
    best_s, best_e = None, math.inf
    for _ in range(restarts):
        s = rng.choice([-1.0, 1.0], n)
        e = ising_energy(inst, s)
        for T in temps:
            for i in rng.permutation(n):
                dE = s[i] * float(np.dot(nbr_w[i], s[nbr_idx[i]]))
                if dE <= 0 or rng.random() < math.exp(-dE / T):
                    s[i] = -s[i]
                    e += dE
                    if e < best_e - 1e-12:
                        best_e, best_s = e, s.copy()
        if best_s is None:
            best_s, best_e = s.copy(), e
    return OracleResult(best_s, ising_energy(inst, best_s), False)


def label_oracle(inst: IsingInstance, mode: str = "exhaustive", rng: np.random.Generator | None = None,
                 **anneal_kw) -> OracleResult:
    if mode == "exhaustive":
        return exhaustive_ground_state(inst)
    if mode == "anneal":
        return anneal_ground_state(inst, rng if rng is not None else np.random.default_rng(0), **anneal_kw)
    if mode == "auto":
        return exhaustive_ground_state(inst) if inst.n_nodes <= EXHAUSTIVE_CAP else \
            anneal_ground_state(inst, rng if rng is not None else np.random.default_rng(0), **anneal_kw)
    raise ConfigError(f"unknown oracle mode {mode!r}")


def attach_labels(dataset: Sequence[IsingInstance], rng: np.random.Generator, mode: str = "auto") -> None:
    for inst in dataset:
        res = label_oracle(inst, mode, rng)
        inst.label_spins, inst.label_exact = res.spins, res.exact


# --- batching ----------------------------------------------------------------------------

@dataclass
class GraphBatch:
    """Disjoint union of graphs; every undirected edge appears in both directions."""

    n_total: int
    src: torch.Tensor
    dst: torch.Tensor
    J_dir: torch.Tensor
    e_src: torch.Tensor          # undirected edges, once each
    e_dst: torch.Tensor
    e_J: torch.Tensor
    node_graph: torch.Tensor
    edge_graph: torch.Tensor
    n_graphs: int
    sizes: torch.Tensor
    offsets: np.ndarray

    def split(self, values: torch.Tensor) -> list[torch.Tensor]:
        return [values[a:a + int(n)] for a, n in zip(self.offsets, self.sizes)]


def make_graph_batch(instances: Sequence[IsingInstance], copies: int = 1, dtype=torch.float64,
                     couplings: Sequence[np.ndarray] | None = None) -> GraphBatch:
    """Batch ``copies`` copies of every instance (copy-major within each instance)."""
    src, dst, Jd, es, ed, eJ, ng, eg, sizes, offs = [], [], [], [], [], [], [], [], [], []
    off = 0
    gid = 0
    for k, inst in enumerate(instances):
        J = inst.J if couplings is None else np.asarray(couplings[k], float)
        for _ in range(copies):
            e = inst.edges + off
            src += [e[:, 0], e[:, 1]]
            dst += [e[:, 1], e[:, 0]]
            Jd += [J, J]
            es.append(e[:, 0])
            ed.append(e[:, 1])
            eJ.append(J)
            ng.append(np.full(inst.n_nodes, gid))
            eg.append(np.full(inst.n_edges, gid))
            sizes.append(inst.n_nodes)
            offs.append(off)
            off += inst.n_nodes
            gid += 1
    cat = lambda a, dt=torch.long: torch.as_tensor(np.concatenate(a), dtype=dt)
    return GraphBatch(off, cat(src), cat(dst), cat(Jd, dtype), cat(es), cat(ed), cat(eJ, dtype),
                      cat(ng), cat(eg), gid, torch.as_tensor(sizes, dtype=dtype), np.asarray(offs))


def relaxed_loss_batch(spins: torch.Tensor, gb: GraphBatch) -> torch.Tensor:
    """Per-graph relaxed loss for a batch of continuous spins, shape ``(n_graphs,)``."""
    pair = -0.5 * gb.e_J * spins[gb.e_src] * spins[gb.e_dst]
    e = torch.zeros(gb.n_graphs, dtype=spins.dtype).index_add_(0, gb.edge_graph, pair)
    pen = torch.zeros(gb.n_graphs, dtype=spins.dtype).index_add_(0, gb.node_graph, (spins ** 2 - 1) ** 2)
    return (e + pen) / gb.sizes


# --- models ------------------------------------------------------------------------------

def _gnn_shapes(width: int, prefix: str = "") -> dict:
    w = width
    return {
        prefix + "msg.weight": (w, 1 + w), prefix + "msg.bias": (w,),
        prefix + "upd.weight": (w, 1 + 2 * w), prefix + "upd.bias": (w,),
        prefix + "out.weight": (1 + w, w), prefix + "out.bias": (1 + w,),
    }


def _gnn_layer(params: ParamStore, state: torch.Tensor, gb: GraphBatch, prefix: str = "") -> torch.Tensor:
    """One message-passing update of node states ``[spin, hidden]``."""
    phi = dense_forward(params, prefix + "msg", state, "tanh")
    m = torch.zeros_like(phi).index_add_(0, gb.dst, gb.J_dir[:, None] * phi[gb.src])
    h = dense_forward(params, prefix + "upd", torch.cat([state, m], dim=1), "tanh")
    z = dense_forward(params, prefix + "out", h)
    return torch.cat([torch.tanh(z[:, :1]), torch.tanh(z[:, 1:])], dim=1)


class RecurrentGNN(TrainableOperator):
    """Weight-tied message passing over node states ``[spin, hidden]``.

    Each node aggregates ``m_i = sum_j J_ij phi([s_j, h_j])`` and updates
    ``[s_i, h_i] <- psi([s_i, h_i, m_i])`` with a tanh-bounded spin channel;
    the new state is mixed with the old one with damping ``alpha``.
    """

    def __init__(self, width: int = 16, alpha: float = 1.0, rng: np.random.Generator | None = None,
                 dtype=torch.float64):
        if not 0 < alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        self.width, self.alpha = width, alpha
        self.params = ParamStore.build(_gnn_shapes(width), rng if rng is not None else np.random.default_rng(0), dtype)

    def step(self, state, gb):
        if state.shape != (gb.n_total, 1 + self.width):
            raise InputError(f"state shape {tuple(state.shape)} does not match graph batch")
        new = _gnn_layer(self.params, state, gb)
        return new if self.alpha == 1 else (1 - self.alpha) * state + self.alpha * new

    def initial_state(self, spins: torch.Tensor) -> torch.Tensor:
        return torch.cat([spins.reshape(-1, 1), torch.zeros(spins.numel(), self.width, dtype=spins.dtype)], 1)

    def config(self):
        return {"kind": "recurrent_gnn", "width": self.width, "alpha": self.alpha}


class VanillaGNN(TrainableOperator):
    """Feed-forward baseline: ``layers`` untied message-passing layers applied to
    a fixed all-zero start. Ignores the initialization and the unroll length."""

    recurrent = False

    def __init__(self, width: int = 16, layers: int = 4, rng: np.random.Generator | None = None,
                 dtype=torch.float64):
        self.width, self.layers, self.alpha = width, layers, 1.0
        shapes = {}
        for k in range(layers):
            shapes.update(_gnn_shapes(width, f"l{k}."))
        self.params = ParamStore.build(shapes, rng if rng is not None else np.random.default_rng(0), dtype)

    def step(self, state, gb):
        return self.unroll(state, gb, 1)[0]

    def unroll(self, state, gb, T, keep=()):
        x = torch.zeros_like(state)
        for k in range(self.layers):
            x = _gnn_layer(self.params, x, gb, f"l{k}.")
        return x, {t: x.detach().clone() for t in keep}

    def initial_state(self, spins):
        return torch.cat([spins.reshape(-1, 1), torch.zeros(spins.numel(), self.width, dtype=spins.dtype)], 1)

    def config(self):
        return {"kind": "vanilla_gnn", "width": self.width, "layers": self.layers}


def build_model(kind: str, width: int = 16, alpha: float = 1.0, layers: int = 4, seed: int = 0,
                dtype=torch.float64) -> TrainableOperator:
    rng = np.random.default_rng(seed)
    if kind == "recurrent":
        return RecurrentGNN(width, alpha, rng, dtype)
    if kind == "vanilla":
        return VanillaGNN(width, layers, rng, dtype)
    raise ConfigError(f"unknown Ising model kind {kind!r}")


# --- training ----------------------------------------------------------------------------

@dataclass
class IsingBatch:
    y0: torch.Tensor
    ctx: GraphBatch
    labels: torch.Tensor | None


class IsingObjective(Objective):
    """``energy``: mean relaxed loss of terminal spins. ``label``: mean squared
    error to the oracle label. Both average over instances and initializations."""

    def __init__(self, model, objective: str = "energy", M: int = 4, batch_size: int = 32,
                 val_inits: int = 4, seed: int = 0, dtype=torch.float64):
        if objective not in ("energy", "label"):
            raise ConfigError(f"unknown objective {objective!r}")
        self.model, self.objective, self.M, self.batch_size = model, objective, M, batch_size
        self.val_inits, self.seed, self.dtype = val_inits, seed, dtype
        self._val = None

    def make_batch(self, insts, rng, copies, with_labels: bool = True) -> IsingBatch:
        gb = make_graph_batch(insts, copies, self.dtype)
        s0 = torch.as_tensor(rng.uniform(-1, 1, gb.n_total), dtype=self.dtype)
        labels = None
        if self.objective == "label" and with_labels:
            if any(i.label_spins is None for i in insts):
                raise DatasetError("label objective needs label_spins on every training instance")
            labels = torch.as_tensor(np.concatenate([np.tile(i.label_spins, copies) for i in insts]), dtype=self.dtype)
        return IsingBatch(self.model.initial_state(s0), gb, labels)

    def batches(self, dataset, rng, stage):
        order = rng.permutation(len(dataset))
        for a in range(0, len(dataset), self.batch_size):
            yield self.make_batch([dataset[i] for i in order[a:a + self.batch_size]], rng, self.M)

    def loss(self, final, batch, stage):
        s = final[:, 0]
        if self.objective == "energy":
            return relaxed_loss_batch(s, batch.ctx).mean()
        err = torch.zeros(batch.ctx.n_graphs, dtype=s.dtype).index_add_(0, batch.ctx.node_graph, (s - batch.labels) ** 2)
        return (err / batch.ctx.sizes).mean()

    def validate(self, model, val_set, T, stage):
        # both objectives are validated on the relaxed energy
        if self._val is None or self._val[0] is not val_set:
            self._val = (val_set, self.make_batch(list(val_set), np.random.default_rng(self.seed), self.val_inits,
                                                  with_labels=False))
        b = self._val[1]
        with torch.no_grad():
            fin, _ = model.unroll(b.y0, b.ctx, T)
            return float(relaxed_loss_batch(fin[:, 0], b.ctx).mean())


def desk_schedule(epochs: int = 2000, unroll: int = 10, lr: float = 1e-3) -> StageSchedule:
    return StageSchedule((Stage(0, unroll, lr),), epochs)


def train_ising(dataset: Sequence[IsingInstance], val_set: Sequence[IsingInstance], objective: str = "energy",
                model: TrainableOperator | None = None, schedule: StageSchedule | None = None,
                M: int = 4, batch_size: int = 32, seed: int = 0, **train_kw) -> tuple[TrainableOperator, TrainResult]:
    schedule = schedule or desk_schedule()
    ss = np.random.SeedSequence(seed)
    s_model, s_train, s_val = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    model = model or build_model("recurrent", seed=s_model)
    obj = IsingObjective(model, objective, M, batch_size, seed=s_val, dtype=model.params.dtype)
    res = staged_train(model, obj, list(dataset), schedule, list(val_set), s_train, **train_kw)
    model.params.load(res.params.numpy())
    return model, res


# --- evaluation --------------------------------------------------------------------------

def infer(model: TrainableOperator, instances: Sequence[IsingInstance], init_spins: Sequence[np.ndarray],
          T: int, couplings: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Continuous terminal spins for one initialization per listed instance."""
    gb = make_graph_batch(instances, 1, model.params.dtype, couplings)
    s0 = torch.as_tensor(np.concatenate([np.asarray(s, float) for s in init_spins]), dtype=model.params.dtype)
    with torch.no_grad():
        fin, _ = model.unroll(model.initial_state(s0), gb, T)
    return [v[:, 0].double().numpy() for v in gb.split(fin)]


@dataclass
class SolutionCount:
    count: int
    quotient_count: int
    energies: np.ndarray
    rounded: np.ndarray


def count_solutions(model: TrainableOperator, inst: IsingInstance, k: int = 20, T: int = 10,
                    rng: np.random.Generator | None = None) -> SolutionCount:
    """Distinct rounded terminal spin vectors over ``k`` random initializations.

    ``count`` treats ``s`` and ``-s`` as different; ``quotient_count`` merges them.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    inits = [rng.uniform(-1, 1, inst.n_nodes) for _ in range(k)]
    finals = infer(model, [inst] * k, inits, T)
    rounded = np.array([round_spins(f) for f in finals])
    raw = {tuple(r) for r in rounded.astype(int).tolist()}
    quo = {min(t, tuple(-v for v in t)) for t in raw}
    energies = np.array([ising_energy(inst, r) for r in rounded])
    return SolutionCount(len(raw), len(quo), energies, rounded)


@dataclass
class IsingEvaluation:
    energy_per_node: np.ndarray       # mean over trajectories, per graph
    best_energy_per_node: np.ndarray
    counts: np.ndarray
    quotient_counts: np.ndarray

    def summary(self) -> dict:
        return {"energy_mean": float(self.energy_per_node.mean()), "energy_std": float(self.energy_per_node.std()),
                "best_energy_mean": float(self.best_energy_per_node.mean()),
                "solutions_mean": float(self.counts.mean()), "solutions_std": float(self.counts.std()),
                "quotient_solutions_mean": float(self.quotient_counts.mean())}


def evaluate(model: TrainableOperator, instances: Sequence[IsingInstance], k: int = 20, T: int = 10,
             seed: int = 0) -> IsingEvaluation:
    """Rounded energy per node and solution counts, ``k`` trajectories per graph."""
    rng = np.random.default_rng(seed)
    insts = list(instances)
    inits = [rng.uniform(-1, 1, i.n_nodes) for i in insts for _ in range(k)]
    finals = infer(model, [i for i in insts for _ in range(k)], inits, T)
    e_mean, e_best, cnt, qcnt = [], [], [], []
    for g, inst in enumerate(insts):
        rounded = np.array([round_spins(f) for f in finals[g * k:(g + 1) * k]])
        en = np.array([ising_energy(inst, r) for r in rounded]) / inst.n_nodes
        e_mean.append(en.mean())
        e_best.append(en.min())
        raw = {tuple(r) for r in rounded.astype(int).tolist()}
        cnt.append(len(raw))
        qcnt.append(len({min(t, tuple(-v for v in t)) for t in raw}))
    return IsingEvaluation(np.array(e_mean), np.array(e_best), np.array(cnt), np.array(qcnt))


def oracle_violations(model: TrainableOperator, instances: Sequence[IsingInstance], k: int = 20, T: int = 10,
                      max_nodes: int = 16, seed: int = 0) -> tuple[int, int]:
    """Count rounded model outputs beating the exhaustive optimum (should be zero)."""
    rng = np.random.default_rng(seed)
    checked = violations = 0
    for inst in instances:
        if inst.n_nodes > max_nodes:
            continue
        opt = exhaustive_ground_state(inst).energy
        sc = count_solutions(model, inst, k, T, rng)
        checked += 1
        violations += int(np.sum(sc.energies < opt - 1e-9))
    return violations, checked


def sensitivity_ratios(model: TrainableOperator, instances: Sequence[IsingInstance], eps: float = 0.005,
                       T: int = 10, seed: int = 0, rounded: bool = False) -> np.ndarray:
    """``||s(J + dJ) - s(J)|| / ||dJ||`` per instance with ``dJ ~ N(0, eps^2)`` per edge,
    both runs starting from the same initialization."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    rng = np.random.default_rng(seed)
    insts = list(instances)
    inits = [rng.uniform(-1, 1, i.n_nodes) for i in insts]
    dJ = [rng.normal(0.0, eps, i.n_edges) for i in insts]
    base = infer(model, insts, inits, T)
    pert = infer(model, insts, inits, T, couplings=[i.J + d for i, d in zip(insts, dJ)])
    out = []
    for b, p, d in zip(base, pert, dJ):
        if rounded:
            b, p = round_spins(b), round_spins(p)
        out.append(np.linalg.norm(p - b) / np.linalg.norm(d))
    return np.asarray(out)


def sensitivity_percentiles(model, instances, eps: float = 0.005, percentiles=(40, 50, 60, 70, 80, 90, 95),
                            T: int = 10, seed: int = 0, rounded: bool = False) -> dict[float, float]:
    return percentile_table(sensitivity_ratios(model, instances, eps, T, seed, rounded), percentiles)


# --- persistence -------------------------------------------------------------------------

def write_instance(path, inst: IsingInstance) -> None:
    """Edge-list text: ``n_nodes`` header, one ``i j J`` line per edge, optional
    ``label`` line with the spins and an ``exact`` flag."""
    with open(path, "w") as fh:
        fh.write(f"{inst.n_nodes}\n")
        for (i, j), w in zip(inst.edges, inst.J):
            fh.write(f"{int(i)} {int(j)} {float(w)!r}\n")
        if inst.label_spins is not None:
            fh.write("label " + " ".join(str(int(v)) for v in inst.label_spins)
                     + f" exact={int(inst.label_exact)}\n")


def read_instance(path, split: str = "train") -> IsingInstance:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        n = int(lines[0])
    except (IndexError, ValueError):
        raise DatasetError(f"{path}: missing node-count header") from None
    edges, J, label, exact = [], [], None, False
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "label":
            exact = parts[-1] == "exact=1"
            label = np.array([float(v) for v in parts[1:-1]])
            continue
        if len(parts) != 3:
            raise DatasetError(f"{path}: malformed edge line {ln!r}")
        edges.append((int(parts[0]), int(parts[1])))
        J.append(float(parts[2]))
    return IsingInstance(n, np.array(edges), np.array(J), label, exact, split)


def save_dataset(directory, instances: Sequence[IsingInstance], split: str) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    names = []
    for k, inst in enumerate(instances):
        name = f"{split}_{k:05d}.edges"
        write_instance(os.path.join(directory, name), inst)
        names.append(name)
    with open(os.path.join(directory, f"{split}_index.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "n_nodes", "n_edges", "has_label", "label_exact"])
        for name, inst in zip(names, instances):
            w.writerow([name, inst.n_nodes, inst.n_edges, int(inst.label_spins is not None), int(inst.label_exact)])
    return names


def load_dataset(directory, split: str) -> list[IsingInstance]:
    idx = os.path.join(directory, f"{split}_index.csv")
    if not os.path.exists(idx):
        raise DatasetError(f"no {split} index in {directory}")
    with open(idx, newline="") as fh:
        return [read_instance(os.path.join(directory, r["file"]), split) for r in csv.DictReader(fh)]
