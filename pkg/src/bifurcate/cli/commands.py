"""One function per subcommand. Each takes the resolved config and a :class:`Run`
and writes its artifacts into the run directory."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .. import allencahn as ac
from .. import branches, ising, toy
from ..errors import ConfigError, DatasetError, DependencyError
from ..metrics import write_csv
from ..nnet import StageSchedule, TrainState
from . import runs, schemas

log = logging.getLogger(__name__)


@dataclass
class Run:
    dir: Path
    manifest: runs.RunManifest
    resume: TrainState | None = None

    @property
    def seeds(self) -> dict:
        return self.manifest.seeds

    def path(self, rel: str) -> Path:
        return self.dir / rel

    def csv(self, rel: str, rows, fieldnames=None) -> None:
        rows = list(rows)
        if not rows and fieldnames is None:
            fieldnames = [c for c in schemas.schema_for(rel) if not c.endswith("*")]
        write_csv(self.path(rel), rows, fieldnames)
        schemas.check_csv(self.path(rel))
        self.manifest.add_output(self.dir, rel)

    def checkpointer(self):
        def save(state: TrainState):
            self.manifest.outputs[runs.CHECKPOINT] = runs.save_checkpoint(self.dir, state)
            self.manifest.write(self.dir)
        return save


def _train_kw(cfg: dict, run: Run) -> dict:
    kw = {"on_epoch": run.checkpointer(), "resume": run.resume}
    if cfg.get("stop_after_epoch"):
        kw["stop_after_epoch"] = int(cfg["stop_after_epoch"])
    return kw


def _log_rows(log_entries):
    return [{k: e[k] for k in ("epoch", "stage", "unroll", "lr", "train_loss", "val_metric", "rejected")}
            for e in log_entries]


def _finished_training(res, schedule_epochs: int) -> bool:
    return bool(res.log) and res.log[-1]["epoch"] + 1 >= schedule_epochs


def _need(cfg: dict, key: str, producer: str) -> Path:
    p = cfg.get(key) or ""
    if not p:
        raise DependencyError(f"'{key}' is not set; run `bifurcate {producer}` first and pass its output directory")
    path = Path(p)
    if not path.exists():
        raise DependencyError(f"{path} does not exist; run `bifurcate {producer}` first")
    return path


# --- operator verification ---------------------------------------------------------------

def verify_operator(cfg: dict, run: Run) -> int:
    rows = []
    for name in cfg["families"]:
        fam = branches.make_family(name)
        lo, hi = (float(v[0]) for v in fam.bounds)
        grid = np.linspace(lo, hi, cfg["grid_points"])
        t0 = time.perf_counter()
        op = branches.regularized_operator(fam, mode=cfg["mode"])
        rep = branches.verify_expressivity(fam, grid, cfg["n_inits"], cfg["T"], cfg["tol"], operator=op,
                                           valid_radius=cfg["valid_radius"], seed=run.seeds["init"])
        dt = time.perf_counter() - t0
        run.csv(f"expressivity_{name}.csv", rep.rows())
        rows.append({"family": name, "grid_points": len(grid), "valid_fraction": rep.item2_convergence,
                     "recovery_fraction": rep.item3_recovery, "lipschitz_coarse": rep.lipschitz_coarse,
                     "lipschitz_fine": rep.lipschitz_fine, "regular": rep.item1_regular,
                     "passed": rep.item2_convergence >= 0.99 and rep.item3_recovery == 1.0, "seconds": dt})
        print(f"{name}: valid {rep.item2_convergence:.4f} recovery {rep.item3_recovery:.4f} "
              f"lipschitz {rep.lipschitz_coarse:.3g}/{rep.lipschitz_fine:.3g} ({dt:.1f}s)")
    run.csv("summary.csv", rows)
    return 0 if all(r["passed"] for r in rows) else 1


# --- toy problems ------------------------------------------------------------------------

def toy_schedule(train: dict, problem: str) -> StageSchedule:
    if problem not in train["unrolls"]:
        raise ConfigError(f"train.unrolls: no unroll list for {problem!r}")
    extra = {} if train["lr_decay"] in ("", "none") else {"lr_decay": train["lr_decay"]}
    return StageSchedule.equal_stages(train["unrolls"][problem], train["lr"], train["epochs_per_stage"],
                                      [dict(extra) for _ in train["unrolls"][problem]])


def _toy_data(problem: str):
    return tuple(toy.make_toy(problem, s) for s in ("train", "val", "test"))


def _dtype(name: str) -> torch.dtype:
    if name not in ("float32", "float64"):
        raise ConfigError(f"train.dtype: expected float32 or float64, got {name!r}")
    return getattr(torch, name)


def _toy_fit(problem, selector, n_int, train, seed, **kw):
    tr, va, te = _toy_data(problem)
    common = dict(schedule=toy_schedule(train, problem), M=train["M"], init_range=tuple(train["init_range"]),
                  batch_size=train["batch_size"], seed=seed, test_inits=train["test_inits"],
                  clip_norm=train["clip_norm"] or None,
                  model=toy.new_model(seed, train["width"], dtype=_dtype(train["dtype"])))
    if selector == "bifurcation":
        return toy.algorithm1_fit(tr, va, te, **common, **kw)
    if selector == "manual":
        return toy.manual_fit(tr, n_int, va, te, **common, **kw)
    raise ConfigError(f"selector: expected 'bifurcation' or 'manual', got {selector!r}")


def toy_fit(cfg: dict, run: Run) -> int:
    tr, va, te = _toy_data(cfg["problem"])
    toy.save_toy_csv(run.path("data.csv"), [tr, va, te])
    run.manifest.add_output(run.dir, "data.csv")
    fit = _toy_fit(cfg["problem"], cfg["selector"], cfg["n_int"], cfg["train"], run.seeds["train"],
                   **_train_kw(cfg, run))
    run.csv("log.csv", _log_rows(fit.train.log))
    sched = toy_schedule(cfg["train"], cfg["problem"])
    if not _finished_training(fit.train, sched.epochs):
        run.manifest.status = "interrupted"
        return 0
    runs.save_model(run.path(runs.MODEL), fit.model)
    run.manifest.add_output(run.dir, runs.MODEL)
    run.csv("metrics.csv", [{"problem": cfg["problem"], "selector": fit.kind, "n_int": fit.n_int or "",
                             "train_error": fit.train_error, "test_error": fit.test_error,
                             "best_val": fit.train.best_metric}])
    print(f"{cfg['problem']} {fit.kind}: test error {fit.test_error:.4g}")
    return 0


def toy_selectors(cfg: dict, run: Run) -> int:
    rows = []
    for problem in cfg["problems"]:
        row = {"problem": problem}
        fit = _toy_fit(problem, "bifurcation", 0, cfg["train"], run.seeds["train"])
        row["bifurcation"] = fit.test_error
        for n in cfg["n_ints"]:
            row[f"manual_{n}"] = _toy_fit(problem, "manual", n, cfg["train"], run.seeds["train"]).test_error
        rows.append(row)
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    run.csv("table1.csv", rows)
    return 0


# --- Ising -------------------------------------------------------------------------------

def ising_gen(cfg: dict, run: Run) -> int:
    rng = np.random.default_rng(run.seeds["dataset"])
    label_rng = np.random.default_rng(run.seeds["init"])
    data = run.path("data")
    for split in ("train", "val", "test"):
        insts = ising.gen_dataset(cfg[f"n_{split}"], rng, cfg["min_nodes"], cfg["max_nodes"], split,
                                  tuple(cfg["j_range"]))
        ising.attach_labels(insts, label_rng, cfg["label_mode"])
        ising.save_dataset(data, insts, split)
        run.manifest.add_output(run.dir, f"data/{split}_index.csv")
        print(f"{split}: {len(insts)} graphs, {min(i.n_nodes for i in insts)}-{max(i.n_nodes for i in insts)} nodes")
    return 0


def ising_train(cfg: dict, run: Run) -> int:
    data = _need(cfg, "data", "ising-gen")
    tr, va = ising.load_dataset(data, "train"), ising.load_dataset(data, "val")
    model = ising.build_model(cfg["model"], cfg["width"], cfg["alpha"], cfg["layers"], run.seeds["init"])
    sched = ising.desk_schedule(cfg["epochs"], cfg["unroll"], cfg["lr"])
    model, res = ising.train_ising(tr, va, cfg["objective"], model, sched, cfg["M"], cfg["batch_size"],
                                   run.seeds["train"], **_train_kw(cfg, run))
    run.csv("log.csv", _log_rows(res.log))
    if not _finished_training(res, sched.epochs):
        run.manifest.status = "interrupted"
        return 0
    runs.save_model(run.path(runs.MODEL), model)
    run.manifest.add_output(run.dir, runs.MODEL)
    print(f"{cfg['model']}/{cfg['objective']}: best validation {res.best_metric:.4g}")
    return 0


def ising_eval(cfg: dict, run: Run) -> int:
    data = _need(cfg, "data", "ising-gen")
    test = ising.load_dataset(data, "test")
    if not cfg["runs"]:
        raise DependencyError("'runs' is empty; train models with `bifurcate ising-train` first")
    t2, t3, hist = [], [], []
    for rd in cfg["runs"]:
        man = runs.RunManifest.read(rd)
        model = runs.load_model(rd)
        ev = ising.evaluate(model, test, cfg["k"], cfg["T"], run.seeds["init"])
        viol, checked = ising.oracle_violations(model, test, cfg["k"], cfg["T"], cfg["oracle_max_nodes"],
                                                run.seeds["init"])
        name = Path(rd).name
        t2.append({"run": name, "model": man.config["model"], "objective": man.config["objective"],
                   **ev.summary(), "oracle_violations": viol, "oracle_checked": checked})
        for mode in ("continuous", "rounded"):
            pct = ising.sensitivity_percentiles(model, test, cfg["eps"], cfg["percentiles"], cfg["T"],
                                                run.seeds["init"], mode == "rounded")
            t3.append({"run": name, "eps": cfg["eps"], "mode": mode, **{f"p{int(p)}": v for p, v in pct.items()}})
        vals, counts = np.unique(ev.counts, return_counts=True)
        hist += [{"run": name, "solutions": int(v), "graphs": int(c)} for v, c in zip(vals, counts)]
        print(f"{name}: energy/node {ev.summary()['energy_mean']:.4f} "
              f"solutions {ev.summary()['solutions_mean']:.2f} violations {viol}/{checked}")
    run.csv("table2.csv", t2)
    run.csv("table3.csv", t3)
    run.csv("solution_hist.csv", hist)
    return 0


# --- Allen-Cahn --------------------------------------------------------------------------

def ac_gen(cfg: dict, run: Run) -> int:
    rng = np.random.default_rng(run.seeds["dataset"])
    label_rng = np.random.default_rng(run.seeds["init"])
    data = run.path("data")
    stats = []
    for split in ("train", "val", "test"):
        insts = ac.gen_dataset(cfg[f"n_{split}"], cfg["n"], rng)
        if cfg["labels"] and split == "train":
            res = ac.attach_imex_labels(insts, label_rng, tau=cfg["tau"], tol=cfg["tol"], max_steps=cfg["max_steps"])
            stats += [{"split": split, "index": k, "imex_steps": r.steps, "final_residual": float(r.residuals[-1])}
                      for k, r in enumerate(res)]
        ac.save_dataset(data, insts, split)
        run.manifest.add_output(run.dir, f"data/{split}_forcing.bin")
        print(f"{split}: {len(insts)} forcings on a {cfg['n']}x{cfg['n']} grid")
    if stats:
        run.csv("imex_labels.csv", stats)
    return 0


def ac_train(cfg: dict, run: Run) -> int:
    data = _need(cfg, "data", "ac-gen")
    tr, va = ac.load_dataset(data, "train"), ac.load_dataset(data, "val")
    lam = None
    if cfg["objective"] == "diversity":
        if cfg["lambda_init"] not in ac.LAMBDA_SCHEDULES:
            raise ConfigError(f"lambda_init: choose one of {sorted(ac.LAMBDA_SCHEDULES)}")
        lam = ac.LAMBDA_SCHEDULES[cfg["lambda_init"]]
    sched = ac.curriculum(cfg["epochs"], lam, cfg["unrolls"], cfg["lrs"])
    model = ac.SpectralNet(tr[0].forcing.shape[0], cfg["width"], cfg["modes"],
                           rng=np.random.default_rng(run.seeds["init"]), dtype=torch.float32)
    model, res = ac.train_ac(tr, va, cfg["objective"], model=model, schedule=sched, M=cfg["M"],
                             batch_size=cfg["batch_size"], val_inits=cfg["val_inits"],
                             weight_decay=cfg["weight_decay"], seed=run.seeds["train"], **_train_kw(cfg, run))
    run.csv("log.csv", _log_rows(res.log))
    if not _finished_training(res, sched.epochs):
        run.manifest.status = "interrupted"
        return 0
    runs.save_model(run.path(runs.MODEL), model)
    run.manifest.add_output(run.dir, runs.MODEL)
    print(f"{cfg['objective']} (lambda_init {cfg['lambda_init']}): best validation residual {res.best_metric:.4g}")
    return 0


def ac_eval(cfg: dict, run: Run) -> int:
    data = _need(cfg, "data", "ac-gen")
    if not cfg["runs"]:
        raise DependencyError("'runs' is empty; train models with `bifurcate ac-train` first")
    calib = _need(cfg, "calibrate_with", "ac-train")
    tr, va, te = (ac.load_dataset(data, s) for s in ("train", "val", "test"))
    seed = run.seeds["init"]
    thr = ac.calibrate_threshold(ac.eval_states(runs.load_model(calib), va, cfg["n_inits"],
                                                cfg["T"], seed), cfg["target_mean"])
    print(f"calibrated clustering threshold {thr:.4g}")
    rows = []
    for rd in cfg["runs"]:
        man = runs.RunManifest.read(rd)
        model = runs.load_model(rd)
        ev_te = ac.evaluate_states(ac.eval_states(model, te, cfg["n_inits"], cfg["T"], seed), thr).summary()
        ev_tr = ac.evaluate_states(ac.eval_states(model, tr[:len(te)], cfg["n_inits"], cfg["T"], seed)).summary()
        rows.append({"run": Path(rd).name, "objective": man.config["objective"],
                     "lambda_init": man.config["lambda_init"], "train_residual": ev_tr["residual_mean"],
                     "test_residual": ev_te["residual_mean"], "train_energy": ev_tr["energy_mean"],
                     "test_energy": ev_te["energy_mean"], "solutions_mean": ev_te["clusters_mean"],
                     "solutions_std": ev_te["clusters_std"], "threshold": thr})
        print(f"{rows[-1]['run']}: residual {ev_te['residual_mean']:.3e} clusters {ev_te['clusters_mean']:.2f}")
    run.csv("table4.csv", rows)
    return 0


def ac_hybrid(cfg: dict, run: Run) -> int:
    data = _need(cfg, "data", "ac-gen")
    rd = _need(cfg, "run", "ac-train")
    model = runs.load_model(rd)
    te = ac.load_dataset(data, "test")[:cfg["instances"]]
    if not te:
        raise DatasetError("no test instances")
    rng = np.random.default_rng(run.seeds["init"])
    traces, summary = [], []
    for k, inst in enumerate(te):
        u0 = ac.grf_sample(inst.forcing.shape[0], ac.INIT_SPEC, rng).values
        hy = ac.hybrid_solve(model, inst.forcing, u0, cfg["budget"], cfg["handoff_tol"], cfg["max_model_steps"])
        pu = ac.pure_model_solve(model, inst.forcing, u0, cfg["budget"])
        for name, r in (("hybrid", hy), ("model", pu)):
            traces += [{"instance": k, "method": name, "step": t + 1, "phase": int(r.phase[t]),
                        "residual": float(r.residuals[t]), "energy": float(r.energies[t])}
                       for t in range(len(r.residuals))]
        summary.append({"instance": k, "handoff_step": hy.handoff_step, "hybrid_final": float(hy.residuals[-1]),
                        "model_final": float(pu.residuals[-1]), "imex_monotone": ac.imex_phase_monotone(hy)})
    run.csv("traces.csv", traces)
    run.csv("hybrid_summary.csv", summary)
    h = np.mean([s["hybrid_final"] for s in summary])
    m = np.mean([s["model_final"] for s in summary])
    mono = np.mean([s["imex_monotone"] for s in summary])
    print(f"final residual: hybrid {h:.3e} vs model {m:.3e}; monotone classical phase on {mono:.0%}")
    return 0


COMMANDS = {
    "verify-operator": verify_operator,
    "toy-fit": toy_fit,
    "toy-selectors": toy_selectors,
    "ising-gen": ising_gen,
    "ising-train": ising_train,
    "ising-eval": ising_eval,
    "ac-gen": ac_gen,
    "ac-train": ac_train,
    "ac-eval": ac_eval,
    "ac-hybrid": ac_hybrid,
}
RESUMABLE = ("toy-fit", "ising-train", "ac-train")
