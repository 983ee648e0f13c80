"""Run directories: manifest, checkpoints with content hashes, saved models."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from ..errors import DependencyError, IntegrityError
from ..nnet import ParamStore, ResidualMLP, TrainableOperator, TrainState

MANIFEST = "manifest.yaml"
CHECKPOINT = "checkpoint.pt"
MODEL = "model.npz"
OUT_ENV = "BIFURCATE_OUT"
THREADS_ENV = "BIFURCATE_THREADS"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def sha1_file(path) -> str:
    h = hashlib.sha1()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    """Hash of the package sources, so manifests pin the code that produced them."""
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha1()
    for p in sorted(root.rglob("*.py")) + sorted(root.rglob("*.yaml")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def seed_streams(seed: int) -> dict[str, int]:
    names = ("dataset", "init", "train")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


@dataclass
class RunManifest:
    experiment: str
    config: dict
    profile: str
    seed: int
    seeds: dict
    code_version: str
    started: str
    finished: str | None = None
    status: str = "running"
    outputs: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / MANIFEST
        tmp = path.with_suffix(".tmp")
        tmp.write_text(yaml.safe_dump(asdict(self), sort_keys=False))
        os.replace(tmp, path)
        return path

    def add_output(self, run_dir, rel: str) -> None:
        self.outputs[rel] = sha1_file(Path(run_dir) / rel)

    def finish(self, run_dir) -> None:
        self.finished = _now()
        self.status = "complete"
        self.write(run_dir)

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        if not path.exists():
            raise DependencyError(f"no manifest at {path}")
        return cls(**yaml.safe_load(path.read_text()))


def new_manifest(experiment: str, config: dict, profile: str, seed: int) -> RunManifest:
    env = {"output_root": os.environ.get(OUT_ENV, ""), "threads": os.environ.get(THREADS_ENV, ""),
           "torch_threads": torch.get_num_threads(), "python": platform.python_version(),
           "torch": str(torch.__version__), "numpy": str(np.__version__), "mode": "serial"}
    return RunManifest(experiment, config, profile, seed, seed_streams(seed), code_version(), _now(), environment=env)


def default_run_dir(experiment: str, seed: int) -> Path:
    return Path(os.environ.get(OUT_ENV) or "runs") / f"{experiment}-seed{seed}"


# --- checkpoints -------------------------------------------------------------------------

def save_checkpoint(run_dir, state: TrainState) -> str:
    path = Path(run_dir) / CHECKPOINT
    tmp = path.with_suffix(".tmp")
    torch.save(asdict(state), tmp)
    os.replace(tmp, path)
    digest = sha1_file(path)
    (Path(run_dir) / (CHECKPOINT + ".sha1")).write_text(digest + "\n")
    return digest


def load_checkpoint(run_dir, expected: str | None = None) -> TrainState:
    path = Path(run_dir) / CHECKPOINT
    if not path.exists():
        raise DependencyError(f"no checkpoint in {run_dir}")
    side = Path(run_dir) / (CHECKPOINT + ".sha1")
    want = expected or (side.read_text().strip() if side.exists() else None)
    got = sha1_file(path)
    if want is None or got != want:
        raise IntegrityError(f"checkpoint {path} hash {got} does not match recorded {want}")
    try:
        d = torch.load(path, weights_only=False)
    except Exception as exc:
        raise IntegrityError(f"checkpoint {path} is unreadable: {exc}") from None
    return TrainState(**d)


# --- models ------------------------------------------------------------------------------

def save_model(path, model: TrainableOperator) -> None:
    np.savez(path, values=model.params.numpy(), config=json.dumps(model.config()),
             layout=json.dumps(model.params.layout_table()), dtype=str(model.params.dtype).removeprefix("torch."))


def build_from_config(cfg: dict, dtype=torch.float64) -> TrainableOperator:
    kind = cfg["kind"]
    if kind == "residual_mlp":
        return ResidualMLP(cfg["state_dim"], cfg["input_dim"], cfg["width"], cfg["activation"], dtype=dtype)
    if kind == "recurrent_gnn":
        from ..ising import RecurrentGNN
        return RecurrentGNN(cfg["width"], cfg["alpha"], dtype=dtype)
    if kind == "vanilla_gnn":
        from ..ising import VanillaGNN
        return VanillaGNN(cfg["width"], cfg["layers"], dtype=dtype)
    if kind == "spectral_net":
        from ..allencahn import SpectralNet
        return SpectralNet(cfg["n"], cfg["width"], cfg["modes"], cfg["eta"], dtype=dtype)
    raise IntegrityError(f"unknown model kind {kind!r}")


def load_model(path, dtype: torch.dtype | None = None) -> TrainableOperator:
    """Rebuild a saved model, by default in the precision it was trained in."""
    path = Path(path)
    if path.is_dir():
        path = path / MODEL
    if not path.exists():
        raise DependencyError(f"no trained model at {path}")
    with np.load(path) as z:
        cfg = json.loads(str(z["config"]))
        layout = json.loads(str(z["layout"]))
        values = z["values"]
        stored = str(z["dtype"]) if "dtype" in z.files else "float64"
    dtype = dtype or getattr(torch, stored)
    model = build_from_config(cfg, dtype)
    if model.params.layout_table() != layout:
        raise IntegrityError(f"{path}: stored layout does not match a freshly built {cfg['kind']}")
    model.params = ParamStore.from_table(layout, values, dtype)
    return model
