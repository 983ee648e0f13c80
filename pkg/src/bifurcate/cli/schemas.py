"""Header schemas for every CSV the subcommands emit.

A trailing ``*`` marks a family of columns sharing a prefix (for example one
``manual_<n>`` column per interval count); it matches one or more columns.
"""
from __future__ import annotations

import csv
import fnmatch
from pathlib import Path

from ..errors import IntegrityError

LOG = ["epoch", "stage", "unroll", "lr", "train_loss", "val_metric", "rejected"]

CSV_SCHEMAS: dict[str, list[str]] = {
    # verify-operator
    "summary.csv": ["family", "grid_points", "valid_fraction", "recovery_fraction", "lipschitz_coarse",
                    "lipschitz_fine", "regular", "passed", "seconds"],
    "expressivity_*.csv": ["x", "stable", "valid_fraction", "recovered_all", "n_limits"],
    # toy-fit / toy-selectors
    "data.csv": ["x", "label1", "label2", "split", "family"],
    "log.csv": LOG,
    "metrics.csv": ["problem", "selector", "n_int", "train_error", "test_error", "best_val"],
    "table1.csv": ["problem", "bifurcation", "manual_*"],
    # ising-gen / ising-eval
    "*_index.csv": ["file", "n_nodes", "n_edges", "has_label", "label_exact"],
    "table2.csv": ["run", "model", "objective", "energy_mean", "energy_std", "best_energy_mean", "solutions_mean",
                   "solutions_std", "quotient_solutions_mean", "oracle_violations", "oracle_checked"],
    "table3.csv": ["run", "eps", "mode", "p*"],
    "solution_hist.csv": ["run", "solutions", "graphs"],
    # ac-gen / ac-eval / ac-hybrid
    "*_forcing.csv": ["index", "kind", "alpha", "ell", "amplitude", "mean", "label_steps"],
    "imex_labels.csv": ["split", "index", "imex_steps", "final_residual"],
    "table4.csv": ["run", "objective", "lambda_init", "train_residual", "test_residual", "train_energy",
                   "test_energy", "solutions_mean", "solutions_std", "threshold"],
    "traces.csv": ["instance", "method", "step", "phase", "residual", "energy"],
    "hybrid_summary.csv": ["instance", "handoff_step", "hybrid_final", "model_final", "imex_monotone"],
}


def schema_for(filename: str) -> list[str]:
    name = Path(filename).name
    if name in CSV_SCHEMAS:
        return CSV_SCHEMAS[name]
    for pattern, cols in CSV_SCHEMAS.items():
        if "*" in pattern and fnmatch.fnmatch(name, pattern):
            return cols
    raise IntegrityError(f"no documented schema for {name}")


def header_matches(header: list[str], schema: list[str]) -> bool:
    i = 0
    for col in schema:
        if col.endswith("*"):
            start = i
            while i < len(header) and header[i].startswith(col[:-1]):
                i += 1
            if i == start:
                return False
        elif i < len(header) and header[i] == col:
            i += 1
        else:
            return False
    return i == len(header)


def check_csv(path) -> list[str]:
    """Raise :class:`IntegrityError` unless the file's header matches its schema."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    schema = schema_for(path)
    if not header_matches(header, schema):
        raise IntegrityError(f"{path}: header {header} does not match schema {schema}")
    return header
