"""Accuracy measures for predicted states and for estimated posterior sample sets."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nr_solver
from .grid_model import GridTopology, StateLayout
from .inference import MeasurementSpec, SampleSet, TruncatedNormalPrior

logger = logging.getLogger(__name__)

GROUPS = ("T", "mdot", "p", "Tend")
#: groups and their reporting unit scale in the posterior comparison table
REPORT_GROUPS = (("T", "degC", 1.0), ("p", "mbar", 1000.0), ("mdot", "kg/s", 1.0))
MAX_ROWS = 5000


def psi(X, Q, topo: GridTopology) -> float:
    """Mean squared norm of the grid-equation residual over the rows of ``X``."""
    R = topo.equations.residual(np.atleast_2d(X), np.atleast_2d(Q))
    return float(np.mean(np.einsum("ij,ij->i", R, R)))


def group_columns(layout: StateLayout, free_only: bool = True) -> dict[str, np.ndarray]:
    return {g: layout.group_indices(g, free_only) for g in GROUPS}


def mae_mape(pred, true, layout: StateLayout, free_only: bool = True) -> dict[str, dict]:
    """Per-group MAE and MAPE [%]; MAPE skips entries whose true value is exactly 0 and counts them."""
    pred, true = np.atleast_2d(pred), np.atleast_2d(true)
    out = {}
    for g, cols in group_columns(layout, free_only).items():
        if len(cols) == 0:
            continue
        p, t = pred[:, cols], true[:, cols]
        err = np.abs(p - t)
        nz = t != 0
        out[g] = {
            "mae": float(err.mean()),
            "mape": float(100.0 * np.mean(err[nz] / np.abs(t[nz]))) if nz.any() else float("nan"),
            "n": int(err.size),
            "n_excluded": int((~nz).sum()),
        }
    return out


# -- energy distance -------------------------------------------------------------------------

def _mean_pairwise_distance(A, B, chunk: int = 1024) -> float:
    """Mean Euclidean distance over all pairs, Gram-matrix based with exact recomputation
    wherever the expansion cancels badly (near-coincident points)."""
    nb = np.einsum("ij,ij->i", B, B)
    total = 0.0
    for s in range(0, len(A), chunk):
        a = A[s:s + chunk]
        na = np.einsum("ij,ij->i", a, a)
        scale = na[:, None] + nb[None, :]
        d2 = scale - 2.0 * (a @ B.T)
        ii, jj = np.nonzero(d2 <= 1e-8 * scale)
        if ii.size:
            diff = a[ii] - B[jj]
            d2[ii, jj] = np.einsum("ij,ij->i", diff, diff)
        total += float(np.sqrt(np.clip(d2, 0.0, None)).sum())
    return total / (len(A) * len(B))


def _digest(X) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(X, dtype=float).tobytes() + str(X.shape).encode()).digest()


def energy_distance(X, Y, max_rows: int = MAX_ROWS, seed: int = 0) -> float:
    """E = 2 E|X-Y| - E|X-X'| - E|Y-Y'| from empirical double sums.

    Sets larger than ``max_rows`` are subsampled without replacement with a
    seeded generator. The pair is put in a canonical order first, so the
    result is exactly symmetric in its arguments.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Y = Y[:, None] if Y.ndim == 1 else Y
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("energy distance needs nonempty sets")
    if _digest(Y) < _digest(X):
        X, Y = Y, X
    sets = []
    for k, S in enumerate((X, Y)):
        if len(S) > max_rows:
            rng = np.random.default_rng([seed, k])
            S = S[np.sort(rng.choice(len(S), max_rows, replace=False))]
        sets.append(S)
    X, Y = sets
    center = np.concatenate([X, Y]).mean(axis=0)
    X, Y = X - center, Y - center
    e = 2.0 * _mean_pairwise_distance(X, Y) - _mean_pairwise_distance(X, X) - _mean_pairwise_distance(Y, Y)
    return float(e)


def quantile_delta(X, Y, level: float = 0.05) -> np.ndarray:
    """|q_level(X) - q_level(Y)| per column (linear interpolation between order statistics)."""
    return np.abs(np.quantile(np.asarray(X, dtype=float), level, axis=0)
                  - np.quantile(np.asarray(Y, dtype=float), level, axis=0))


def mean_delta(X, Y) -> np.ndarray:
    return np.abs(np.mean(np.asarray(X, dtype=float), axis=0) - np.mean(np.asarray(Y, dtype=float), axis=0))


def compare_posteriors(cand_x, truth_x, layout: StateLayout, seed: int = 0,
                       max_rows: int = MAX_ROWS) -> dict:
    """Energy distances and quantile/mean deltas of a candidate against a ground-truth sample set.

    Computed on FREE states; per-group values use the reporting units (p in mbar).
    """
    cols = group_columns(layout, free_only=True)
    free = layout.free_idx
    out = {"combined_energy": energy_distance(cand_x[:, free], truth_x[:, free], max_rows, seed)}
    dq = quantile_delta(cand_x, truth_x)
    dm = mean_delta(cand_x, truth_x)
    for g, _unit, scale in REPORT_GROUPS:
        c = cols[g]
        out[g] = {
            "energy": scale * energy_distance(cand_x[:, c], truth_x[:, c], max_rows, seed),
            "mean_dq5": scale * float(dq[c].mean()),
            "max_dq5": scale * float(dq[c].max()),
            "mean_dm": scale * float(dm[c].mean()),
            "max_dm": scale * float(dm[c].max()),
        }
    return out


def _as_states(candidate, n: int, seed: int) -> np.ndarray:
    if isinstance(candidate, SampleSet):
        return candidate.x
    if hasattr(candidate, "sample"):
        return candidate.sample(n, seed)
    return np.asarray(candidate, dtype=float)


# -- replicated evaluation -------------------------------------------------------------------

@dataclass
class Replication:
    index: int
    q_true: np.ndarray
    m: np.ndarray
    seed: int


@dataclass
class EvaluationResult:
    """Per-estimator lists of per-replication comparison dicts, plus failures."""

    per_replication: dict[str, list[dict]] = field(default_factory=dict)
    failures: dict[str, list[dict]] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def averaged(self) -> dict[str, dict]:
        return {name: average_metrics(rows) for name, rows in self.per_replication.items() if rows}


def average_metrics(rows: list[dict]) -> dict:
    """Elementwise mean of nested metric dicts."""
    first = rows[0]
    out = {}
    for k, v in first.items():
        if isinstance(v, dict):
            out[k] = average_metrics([r[k] for r in rows])
        else:
            out[k] = float(np.mean([r[k] for r in rows]))
    return out


def make_replications(prior: TruncatedNormalPrior, topo: GridTopology, spec: MeasurementSpec,
                      n: int = 50, seed: int = 0, cfg: nr_solver.SolverConfig | None = None) -> list[Replication]:
    """Measurements synthesised from independent prior draws: solve, select, add noise."""
    rng = np.random.default_rng([seed, 3])
    reps = []
    while len(reps) < n:
        q = prior.sample(1, rng)[0]
        state, report = nr_solver.solve(q, topo, cfg)
        if not report.converged:
            continue
        m = spec.synthesize(state.values, rng)
        reps.append(Replication(len(reps), q, m, int(rng.integers(2**31))))
    return reps


def evaluate_posteriors(replications: list[Replication], truth: Callable, estimators: dict[str, Callable],
                        layout: StateLayout, n_gaussian: int = 10_000, seed: int = 0,
                        max_rows: int = MAX_ROWS, progress=None) -> EvaluationResult:
    """Run every estimator on every replication and compare against the ground truth.

    ``truth(rep)`` and each ``estimators[name](rep)`` return a SampleSet, a
    Gaussian posterior (sampled ``n_gaussian`` times) or a state array.
    Estimator failures are recorded and excluded from the averages.
    """
    res = EvaluationResult({k: [] for k in estimators}, {k: [] for k in estimators},
                           {"energy_subsample_rows": max_rows, "energy_seed": seed,
                            "states": "free", "units": {g: u for g, u, _ in REPORT_GROUPS}})
    for rep in replications:
        truth_x = _as_states(truth(rep), n_gaussian, rep.seed)
        for name, est in estimators.items():
            try:
                cand_x = _as_states(est(rep), n_gaussian, rep.seed)
                if not np.all(np.isfinite(cand_x)):
                    raise ValueError("estimator returned non-finite states")
                res.per_replication[name].append(compare_posteriors(cand_x, truth_x, layout, seed, max_rows))
            except Exception as exc:  # an estimator failing on one replication must not stop the table
                logger.warning("estimator %s failed on replication %d: %s", name, rep.index, exc)
                res.failures[name].append({"replication": rep.index, "error": str(exc)})
        if progress is not None:
            progress(rep.index)
    return res


# -- reports --------------------------------------------------------------------------------

ROW_LABELS = (("energy", "E1"), ("mean_dq5", "mean dq5"), ("max_dq5", "max dq5"),
              ("mean_dm", "mean dm"), ("max_dm", "max dm"))


def posterior_report(result: EvaluationResult, provenance: dict | None = None) -> dict:
    avg = result.averaged()
    return {
        "provenance": provenance or {},
        "estimators": list(result.per_replication),
        "n_replications": {k: len(v) for k, v in result.per_replication.items()},
        "failures": {k: len(v) for k, v in result.failures.items()},
        "failure_details": result.failures,
        "metrics": avg,
        "notes": result.notes,
    }


def report_markdown(report: dict) -> str:
    names = report["estimators"]
    metrics = report["metrics"]
    lines = ["| group | metric | " + " | ".join(names) + " |",
             "|---|---|" + "---|" * len(names)]

    def cell(name, *path):
        v = metrics.get(name)
        for p in path:
            if v is None:
                break
            v = v.get(p)
        return "n/a" if v is None else f"{v:.4g}"

    lines.append("| all | combined E1 | " + " | ".join(cell(n, "combined_energy") for n in names) + " |")
    for g, unit, _ in REPORT_GROUPS:
        for key, label in ROW_LABELS:
            lines.append(f"| {g} [{unit}] | {label} | " + " | ".join(cell(n, g, key) for n in names) + " |")
    fails = ", ".join(f"{k}: {v}" for k, v in report["failures"].items())
    lines.append("")
    lines.append(f"Replications: {report['n_replications']}; failures excluded: {fails or 'none'}. "
                 "Metrics on FREE states; combined E1 in raw units (bar for pressure).")
    return "\n".join(lines) + "\n"


def save_report(report: dict, json_path, md_path=None) -> None:
    Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if md_path is not None:
        Path(md_path).write_text(report_markdown(report))
