"""Linearised state estimation: Gaussian prior pushed through dh/dq at the prior mean,
then a conjugate Gaussian update with the measurements."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nr_solver
from .grid_model import GridTopology
from .inference import MeasurementSpec, SampleSet, TruncatedNormalPrior

EPS_RANK = 1e-8


@dataclass
class GaussianStatePosterior:
    """Gaussian over the FREE state entries; FIXED entries are carried for embedding."""

    mean: np.ndarray
    cov: np.ndarray
    free_idx: np.ndarray
    fixed_idx: np.ndarray
    fixed_values: np.ndarray
    state_names: list[str]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        self.free_idx = np.asarray(self.free_idx, dtype=int)
        self.fixed_idx = np.asarray(self.fixed_idx, dtype=int)
        self.fixed_values = np.asarray(self.fixed_values, dtype=float)
        self.state_names = list(self.state_names)

    @property
    def free_names(self) -> list[str]:
        return [self.state_names[i] for i in self.free_idx]

    def full_mean(self) -> np.ndarray:
        x = np.empty(len(self.state_names))
        x[self.free_idx] = self.mean
        x[self.fixed_idx] = self.fixed_values
        return x

    def sample(self, n: int, seed=0) -> np.ndarray:
        """``n`` full-state draws (eigen-factorised, so a singular covariance is fine)."""
        rng = np.random.default_rng(seed)
        w, V = np.linalg.eigh(self.cov)
        L = V * np.sqrt(np.clip(w, 0.0, None))
        X = np.empty((n, len(self.state_names)))
        X[:, self.free_idx] = self.mean + rng.standard_normal((n, len(self.mean))) @ L.T
        X[:, self.fixed_idx] = self.fixed_values
        return X

    def to_sample_set(self, n: int, seed=0) -> SampleSet:
        X = self.sample(n, seed)
        return SampleSet(np.zeros((n, 0)), X, [], self.state_names,
                         provenance={"sampler": "lse", "seed": seed})

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "state_names": self.state_names, "free_names": self.free_names,
                "mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "free_idx": self.free_idx.tolist(), "fixed_idx": self.fixed_idx.tolist(),
                "fixed_values": self.fixed_values.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianStatePosterior":
        return cls(doc["mean"], doc["cov"], doc["free_idx"], doc["fixed_idx"], doc["fixed_values"],
                   doc["state_names"])

    def save(self, path, provenance: dict | None = None) -> None:
        doc = self.to_dict()
        if provenance is not None:
            doc = {"provenance": provenance, **doc}
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path) -> "GaussianStatePosterior":
        return cls.from_dict(json.loads(Path(path).read_text()))


def floor_eigenvalues(cov: np.ndarray, eps_rank: float = EPS_RANK) -> np.ndarray:
    """Raise eigenvalues below ``eps_rank * lambda_max`` to that floor (fills the null space)."""
    w, V = np.linalg.eigh(cov)
    floor = eps_rank * max(w.max(), 0.0)
    w = np.maximum(w, floor)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def gaussian_update(mean, cov, meas_pos, sigma, m):
    """Conjugate update of N(mean, cov) with measurements m = x[meas_pos] + N(0, diag sigma^2).

    Written in gain form, which equals the information form
    (cov^-1 + H'R^-1 H)^-1 but never inverts the floored, ill-conditioned cov.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    meas_pos = np.asarray(meas_pos, dtype=int)
    R = np.diag(np.asarray(sigma, dtype=float) ** 2)
    PHt = cov[:, meas_pos]
    S = cov[np.ix_(meas_pos, meas_pos)] + R
    K = np.linalg.solve(S, PHt.T).T
    post_mean = mean + K @ (np.asarray(m, dtype=float) - mean[meas_pos])
    post_cov = cov - K @ PHt.T
    return post_mean, 0.5 * (post_cov + post_cov.T)


def linearised_prior(x_mean_free, J_free, prior: TruncatedNormalPrior, eps_rank: float = EPS_RANK):
    """Pushforward N(h(mu), J Sigma_q J') of the untruncated prior, eigenvalue-floored."""
    S = np.diag(prior.signs)
    cov_q = S @ prior.cov @ S
    cov = J_free @ cov_q @ J_free.T
    return np.asarray(x_mean_free, dtype=float), floor_eigenvalues(0.5 * (cov + cov.T), eps_rank)


def lse_posterior(prior: TruncatedNormalPrior, spec: MeasurementSpec, m, topo: GridTopology,
                  cfg: nr_solver.SolverConfig | None = None, eps_rank: float = EPS_RANK,
                  linearisation=None) -> GaussianStatePosterior:
    """One linearisation at the prior mean, then the conjugate update.

    ``linearisation=(x_mean_full, dxdq_full)`` replaces the solver, e.g. with
    an affine test map.
    """
    lay = topo.layout
    if linearisation is None:
        state, report = nr_solver.solve(prior.q_mean, topo, cfg)
        if not report.converged:
            raise nr_solver.SolverError(f"solve at the prior mean did not converge (psi={report.psi:.3g})")
        x_mu = state.values
        J = nr_solver.state_jacobian(x_mu, topo)
    else:
        x_mu, J = (np.asarray(a, dtype=float) for a in linearisation)
    free = lay.free_idx
    pos = np.full(lay.size, -1)
    pos[free] = np.arange(len(free))
    meas_pos = pos[spec.indices]
    if np.any(meas_pos < 0):
        raise ValueError("measured entries must be FREE states")
    mu, cov = linearised_prior(x_mu[free], J[free], prior, eps_rank)
    post_mean, post_cov = gaussian_update(mu, cov, meas_pos, spec.sigma, m)
    return GaussianStatePosterior(post_mean, post_cov, free, lay.fixed_idx, lay.fixed_values,
                                  list(lay.names))
