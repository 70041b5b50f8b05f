"""Priors, measurement likelihood and the three posterior samplers over heat-exchange space.

All samplers work on a ``model`` that maps heat exchanges to full state
vectors. Anything with ``predict_batch(Q) -> X`` works for SIR and MH; HMC
additionally needs ``vjp(Q, G) -> G @ dX/dQ``. ``ExactMap`` wraps the Newton
solver, ``surrogate.SurrogateNet`` the trained network, and ``IdentityMap`` /
``LinearMap`` exist so the samplers can be checked against closed forms.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nr_solver
from .grid_model import GridTopology, StateLayout
from .provenance import canonical_json

logger = logging.getLogger(__name__)

PRIOR_ACCEPTANCE_FLOOR = 1e-3
MIN_ESS = 50.0


class SamplerError(RuntimeError):
    pass


class MeasurementError(ValueError):
    pass


def _psd_factors(cov: np.ndarray, rtol: float = 1e-12):
    """Square root, pseudo-inverse and log pseudo-determinant of a PSD matrix."""
    w, V = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    keep = w > rtol * max(w.max(initial=0.0), 1e-300)
    sqrt = V * np.sqrt(w)
    prec = (V[:, keep] / w[keep]) @ V[:, keep].T
    return sqrt, prec, float(np.sum(np.log(w[keep]))), int(keep.sum())


# -- prior --------------------------------------------------------------------------

@dataclass
class TruncatedNormalPrior:
    """Zero-truncated multivariate normal over heat-exchange magnitudes.

    ``mean``/``cov`` describe the magnitudes; entries with ``signs == -1``
    (sources) are drawn positive and negated afterwards, so the prior in q
    space lives on the orthant picked out by ``signs``.
    """

    mean: np.ndarray
    cov: np.ndarray
    signs: np.ndarray | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        d = len(self.mean)
        self.cov = np.asarray(self.cov, dtype=float).reshape(d, d)
        self.signs = np.ones(d) if self.signs is None else np.asarray(self.signs, dtype=float)
        if self.signs.shape != (d,) or not np.all(np.abs(self.signs) == 1):
            raise ValueError("signs must be a vector of +-1 matching the mean")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-9 * max(1.0, np.abs(self.cov).max())):
            raise ValueError("prior covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-9 * max(1.0, np.abs(self.cov).max()):
            raise ValueError("prior covariance must be positive semi-definite")
        if self.names is not None:
            self.names = tuple(self.names)
            if len(self.names) != d:
                raise ValueError("names must match the mean")
        self._sqrt, self._prec, self._logdet, self._rank = _psd_factors(self.cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def q_mean(self) -> np.ndarray:
        """Mode of the prior in q space (signs applied)."""
        return self.signs * self.mean

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def log_prior(self, Q) -> np.ndarray:
        """Untruncated normal log-density on the feasible orthant, -inf outside it."""
        Q = np.asarray(Q, dtype=float)
        Z = Q * self.signs
        d = Z - self.mean
        quad = np.einsum("...i,ij,...j->...", d, self._prec, d)
        lp = -0.5 * quad - 0.5 * (self._rank * np.log(2 * np.pi) + self._logdet)
        return np.where(np.all(Z >= 0, axis=-1), lp, -np.inf)

    def grad_log_prior(self, Q) -> np.ndarray:
        """Gaussian score on the feasible orthant; elsewhere +1 (towards feasibility)
        on every infeasible entry and 0 on the rest."""
        Q = np.asarray(Q, dtype=float)
        Z = Q * self.signs
        neg = Z < 0
        score = -((Z - self.mean) @ self._prec) * self.signs
        push = neg * self.signs
        return np.where(np.any(neg, axis=-1, keepdims=True), push, score)

    def sample(self, n: int, rng=None) -> np.ndarray:
        """``n`` iid draws in q space by rejection of draws with a negative magnitude."""
        rng = np.random.default_rng(rng)
        if n < 0:
            raise ValueError("n must be >= 0")
        out, drawn, accepted, acc = [], 0, 0, 1.0
        while accepted < n:
            batch = max(1024, int(1.2 * (n - accepted) / max(acc, PRIOR_ACCEPTANCE_FLOOR)))
            Z = self.mean + rng.standard_normal((batch, self.dim)) @ self._sqrt.T
            keep = Z[np.all(Z >= 0, axis=1)]
            out.append(keep)
            drawn += batch
            accepted += len(keep)
            acc = accepted / drawn
            if acc < PRIOR_ACCEPTANCE_FLOOR:
                raise SamplerError(
                    f"prior rejection acceptance {acc:.2g} is below {PRIOR_ACCEPTANCE_FLOOR}: "
                    "most of the prior mass sits at negative heat exchange, review the prior")
        Z = np.concatenate(out)[:n] if out else np.zeros((0, self.dim))
        return Z * self.signs

    def to_dict(self) -> dict:
        return {"names": list(self.names) if self.names else None, "mean": self.mean.tolist(),
                "cov": self.cov.tolist(), "signs": self.signs.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TruncatedNormalPrior":
        return cls(doc["mean"], doc["cov"], doc.get("signs"), doc.get("names"))

    def check_topology(self, topo: GridTopology) -> None:
        names = topo.heat_exchange_names
        if self.dim != len(names):
            raise ValueError(f"prior has {self.dim} entries, topology has {len(names)} heat exchanges")
        if self.names is not None and list(self.names) != list(names):
            raise ValueError(f"prior names {list(self.names)} do not match topology {names}")
        if not np.array_equal(self.signs, topo.heat_exchange_signs):
            raise ValueError("prior signs do not match the demand/source roles of the topology")


def load_prior(path) -> TruncatedNormalPrior:
    doc = json.loads(Path(path).read_text())
    return TruncatedNormalPrior.from_dict(doc)


def save_prior(prior: TruncatedNormalPrior, path, provenance: dict | None = None) -> None:
    doc = prior.to_dict()
    if provenance is not None:
        doc = {"provenance": provenance, **doc}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


LOOP_PRIOR_MEAN = (200.0, 20.0, 200.0, 200.0)
LOOP_PRIOR_VAR = (7000.0, 100.0, 100.0, 7000.0)
LOOP_RHO_AC = -0.9


def loop_prior(topo: GridTopology | None = None) -> TruncatedNormalPrior:
    """Demand prior of the ring grid (order A, B, C, D)."""
    var = np.array(LOOP_PRIOR_VAR)
    cov = np.diag(var)
    cov[0, 2] = cov[2, 0] = LOOP_RHO_AC * np.sqrt(var[0] * var[2])
    names = ("A", "B", "C", "D") if topo is None else tuple(topo.heat_exchange_names)
    return TruncatedNormalPrior(np.array(LOOP_PRIOR_MEAN), cov, names=names)


def default_tree_prior(topo: GridTopology, seed: int = 0) -> TruncatedNormalPrior:
    """Independent demand prior for synthetic trees: means 50-250 kW, 25 % coefficient of variation."""
    rng = np.random.default_rng(seed)
    n = len(topo.active_edges)
    mean = rng.uniform(50.0, 250.0, n)
    return TruncatedNormalPrior(mean, np.diag((0.25 * mean) ** 2), topo.heat_exchange_signs,
                                tuple(topo.heat_exchange_names))


# -- maps q -> x ---------------------------------------------------------------------

class ExactMap:
    """Newton solver as a batch map; unconverged samples come back as NaN rows."""

    def __init__(self, topo: GridTopology, cfg: nr_solver.SolverConfig | None = None):
        self.topo = topo
        self.cfg = cfg or nr_solver.SolverConfig()
        self.state_names = list(topo.layout.names)

    def predict_batch(self, Q) -> np.ndarray:
        sol = nr_solver.solve_batch(Q, self.topo, self.cfg, on_singular="nan")
        X = sol.states.copy()
        X[~sol.converged] = np.nan
        return X

    def vjp(self, Q, G) -> np.ndarray:
        X = self.predict_batch(Q)
        out = np.full(np.shape(Q), np.nan)
        for i, x in enumerate(X):
            if np.all(np.isfinite(x)):
                out[i] = G[i] @ nr_solver.state_jacobian(x, self.topo)
        return out


class LinearMap:
    """x = A q + b; a test seam with known Gaussian posteriors."""

    def __init__(self, A, b=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.zeros(self.A.shape[0]) if b is None else np.asarray(b, dtype=float)

    def predict_batch(self, Q) -> np.ndarray:
        return np.asarray(Q, dtype=float) @ self.A.T + self.b

    def vjp(self, Q, G) -> np.ndarray:
        return np.asarray(G, dtype=float) @ self.A


class IdentityMap(LinearMap):
    def __init__(self, dim: int):
        super().__init__(np.eye(dim))


# -- measurements --------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementSpec:
    """Which state entries are measured (index list) and their noise std."""

    indices: np.ndarray
    sigma: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        idx = np.atleast_1d(np.asarray(self.indices, dtype=int))
        sig = np.broadcast_to(np.asarray(self.sigma, dtype=float), idx.shape).copy()
        if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
            raise MeasurementError("measurement sigma must be positive and finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self):
        return len(self.indices)

    @classmethod
    def from_names(cls, layout: StateLayout, names, sigma) -> "MeasurementSpec":
        names = list(names)
        unknown = [n for n in names if n not in layout.index]
        if unknown:
            raise MeasurementError(f"unknown state names {unknown}")
        idx = layout.lookup(names)
        fixed = [n for n, i in zip(names, idx) if layout.fixed_mask[i]]
        if fixed:
            raise MeasurementError(f"states {fixed} are fixed by setpoints and cannot be measured")
        return cls(idx, sigma, tuple(names))

    def select(self, X) -> np.ndarray:
        return np.asarray(X)[..., self.indices]

    def synthesize(self, x_true, rng) -> np.ndarray:
        """Noisy measurement of a known state."""
        rng = np.random.default_rng(rng)
        return self.select(x_true) + self.sigma * rng.standard_normal(len(self))


def log_likelihood(spec: MeasurementSpec, m, X) -> np.ndarray:
    """Gaussian measurement log-likelihood, normalising constant dropped. NaN states give -inf."""
    with np.errstate(over="ignore"):
        r = (spec.select(X) - np.asarray(m, dtype=float)) / spec.sigma
        ll = -0.5 * np.sum(r * r, axis=-1)
    return np.where(np.isnan(ll), -np.inf, ll)


def grad_log_likelihood(spec: MeasurementSpec, m, X) -> np.ndarray:
    """d log-likelihood / dx, zero outside the measured entries."""
    X = np.asarray(X, dtype=float)
    G = np.zeros_like(X)
    G[..., spec.indices] = (np.asarray(m, dtype=float) - spec.select(X)) / spec.sigma**2
    return G


def load_measurements(path_or_doc, layout: StateLayout):
    """Measurements file: JSON list of ``{"state", "value", "sigma"}`` (optionally wrapped as
    ``{"provenance": ..., "measurements": [...]}``)."""
    doc = path_or_doc
    if not isinstance(doc, (list, dict)):
        doc = json.loads(Path(path_or_doc).read_text())
    if isinstance(doc, dict):
        doc = doc.get("measurements")
    if not isinstance(doc, list) or not doc:
        raise MeasurementError("measurements must be a non-empty list of {state, value, sigma}")
    try:
        names = [str(e["state"]) for e in doc]
        values = np.array([float(e["value"]) for e in doc])
        sigma = np.array([float(e["sigma"]) for e in doc])
    except (KeyError, TypeError, ValueError) as exc:
        raise MeasurementError(f"malformed measurement entry: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise MeasurementError("measurement values must be finite")
    return MeasurementSpec.from_names(layout, names, sigma), values


def save_measurements(path, spec: MeasurementSpec, m, provenance: dict | None = None) -> None:
    items = [{"state": n, "value": float(v), "sigma": float(s)}
             for n, v, s in zip(spec.names, m, spec.sigma)]
    doc = items if provenance is None else {"provenance": provenance, "measurements": items}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


PLANT_MEASUREMENTS = ("mdot[hp]", "T[r_hp]")


def relative_measurement_spec(topo: GridTopology, prior: TruncatedNormalPrior,
                              names=PLANT_MEASUREMENTS, rel_sigma: float = 0.01,
                              cfg: nr_solver.SolverConfig | None = None) -> MeasurementSpec:
    """Noise std as a fraction of each measured value at the prior-mean operating point."""
    state, report = nr_solver.solve(prior.q_mean, topo, cfg)
    if not report.converged:
        raise nr_solver.SolverError("solve at the prior mean did not converge")
    idx = topo.layout.lookup(names)
    return MeasurementSpec.from_names(topo.layout, names, rel_sigma * np.abs(state.values[idx]))


# -- sample sets ---------------------------------------------------------------------

@dataclass
class SampleSet:
    """Aligned rows of heat exchanges ``q`` and states ``x`` plus optional weights."""

    q: np.ndarray
    x: np.ndarray
    q_names: list[str]
    x_names: list[str]
    chain: np.ndarray | None = None
    step: np.ndarray | None = None
    weights: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        n = len(self.q)
        if len(self.x) != n:
            raise ValueError("q and x rows must align")
        self.q_names, self.x_names = list(self.q_names), list(self.x_names)
        if self.q.shape[1] != len(self.q_names) or self.x.shape[1] != len(self.x_names):
            raise ValueError("column names do not match the arrays")
        self.chain = np.zeros(n, dtype=int) if self.chain is None else np.asarray(self.chain, dtype=int)
        self.step = np.arange(n) if self.step is None else np.asarray(self.step, dtype=int)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (n,) or np.any(self.weights < 0):
                raise ValueError("weights must be one nonnegative value per row")

    def __len__(self):
        return len(self.q)

    def subset(self, idx) -> "SampleSet":
        w = None if self.weights is None else self.weights[idx]
        return SampleSet(self.q[idx], self.x[idx], self.q_names, self.x_names, self.chain[idx],
                         self.step[idx], w, dict(self.provenance))

    def save(self, path) -> None:
        """CSV ``chain,step,q_<edge>...,x_<state>...[,weight]`` plus a ``.provenance.json`` sidecar."""
        path = Path(path)
        header = ["chain", "step"] + [f"q_{n}" for n in self.q_names] + [f"x_{n}" for n in self.x_names]
        cols = [self.q, self.x]
        if self.weights is not None:
            header.append("weight")
            cols.append(self.weights[:, None])
        body = np.concatenate(cols, axis=1)
        with open(path, "w", newline="") as fh:
            fh.write("# " + canonical_json(_header_fields(self.provenance)) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for c, s, row in zip(self.chain, self.step, body):
                w.writerow([int(c), int(s)] + [repr(float(v)) for v in row])
        sidecar(path).write_text(json.dumps(self.provenance, indent=2, sort_keys=True, default=_tolist) + "\n")

    @classmethod
    def load(cls, path) -> "SampleSet":
        path = Path(path)
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("#"):
                fh.seek(0)
            header = next(csv.reader([fh.readline()]))
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if data.size == 0:
            data = np.zeros((0, len(header)))
        q_cols = [i for i, h in enumerate(header) if h.startswith("q_")]
        x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
        weights = data[:, header.index("weight")] if "weight" in header else None
        prov_path = sidecar(path)
        prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
        return cls(data[:, q_cols], data[:, x_cols], [header[i][2:] for i in q_cols],
                   [header[i][2:] for i in x_cols], data[:, 0].astype(int), data[:, 1].astype(int),
                   weights, prov)


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".provenance.json")


def _header_fields(prov: dict) -> dict:
    return {k: prov.get(k) for k in ("tool", "version", "config_hash", "seed", "sampler")}


def _tolist(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _names(model, prior, n_state):
    x_names = getattr(model, "state_names", None) or [f"x{i}" for i in range(n_state)]
    q_names = list(prior.names) if prior.names else [f"q{i}" for i in range(prior.dim)]
    return q_names, list(x_names)


# -- sampling importance resampling -----------------------------------------------------

def resample_indices(weights, n: int, rng) -> np.ndarray:
    """Multinomial resampling: ``n`` indices drawn with replacement, P(j) = w_j / sum(w)."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        raise SamplerError("all importance weights are zero: the measurement is incompatible with the prior draws")
    return np.random.default_rng(rng).choice(len(w), size=n, replace=True, p=w / total)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def prior_bank(prior: TruncatedNormalPrior, model, n: int, seed) -> SampleSet:
    """Prior draws pushed through ``model``; unsolved draws keep NaN states (zero weight later)."""
    Q = prior.sample(n, np.random.default_rng([seed, 0]))
    X = model.predict_batch(Q)
    q_names, x_names = _names(model, prior, X.shape[1])
    unsolved = int(np.sum(~np.all(np.isfinite(X), axis=1)))
    if unsolved:
        logger.warning("%d of %d prior draws did not solve; they get zero weight", unsolved, n)
    return SampleSet(Q, X, q_names, x_names, provenance={"seed": seed, "n_draws": n, "unsolved": unsolved})


def sir_resample(bank: SampleSet, spec: MeasurementSpec, m, n_out: int, seed) -> SampleSet:
    if not 1 <= n_out:
        raise ValueError("n_out must be >= 1")
    ll = log_likelihood(spec, m, bank.x)
    top = np.max(ll)
    if not np.isfinite(top):
        raise SamplerError("no prior draw has finite likelihood")
    # prior draws are already distributed as p(q), so the importance weight is the likelihood
    w = np.exp(ll - top)
    ess = effective_sample_size(w)
    idx = resample_indices(w, n_out, np.random.default_rng([seed, 1]))
    prov = dict(bank.provenance)
    prov.update({"sampler": "sir", "seed": seed, "n_out": n_out, "ess": ess})
    if ess < MIN_ESS:
        prov["warning"] = f"effective sample size {ess:.1f} < {MIN_ESS:g}: degenerate weights"
        logger.warning(prov["warning"])
    out = SampleSet(bank.q[idx], bank.x[idx], bank.q_names, bank.x_names, provenance=prov)
    return out


def sir_mc(prior: TruncatedNormalPrior, spec: MeasurementSpec, m, topo: GridTopology | None = None,
           model=None, n_draws: int = 200_000, n_out: int = 10_000, seed: int = 0,
           solver_cfg: nr_solver.SolverConfig | None = None) -> SampleSet:
    """Prior draws, exact solves (unless another ``model`` is given), likelihood weights, resampling."""
    if not n_draws >= n_out >= 1:
        raise ValueError("need n_draws >= n_out >= 1")
    if model is None:
        if topo is None:
            raise ValueError("pass a topology or a model")
        model = ExactMap(topo, solver_cfg)
    bank = prior_bank(prior, model, n_draws, seed)
    return sir_resample(bank, spec, m, n_out, seed)


# -- Metropolis-Hastings -------------------------------------------------------------------

def metropolis_accept(log_ratio, u) -> np.ndarray:
    """Accept when u < alpha = min(1, exp(log_ratio)) for u in [0, 1); NaN ratios reject."""
    log_ratio = np.nan_to_num(np.asarray(log_ratio, dtype=float), nan=-np.inf)
    return u < np.minimum(1.0, np.exp(np.minimum(log_ratio, 0.0)))


def _log_posterior(prior, spec, m, model, Q):
    X = model.predict_batch(Q)
    lp = prior.log_prior(Q)
    if spec is not None and len(spec):
        lp = lp + log_likelihood(spec, m, X)
    return np.where(np.isnan(lp), -np.inf, lp), X


def mh_chain(prior: TruncatedNormalPrior, spec: MeasurementSpec | None, m, model, q0, n_steps: int,
             proposal_cov, seed: int = 0, n_burnin: int = 0, chain_id: int = 0) -> SampleSet:
    """Random-walk Metropolis in q space with Gaussian proposals; rejections repeat the last sample."""
    q = np.asarray(q0, dtype=float).copy()
    d = len(q)
    rng = np.random.default_rng([seed, chain_id])
    total = n_burnin + n_steps
    L, _, _, _ = _psd_factors(np.asarray(proposal_cov, dtype=float).reshape(d, d))
    eps = rng.standard_normal((total, d)) @ L.T
    u = rng.random(total)
    lp, X = _log_posterior(prior, spec, m, model, q[None])
    lp, x = lp[0], X[0]
    if not np.isfinite(lp):
        raise ValueError("log-posterior at the initial point is not finite")
    out_q = np.empty((n_steps, d))
    out_x = np.empty((n_steps, len(x)))
    n_acc = 0
    for t in range(total):
        prop = q + eps[t]
        lp_new, X_new = _log_posterior(prior, spec, m, model, prop[None])
        if np.isfinite(lp_new[0]) and metropolis_accept(lp_new[0] - lp, u[t]):
            q, x, lp = prop, X_new[0], lp_new[0]
            n_acc += 1
        if t == 999 and n_acc == 0:
            raise SamplerError("the first 1000 proposals were all rejected: the proposal covariance is too large")
        if t >= n_burnin:
            out_q[t - n_burnin] = q
            out_x[t - n_burnin] = x
    q_names, x_names = _names(model, prior, out_x.shape[1])
    prov = {"sampler": "mh", "seed": seed, "chain": chain_id, "n_burnin": n_burnin,
            "acceptance": n_acc / max(total, 1)}
    return SampleSet(out_q, out_x, q_names, x_names, np.full(n_steps, chain_id), np.arange(n_steps),
                     provenance=prov)


# -- Hamiltonian Monte Carlo ------------------------------------------------------------------

@dataclass
class DualAveraging:
    """Nesterov dual averaging of log step size towards a target acceptance rate."""

    init_step: np.ndarray
    target: float = 0.75
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75

    def __post_init__(self):
        self.init_step = np.asarray(self.init_step, dtype=float)
        self.mu = np.log(10.0 * self.init_step)
        self.h_bar = np.zeros_like(self.init_step)
        self.log_step = np.log(self.init_step)
        self.log_step_bar = np.zeros_like(self.init_step)
        self.t = 0

    def update(self, accept_prob) -> np.ndarray:
        self.t += 1
        t = self.t
        eta = 1.0 / (t + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_step = self.mu - np.sqrt(t) / self.gamma * self.h_bar
        w = t ** -self.kappa
        self.log_step_bar = w * self.log_step + (1 - w) * self.log_step_bar
        return np.exp(self.log_step)

    @property
    def final_step(self) -> np.ndarray:
        return np.exp(self.log_step_bar) if self.t else self.init_step


def hmc_chains(prior: TruncatedNormalPrior, spec: MeasurementSpec | None, m, model, n_chains: int = 10,
               n_steps: int = 10_000, n_burnin: int = 20_000, seed: int = 0, target_accept: float = 0.75,
               init_step: float = 0.1, adapt_fraction: float = 0.8, q0=None) -> SampleSet:
    """Single-leapfrog HMC, chains advanced together in whitened q coordinates.

    Each chain has its own RNG stream ``default_rng([seed, chain])`` and its
    own step size, adapted by dual averaging over the first
    ``adapt_fraction`` of the burn-in and frozen afterwards. Proposals with
    zero prior density are rejected.
    """
    if n_chains < 1 or n_steps < 1 or n_burnin < 0:
        raise ValueError("need n_chains >= 1, n_steps >= 1, n_burnin >= 0")
    d = prior.dim
    scale = np.where(prior.std > 0, prior.std, 1.0)
    center = prior.q_mean
    total = n_burnin + n_steps
    n_adapt = int(adapt_fraction * n_burnin)
    rngs = [np.random.default_rng([seed, c]) for c in range(n_chains)]
    if q0 is None:
        Q = np.stack([prior.sample(1, r)[0] for r in rngs])
    else:
        Q = np.broadcast_to(np.asarray(q0, dtype=float), (n_chains, d)).copy()
    momenta = np.stack([r.standard_normal((total, d)) for r in rngs], axis=1)
    uniforms = np.stack([r.random(total) for r in rngs], axis=1)

    def potential(U):
        Qu = center + scale * U
        X = model.predict_batch(Qu)
        lp = prior.log_prior(Qu)
        gq = prior.grad_log_prior(Qu)
        if spec is not None and len(spec):
            lp = lp + log_likelihood(spec, m, X)
            gq = gq + model.vjp(Qu, grad_log_likelihood(spec, m, X))
        lp = np.where(np.isnan(lp), -np.inf, lp)
        return -lp, -gq * scale, X

    U = (Q - center) / scale
    pot, grad, X = potential(U)
    if not np.all(np.isfinite(pot)):
        raise ValueError("log-posterior at an initial point is not finite")
    adapt = DualAveraging(np.full(n_chains, init_step), target=target_accept)
    step = adapt.init_step.copy()
    out_q = np.empty((n_steps, n_chains, d))
    out_x = np.empty((n_steps, n_chains, X.shape[1]))
    accepted = np.zeros(n_chains)
    for t in range(total):
        if t == n_adapt:
            step = adapt.final_step.copy()
        p = momenta[t]
        h = step[:, None]
        p_half = p - 0.5 * h * grad
        U_new = U + h * p_half
        pot_new, grad_new, X_new = potential(U_new)
        p_new = p_half - 0.5 * h * grad_new
        with np.errstate(invalid="ignore", over="ignore"):
            log_ratio = (pot + 0.5 * np.sum(p * p, axis=1)) - (pot_new + 0.5 * np.sum(p_new * p_new, axis=1))
        log_ratio = np.where(np.isfinite(pot_new), np.nan_to_num(log_ratio, nan=-np.inf), -np.inf)
        alpha = np.minimum(1.0, np.exp(np.minimum(log_ratio, 0.0)))
        acc = uniforms[t] < alpha
        U[acc], pot[acc], grad[acc], X[acc] = U_new[acc], pot_new[acc], grad_new[acc], X_new[acc]
        if t < n_adapt:
            step = adapt.update(alpha)
        if t >= n_burnin:
            out_q[t - n_burnin] = center + scale * U
            out_x[t - n_burnin] = X
            accepted += acc
    rate = accepted / n_steps
    prov = {"sampler": "hmc", "seed": seed, "n_chains": n_chains, "n_steps": n_steps,
            "n_burnin": n_burnin, "leapfrog_steps": 1, "step_size": step.tolist(),
            "acceptance": rate.tolist(), "target_acceptance": target_accept}
    bad = [c for c in range(n_chains) if not 0.4 <= rate[c] <= 0.95]
    if bad:
        prov["warning"] = f"post-adaptation acceptance outside [0.4, 0.95] for chains {bad}"
        logger.warning(prov["warning"])
    q_names, x_names = _names(model, prior, out_x.shape[2])
    chain = np.repeat(np.arange(n_chains), n_steps)
    stepno = np.tile(np.arange(n_steps), n_chains)
    return SampleSet(out_q.transpose(1, 0, 2).reshape(-1, d),
                     out_x.transpose(1, 0, 2).reshape(n_chains * n_steps, -1),
                     q_names, x_names, chain, stepno, provenance=prov)
