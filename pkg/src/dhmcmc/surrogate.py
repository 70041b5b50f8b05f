"""Fully connected ReLU network approximating the solver map q -> x.

Plain numpy: forward pass, manual backprop, Adam. The network predicts the
FREE state entries only; FIXED entries are reinserted from the setpoints.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nr_solver
from .grid_model import GridTopology
from .inference import TruncatedNormalPrior, sidecar
from .provenance import canonical_json, config_hash

logger = logging.getLogger(__name__)

HIDDEN = (100, 250, 250)
INPUT_MARGIN = 0.01
MAX_REDRAW_FRACTION = 0.01


class TrainingError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


class DataGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    n_train: int = 50_000
    n_val: int = 12_500
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 20
    max_epochs: int = 1000
    w_T: float = 1.0
    w_mdot: float = 500.0
    w_p: float = 1.0
    w_Tend: float = 1.0
    seed: int = 0
    hidden: tuple[int, ...] = HIDDEN

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min(self.n_train, self.n_val, self.batch_size, self.patience, self.max_epochs) < 1:
            raise ValueError("TrainingConfig sizes must be positive")
        if min(self.w_T, self.w_mdot, self.w_p, self.w_Tend, self.lr) <= 0:
            raise ValueError("TrainingConfig weights and learning rate must be > 0")

    def group_weights(self) -> dict[str, float]:
        return {"T": self.w_T, "mdot": self.w_mdot, "p": self.w_p, "Tend": self.w_Tend}


# -- datasets --------------------------------------------------------------------------

@dataclass
class Dataset:
    """Paired heat exchanges and solved full states."""

    q: np.ndarray
    x: np.ndarray
    q_names: list[str]
    x_names: list[str]
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.q)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        a = Dataset(self.q[:n_first], self.x[:n_first], self.q_names, self.x_names, self.provenance)
        b = Dataset(self.q[n_first:], self.x[n_first:], self.q_names, self.x_names, self.provenance)
        return a, b

    def save(self, path) -> None:
        """CSV with header ``q_<edge>...,x_<state>...``; provenance in a sidecar and a ``#`` line."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write("# " + canonical_json({k: self.provenance.get(k) for k in
                                            ("tool", "version", "config_hash", "seed")}) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"q_{n}" for n in self.q_names] + [f"x_{n}" for n in self.x_names])
            for row in np.concatenate([self.q, self.x], axis=1):
                w.writerow([repr(float(v)) for v in row])
        sidecar(path).write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("#"):
                fh.seek(0)
            header = next(csv.reader([fh.readline()]))
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        nq = sum(h.startswith("q_") for h in header)
        prov = json.loads(sidecar(path).read_text()) if sidecar(path).exists() else {}
        return cls(data[:, :nq], data[:, nq:], [h[2:] for h in header[:nq]],
                   [h[2:] for h in header[nq:]], prov)


def generate_dataset(prior: TruncatedNormalPrior, topo: GridTopology, n: int, seed: int = 0,
                     solver_cfg: nr_solver.SolverConfig | None = None) -> Dataset:
    """``n`` prior draws with their exact solutions; unsolved draws are replaced by fresh ones."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = solver_cfg or nr_solver.SolverConfig()
    prior.check_topology(topo)
    rng = np.random.default_rng([seed, 2])
    qs, xs, redrawn, need = [], [], 0, n
    while need:
        Q = prior.sample(need, rng)
        sol = nr_solver.solve_batch(Q, topo, cfg, on_singular="nan")
        ok = sol.converged
        qs.append(Q[ok])
        xs.append(sol.states[ok])
        bad = int(need - ok.sum())
        if bad:
            logger.info("re-drawing %d unsolved samples", bad)
        redrawn += bad
        need = bad
        if redrawn > MAX_REDRAW_FRACTION * n + 1:
            raise DataGenerationError(
                f"{redrawn} of {n} draws failed to solve (> {MAX_REDRAW_FRACTION:.0%}): "
                "the prior reaches states the solver cannot handle")
    prov = {"prior": prior.to_dict(), "seed": seed, "solver": asdict(cfg), "n": n, "redrawn": redrawn}
    return Dataset(np.concatenate(qs), np.concatenate(xs), topo.heat_exchange_names,
                   list(topo.layout.names), prov)


# -- network ------------------------------------------------------------------------------

@dataclass
class SurrogateNet:
    """ReLU MLP on min/max-scaled inputs with standardised outputs over the FREE state entries."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_min: np.ndarray
    in_max: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    free_idx: np.ndarray
    fixed_idx: np.ndarray
    fixed_values: np.ndarray
    state_names: list[str]
    q_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for name in ("in_min", "in_max", "out_mean", "out_std", "fixed_values"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.free_idx = np.asarray(self.free_idx, dtype=int)
        self.fixed_idx = np.asarray(self.fixed_idx, dtype=int)
        self.state_names = list(self.state_names)
        self.q_names = list(self.q_names)
        self._in_range = self.in_max - self.in_min

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_state(self) -> int:
        return len(self.free_idx) + len(self.fixed_idx)

    def _forward(self, Z):
        """Pre-activations per layer for scaled inputs Z; the last entry is the linear output."""
        pre = []
        h = Z
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W.T + b
            pre.append(a)
            h = np.maximum(a, 0.0) if k < len(self.weights) - 1 else a
        return pre

    def scale_input(self, Q) -> np.ndarray:
        return (np.asarray(Q, dtype=float) - self.in_min) / self._in_range

    def _output_rowwise(self, Z):
        # one matrix-vector product per row: BLAS matrix-matrix kernels round a row
        # differently depending on its position in the batch
        out = np.empty((len(Z), self.weights[-1].shape[0]))
        last = len(self.weights) - 1
        for r, h in enumerate(Z):
            for k, (W, b) in enumerate(zip(self.weights, self.biases)):
                h = W @ h + b
                if k < last:
                    h = np.maximum(h, 0.0)
            out[r] = h
        return out

    def predict_free(self, Q) -> np.ndarray:
        """Free-state predictions; each row is bitwise independent of the rest of the batch."""
        out = self._output_rowwise(self.scale_input(np.atleast_2d(Q)))
        return self.out_mean + self.out_std * out

    def predict_batch(self, Q) -> np.ndarray:
        """Full state rows for each row of ``Q``: network output plus setpoint entries."""
        F = self.predict_free(Q)
        X = np.empty((len(F), self.n_state))
        X[:, self.free_idx] = F
        X[:, self.fixed_idx] = self.fixed_values
        return X

    def predict(self, q) -> np.ndarray:
        return self.predict_batch(np.asarray(q, dtype=float)[None])[0]

    def _backward_input(self, pre, G_out):
        """Backprop a cotangent on the (unscaled-network) output down to the scaled input."""
        g = G_out
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                g = g * (pre[k] > 0)
            g = g @ self.weights[k]
        return g

    def vjp(self, Q, G) -> np.ndarray:
        """``G @ dX/dQ`` for full-state cotangents ``G`` (rows aligned with ``Q``)."""
        Q = np.atleast_2d(Q)
        pre = self._forward(self.scale_input(Q))
        g = np.asarray(G, dtype=float)[:, self.free_idx] * self.out_std
        return self._backward_input(pre, g) / self._in_range

    def grad_input(self, q) -> np.ndarray:
        """d(FREE state)/dq at ``q``, shape (n_free, n_q); exact for the piecewise-linear net."""
        q = np.asarray(q, dtype=float)
        pre = self._forward(self.scale_input(q[None]))
        J = np.diag(self.out_std)
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                J = J * (pre[k][0] > 0)
            J = J @ self.weights[k]
        return J / self._in_range

    def min_preactivation_margin(self, q) -> float:
        """Smallest |hidden pre-activation| at ``q``; small values mean a ReLU kink is near."""
        pre = self._forward(self.scale_input(np.asarray(q, dtype=float)[None]))
        return float(min(np.abs(a).min() for a in pre[:-1])) if len(pre) > 1 else np.inf

    # -- persistence --

    def to_dict(self) -> dict:
        return {
            "format": "dhmcmc-surrogate-1",
            "layer_sizes": self.layer_sizes,
            "activations": ["relu"] * (len(self.weights) - 1) + ["linear"],
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_scaler": {"min": self.in_min.tolist(), "max": self.in_max.tolist()},
            "output_scaler": {"mean": self.out_mean.tolist(), "std": self.out_std.tolist()},
            "layout": {"free_idx": self.free_idx.tolist(), "fixed_idx": self.fixed_idx.tolist(),
                       "fixed_values": self.fixed_values.tolist(), "state_names": self.state_names,
                       "q_names": self.q_names},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SurrogateNet":
        lay = doc["layout"]
        return cls(doc["weights"], doc["biases"], doc["input_scaler"]["min"], doc["input_scaler"]["max"],
                   doc["output_scaler"]["mean"], doc["output_scaler"]["std"], lay["free_idx"],
                   lay["fixed_idx"], lay["fixed_values"], lay["state_names"], lay["q_names"],
                   doc.get("meta", {}))

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "SurrogateNet":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def check_topology(self, topo: GridTopology) -> None:
        if self.state_names != list(topo.layout.names) or self.q_names != topo.heat_exchange_names:
            raise ValueError("surrogate was trained on a different grid layout")


# -- training ----------------------------------------------------------------------------

def _init_params(sizes, rng):
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _fit_scalers(q, f):
    lo, hi = q.min(axis=0), q.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    in_min, in_max = lo - INPUT_MARGIN * span, hi + INPUT_MARGIN * span
    mean = f.mean(axis=0)
    std = f.std(axis=0)
    return in_min, in_max, mean, np.where(std > 0, std, 1.0)


def loss_coefficients(layout_names, free_idx, out_std, cfg: TrainingConfig) -> np.ndarray:
    """Per-output weight so the loss on standardised outputs equals the weighted loss in physical units."""
    w = cfg.group_weights()
    groups = [layout_names[i].split("[", 1)[0] for i in free_idx]
    return np.array([w[g] for g in groups]) * out_std**2


def _weighted_loss(net_out, target, coef):
    r = net_out - target
    return float(np.mean(np.sum(coef * r * r, axis=1)))


def train(train_set: Dataset, val_set: Dataset, topo: GridTopology, cfg: TrainingConfig | None = None,
          log_every: int = 1, progress=None) -> tuple[SurrogateNet, list[dict]]:
    """Adam on the weighted squared error with early stopping on the validation loss.

    Returns the network with the lowest validation loss and the epoch history.
    """
    cfg = cfg or TrainingConfig()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    lay = topo.layout
    if list(train_set.x_names) != list(lay.names):
        raise ValueError("dataset columns do not match the topology layout")
    free = lay.free_idx
    Ftr, Fva = train_set.x[:, free], val_set.x[:, free]
    in_min, in_max, out_mean, out_std = _fit_scalers(train_set.q, Ftr)
    coef = loss_coefficients(lay.names, free, out_std, cfg)
    Ztr = (train_set.q - in_min) / (in_max - in_min)
    Zva = (val_set.q - in_min) / (in_max - in_min)
    Ytr = (Ftr - out_mean) / out_std
    Yva = (Fva - out_mean) / out_std

    rng = np.random.default_rng([cfg.seed, 1])
    sizes = [train_set.q.shape[1], *cfg.hidden, len(free)]
    W0, b0 = _init_params(sizes, rng)
    # one flat buffer for all parameters (and one for gradients) so an Adam
    # step is a handful of vector operations instead of a few per layer
    flat = np.concatenate([a.ravel() for a in W0 + b0])
    grad = np.zeros_like(flat)
    views, gviews, off = [], [], 0
    for a in W0 + b0:
        views.append(flat[off:off + a.size].reshape(a.shape))
        gviews.append(grad[off:off + a.size].reshape(a.shape))
        off += a.size
    nl = len(W0)
    W, b = views[:nl], views[nl:]
    gW, gb = gviews[:nl], gviews[nl:]
    m1 = np.zeros_like(flat)
    m2 = np.zeros_like(flat)
    tmp = np.empty_like(flat)
    net = SurrogateNet(W, b, in_min, in_max, out_mean, out_std, free, lay.fixed_idx, lay.fixed_values,
                       list(lay.names), topo.heat_exchange_names)
    n = len(Ztr)
    best, best_epoch, best_flat = np.inf, -1, None
    history = []
    step = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = Ztr[idx], Ytr[idx]
            acts = [x]
            pre = []
            h = x
            for k in range(nl):
                a = h @ W[k].T + b[k]
                pre.append(a)
                h = np.maximum(a, 0.0) if k < nl - 1 else a
                acts.append(h)
            r = h - y
            bs = len(idx)
            total += float(np.sum(coef * r * r))
            g = (2.0 / bs) * coef * r
            for k in range(nl - 1, -1, -1):
                if k < nl - 1:
                    g = g * (pre[k] > 0)
                np.matmul(g.T, acts[k], out=gW[k])
                np.sum(g, axis=0, out=gb[k])
                if k:
                    g = g @ W[k]
            step += 1
            c1 = 1 - cfg.beta1**step
            c2 = 1 - cfg.beta2**step
            m1 *= cfg.beta1
            m1 += (1 - cfg.beta1) * grad
            np.multiply(grad, grad, out=tmp)
            m2 *= cfg.beta2
            m2 += (1 - cfg.beta2) * tmp
            np.divide(m2, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += cfg.adam_eps
            np.divide(m1, tmp, out=tmp)
            flat -= (cfg.lr / c1) * tmp
        train_loss = total / n
        val_loss = _weighted_loss(net._forward(Zva)[-1], Yva, coef)
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "seconds": time.perf_counter() - t0}
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(f"loss diverged at epoch {epoch}; last finite epoch: "
                                f"{history[-1] if history else None}", history)
        history.append(rec)
        if progress is not None and epoch % log_every == 0:
            progress(rec)
        if val_loss < best:
            best, best_epoch = val_loss, epoch
            best_flat = flat.copy()
        elif epoch - best_epoch >= cfg.patience:
            break
    flat[:] = best_flat
    net.weights = [w.copy() for w in W]
    net.biases = [v.copy() for v in b]
    net.meta = {
        "training": {k: v for k, v in asdict(cfg).items()},
        "config_hash": config_hash(asdict(cfg)),
        "best_epoch": best_epoch,
        "best_val_loss": best,
        "epochs_run": len(history),
        "data_provenance": train_set.provenance,
    }
    return net, history
