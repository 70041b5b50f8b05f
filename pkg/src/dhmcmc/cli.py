"""Command-line entry point: ``dhmcmc <subcommand> ...``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import grid_model, inference, lse_baseline, metrics, nr_solver, surrogate
from . import dynamics_bound
from .inference import SampleSet
from .provenance import make_provenance

logger = logging.getLogger("dhmcmc")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
NUMERICAL_ERRORS = (nr_solver.SolverError, inference.SamplerError, surrogate.TrainingError,
                    surrogate.DataGenerationError, FloatingPointError, np.linalg.LinAlgError)
INVALID_ERRORS = (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError, yaml.YAMLError)
# not part of the reproducibility hash
_VOLATILE = {"config", "threads", "log_level", "func", "command"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def example_measurements_path() -> Path:
    return Path(str(resources.files("dhmcmc") / "data" / "loop_measurements.json"))


# -- helpers -------------------------------------------------------------------------------

def _config_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _VOLATILE}


def _provenance(args, **extra) -> dict:
    return make_provenance(_config_dict(args), getattr(args, "seed", None), command=args.command, **extra)


def _apply_config(args, known: set) -> None:
    """Values from ``--config`` (YAML or JSON, optionally sectioned per subcommand) override flags."""
    if not args.config:
        return
    doc = yaml.safe_load(Path(args.config).read_text()) or {}
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a mapping")
    if isinstance(doc.get(args.command), dict):
        doc = {**{k: v for k, v in doc.items() if not isinstance(v, dict)}, **doc[args.command]}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in _VOLATILE:
            raise ValueError(f"unknown config key {key!r} for {args.command}")
        setattr(args, dest, value)


def _load_grid(path) -> grid_model.GridTopology:
    return grid_model.load_topology(path)


def _load_prior(path, topo) -> inference.TruncatedNormalPrior:
    prior = inference.load_prior(path)
    prior.check_topology(topo)
    return prior


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_tolist) + "\n")


def _tolist(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _load_model(path, topo) -> surrogate.SurrogateNet:
    net = surrogate.SurrogateNet.load(path)
    net.check_topology(topo)
    return net


def _load_candidate(path):
    """Sample CSV or a Gaussian posterior JSON."""
    path = Path(path)
    if path.suffix == ".json":
        return lse_baseline.GaussianStatePosterior.load(path)
    return SampleSet.load(path)


# -- subcommands -----------------------------------------------------------------------------

def cmd_make_grid(args) -> int:
    if args.topology == "loop":
        topo = grid_model.make_loop_grid()
        prior = inference.loop_prior(topo)
    else:
        topo = grid_model.make_tree_grid(args.n_demands, args.seed)
        prior = inference.default_tree_prior(topo, args.seed)
    prov = _provenance(args)
    grid_model.save_topology(topo, args.out, prov)
    if args.prior_out:
        inference.save_prior(prior, args.prior_out, prov)
    if args.measurements_out:
        spec = inference.relative_measurement_spec(topo, prior, rel_sigma=args.rel_sigma)
        state, _ = nr_solver.solve(prior.q_mean, topo)
        inference.save_measurements(args.measurements_out, spec, spec.select(state.values), prov)
    print(f"wrote {args.out}: {len(topo.nodes)} nodes, {len(topo.passive_edges)} pipes, "
          f"{len(topo.demand_edges)} demands, {len(topo.source_edges)} sources")
    return EXIT_OK


def cmd_generate_data(args) -> int:
    topo = _load_grid(args.grid)
    prior = _load_prior(args.prior, topo)
    ds = surrogate.generate_dataset(prior, topo, args.n, args.seed, nr_solver.SolverConfig(psi_tol=args.psi_tol))
    ds.provenance.update(_provenance(args))
    ds.save(args.out)
    print(f"wrote {args.out}: {len(ds)} samples ({ds.provenance['redrawn']} re-drawn)")
    return EXIT_OK


def _table1(net, data, topo) -> dict:
    X = net.predict_batch(data.q)
    return {"psi": metrics.psi(X, data.q, topo), "groups": metrics.mae_mape(X, data.x, topo.layout)}


def cmd_train(args) -> int:
    topo = _load_grid(args.grid)
    data = surrogate.Dataset.load(args.data)
    n_val = int(round(args.val_frac * len(data)))
    if not 0 < n_val < len(data):
        raise ValueError("--val-frac leaves an empty training or validation set")
    train_set, val_set = data.split(len(data) - n_val)
    cfg = surrogate.TrainingConfig(n_train=len(train_set), n_val=len(val_set), batch_size=args.batch_size,
                                   patience=args.patience, max_epochs=args.max_epochs, seed=args.seed)

    def log(rec):
        print(f"epoch {rec['epoch']:4d}  train {rec['train_loss']:.5g}  val {rec['val_loss']:.5g}", flush=True)

    net, _history = surrogate.train(train_set, val_set, topo, cfg, progress=log)
    stats = _table1(net, val_set, topo)
    net.meta["provenance"] = _provenance(args)
    net.meta["validation_metrics"] = stats
    net.save(args.out)
    print(f"best epoch {net.meta['best_epoch']}, validation psi {stats['psi']:.4g}")
    for g, v in stats["groups"].items():
        unit_scale = 1000.0 if g == "p" else 1.0
        print(f"  {g:5s} MAE {unit_scale * v['mae']:.4g}{' mbar' if g == 'p' else ''}  MAPE {v['mape']:.3g} %")
    return EXIT_OK


def _estimate(method, args, topo, prior, spec, m, net=None, seed=None, bank=None):
    seed = args.seed if seed is None else seed
    if method == "lse":
        return lse_baseline.lse_posterior(prior, spec, m, topo)
    if method == "sir":
        if bank is not None:
            return inference.sir_resample(bank, spec, m, args.n_out, seed)
        return inference.sir_mc(prior, spec, m, topo, n_draws=args.n_draws, n_out=args.n_out, seed=seed)
    model = net if net is not None else inference.ExactMap(topo)
    if method == "hmc":
        if net is None:
            raise ValueError("--method hmc needs --model")
        return inference.hmc_chains(prior, spec, m, model, args.chains, args.steps, args.burnin, seed)
    if method == "mh":
        cov = args.proposal_scale**2 * np.diag(prior.signs) @ prior.cov @ np.diag(prior.signs)
        sets = []
        rng = np.random.default_rng([seed, 5])
        for c in range(args.chains):
            q0 = prior.sample(1, rng)[0]
            sets.append(inference.mh_chain(prior, spec, m, model, q0, args.steps, cov, seed, args.burnin, c))
        out = SampleSet(np.concatenate([s.q for s in sets]), np.concatenate([s.x for s in sets]),
                        sets[0].q_names, sets[0].x_names, np.concatenate([s.chain for s in sets]),
                        np.concatenate([s.step for s in sets]),
                        provenance={"sampler": "mh", "seed": seed,
                                    "acceptance": [s.provenance["acceptance"] for s in sets]})
        return out
    raise ValueError(f"unknown method {method!r}")


def cmd_estimate(args) -> int:
    topo = _load_grid(args.grid)
    prior = _load_prior(args.prior, topo)
    spec, m = inference.load_measurements(args.measurements, topo.layout)
    net = _load_model(args.model, topo) if args.model else None
    result = _estimate(args.method, args, topo, prior, spec, m, net)
    prov = _provenance(args)
    if isinstance(result, lse_baseline.GaussianStatePosterior):
        result.save(args.out, prov)
    else:
        result.provenance = {**prov, **result.provenance, "seed": args.seed}
        result.save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.replications:
        return _evaluate_replicated(args)
    if not (args.truth and args.candidate and args.grid):
        raise ValueError("evaluate needs --truth, --candidate and --grid (or --replications)")
    topo = _load_grid(args.grid)
    truth = SampleSet.load(args.truth)
    cand = _load_candidate(args.candidate)
    cand_x = cand.sample(len(truth), args.seed) if hasattr(cand, "sample") else cand.x
    res = metrics.EvaluationResult({"candidate": [metrics.compare_posteriors(cand_x, truth.x, topo.layout, args.seed)]},
                                   {"candidate": []}, {"states": "free"})
    report = metrics.posterior_report(res, _provenance(args))
    metrics.save_report(report, args.out, Path(args.out).with_suffix(".md"))
    print(metrics.report_markdown(report))
    return EXIT_OK


def _evaluate_replicated(args) -> int:
    topo = _load_grid(args.grid)
    prior = _load_prior(args.prior, topo)
    spec, _ = inference.load_measurements(args.measurements, topo.layout)
    net = _load_model(args.model, topo) if args.model else None
    reps = metrics.make_replications(prior, topo, spec, args.replications, args.seed)
    print(f"solving {args.n_draws} prior draws for the ground truth", flush=True)
    bank = inference.prior_bank(prior, inference.ExactMap(topo), args.n_draws, args.seed)
    estimators = {"LSE": lambda r: _estimate("lse", args, topo, prior, spec, r.m)}
    if net is not None:
        estimators["MCMC-DNN"] = lambda r: _estimate("hmc", args, topo, prior, spec, r.m, net, r.seed)
    res = metrics.evaluate_posteriors(
        reps, lambda r: _estimate("sir", args, topo, prior, spec, r.m, seed=r.seed, bank=bank),
        estimators, topo.layout, n_gaussian=args.n_out, seed=args.seed,
        progress=lambda i: print(f"replication {i + 1}/{len(reps)}", flush=True))
    res.notes["ground_truth"] = f"SIR on one bank of {args.n_draws} solved prior draws, resampled per replication"
    report = metrics.posterior_report(res, _provenance(args))
    metrics.save_report(report, args.out, Path(args.out).with_suffix(".md"))
    print(metrics.report_markdown(report))
    return EXIT_OK


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return time.perf_counter() - t0, out


def run_benchmark(topo, prior, net, n: int, seed: int, loop_nr: bool = True) -> dict:
    """Seconds to compute ``n`` states with each method (wall clock on this machine)."""
    Q = prior.sample(n, np.random.default_rng([seed, 6]))
    tight, loose = nr_solver.SolverConfig(), nr_solver.LOOSE
    rows = {}
    if loop_nr:
        rows["NR (psi<=1e-5), per sample"] = _timed(lambda: [nr_solver.solve(q, topo, tight) for q in Q])[0]
        rows["NR (psi<=1e1), per sample"] = _timed(lambda: [nr_solver.solve(q, topo, loose) for q in Q])[0]
    rows["NR (psi<=1e-5), batched"] = _timed(lambda: nr_solver.solve_batch(Q, topo, tight))[0]
    rows["NR (psi<=1e1), batched"] = _timed(lambda: nr_solver.solve_batch(Q, topo, loose))[0]
    if net is not None:
        rows["DNN single pass"] = _timed(lambda: [net.predict(q) for q in Q])[0]
        rows["DNN batch"] = _timed(lambda: net.predict_batch(Q))[0]
    return rows


def cmd_benchmark(args) -> int:
    topo = _load_grid(args.grid)
    prior = _load_prior(args.prior, topo)
    net = _load_model(args.model, topo) if args.model else None
    rows = run_benchmark(topo, prior, net, args.n, args.seed, not args.skip_loop)
    doc = {"provenance": _provenance(args), "n_states": args.n, "seconds": rows}
    if net is not None and "NR (psi<=1e1), per sample" in rows:
        doc["speedup_batch_vs_nr_loose"] = rows["NR (psi<=1e1), per sample"] / rows["DNN batch"]
    _write_json(args.out, doc)
    print(f"| method | time for {args.n} states [s] |\n|---|---|")
    for k, v in rows.items():
        print(f"| {k} | {v:.4g} |")
    return EXIT_OK


def cmd_bound(args) -> int:
    topo = _load_grid(args.grid)
    prior = _load_prior(args.prior, topo)
    scales = [float(s) for s in str(args.scale).split(",")]
    exp = dynamics_bound.bound_experiment(topo, prior, scales, args.samples, args.seed,
                                          rho=args.rho, area=args.area)
    doc = {"provenance": _provenance(args), **exp.summary()}
    _write_json(args.out, doc)
    Path(args.out).with_suffix(".md").write_text(exp.markdown())
    print(exp.markdown())
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="YAML/JSON file whose values override the flags")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    common.add_argument("--log-level", default="WARNING")

    p = Parser(prog="dhmcmc", description="Probabilistic state estimation for district heating grids.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("make-grid", parents=[common], help="write the ring grid or a synthetic tree")
    s.add_argument("--topology", choices=["loop", "tree"], required=True)
    s.add_argument("--n-demands", type=int, default=11)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--prior-out", help="also write the matching demand prior")
    s.add_argument("--measurements-out", help="also write plant measurements at the prior mean")
    s.add_argument("--rel-sigma", type=float, default=0.01)
    s.set_defaults(func=cmd_make_grid)

    s = sub.add_parser("generate-data", parents=[common], help="prior draws with exact solutions")
    s.add_argument("--grid", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--n", type=int, default=62_500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--psi-tol", type=float, default=1e-5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate_data)

    s = sub.add_parser("train", parents=[common], help="fit the surrogate network")
    s.add_argument("--grid", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--val-frac", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--patience", type=int, default=20)
    s.add_argument("--max-epochs", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("estimate", parents=[common], help="posterior samples (or Gaussian) for one measurement")
    s.add_argument("--method", choices=["sir", "mh", "hmc", "lse"], required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--measurements", required=True)
    s.add_argument("--model")
    s.add_argument("--chains", type=int, default=10)
    s.add_argument("--steps", type=int, default=10_000)
    s.add_argument("--burnin", type=int, default=20_000)
    s.add_argument("--n-draws", type=int, default=200_000)
    s.add_argument("--n-out", type=int, default=10_000)
    s.add_argument("--proposal-scale", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", parents=[common], help="compare posteriors (one pair, or replicated table)")
    s.add_argument("--truth")
    s.add_argument("--candidate")
    s.add_argument("--grid")
    s.add_argument("--prior")
    s.add_argument("--measurements")
    s.add_argument("--model")
    s.add_argument("--replications", type=int, default=0)
    s.add_argument("--n-draws", type=int, default=200_000)
    s.add_argument("--n-out", type=int, default=10_000)
    s.add_argument("--chains", type=int, default=10)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--burnin", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", parents=[common], help="timing of solver vs surrogate")
    s.add_argument("--grid", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--model")
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--skip-loop", action="store_true", help="skip the per-sample solver loops")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("bound", parents=[common], help="steady-state error bound after a load step")
    s.add_argument("--grid", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--scale", default="0.7,1.3")
    s.add_argument("--samples", type=int, default=50)
    s.add_argument("--rho", type=float, default=dynamics_bound.WATER_DENSITY)
    s.add_argument("--area", type=float, default=dynamics_bound.DEFAULT_AREA)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bound)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, set(vars(args)))
    except UsageError as exc:
        print(f"dhmcmc: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except INVALID_ERRORS as exc:
        print(f"dhmcmc: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or os.cpu_count() or 1
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"dhmcmc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except INVALID_ERRORS as exc:
        print(f"dhmcmc: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
