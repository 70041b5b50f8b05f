"""Shared fixtures. Expensive artefacts (full-size dataset, trained surrogate,
exact prior bank) are built once and kept in the pytest cache directory."""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from dhmcmc import grid_model, inference, surrogate
from dhmcmc.provenance import config_hash, tool_version

FULL_N = 62_500
FULL_TRAIN = 50_000
BANK_DRAWS = 200_000


@pytest.fixture(scope="session")
def loop():
    return grid_model.make_loop_grid()


@pytest.fixture(scope="session")
def loop_prior(loop):
    return inference.loop_prior(loop)


@pytest.fixture(scope="session")
def plant_spec(loop, loop_prior):
    return inference.relative_measurement_spec(loop, loop_prior)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def artifact_dir(request):
    return request.config.cache.mkdir("dhmcmc-artifacts")


def _key(**cfg) -> str:
    return config_hash({"version": tool_version(), **cfg})


@pytest.fixture(scope="session")
def full_dataset(artifact_dir, loop, loop_prior):
    path = artifact_dir / f"loop-data-{_key(n=FULL_N, seed=0)}.csv"
    if path.exists():
        return surrogate.Dataset.load(path)
    ds = surrogate.generate_dataset(loop_prior, loop, FULL_N, seed=0)
    ds.save(path)
    return surrogate.Dataset.load(path)


def _net_path(artifact_dir):
    cfg = surrogate.TrainingConfig()
    return artifact_dir / f"loop-net-{_key(n=FULL_N, seed=0, train=cfg.__dict__)}.json"


@pytest.fixture(scope="session")
def trained_net(artifact_dir, loop, full_dataset):
    """Surrogate trained with the full recipe (50k train / 12.5k validation, Adam, early stopping)."""
    cfg = surrogate.TrainingConfig()
    path = _net_path(artifact_dir)
    timing = path.with_suffix(".timing.json")
    if path.exists() and timing.exists():
        return surrogate.SurrogateNet.load(path)
    train_set, val_set = full_dataset.split(FULL_TRAIN)
    t0 = time.perf_counter()
    net, history = surrogate.train(train_set, val_set, loop, cfg)
    timing.write_text(json.dumps({"train_seconds": time.perf_counter() - t0, "epochs": len(history)}))
    net.save(path)
    return net


@pytest.fixture(scope="session")
def training_seconds(trained_net, artifact_dir):
    return json.loads(_net_path(artifact_dir).with_suffix(".timing.json").read_text())["train_seconds"]


@pytest.fixture(scope="session")
def exact_bank(artifact_dir, loop, loop_prior):
    """2e5 prior draws with exact solutions, the SIR ground-truth bank."""
    path = artifact_dir / f"loop-bank-{_key(n=BANK_DRAWS, seed=0)}.csv"
    if path.exists():
        return inference.SampleSet.load(path)
    bank = inference.prior_bank(loop_prior, inference.ExactMap(loop), BANK_DRAWS, 0)
    bank.save(path)
    return inference.SampleSet.load(path)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
