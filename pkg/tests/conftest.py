import numpy as np
import pytest

from ildrive.dynamics import collect_dynamics, fit_dynamics
from ildrive.sim import World


@pytest.fixture(scope="session")
def world():
    return World.default()


@pytest.fixture(scope="session")
def driving_data(world):
    """Thirty simulated minutes of exploration driving, subsampled to 9000 rows."""
    return collect_dynamics(world, 9000, 10, np.random.default_rng(0))


@pytest.fixture(scope="session")
def driving_model(driving_data):
    return fit_dynamics(driving_data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_dynamics():
    """Small 6-state SSGP model on synthetic smooth deltas, cheap enough for kernel checks."""
    from ildrive.ssgp import DynamicsModel, SSGPHyper, fit_posterior

    rng = np.random.default_rng(21)
    n = 400
    X = np.column_stack([rng.uniform(-12, 12, n), rng.uniform(-8, 8, n), rng.uniform(-3, 3, n),
                         rng.uniform(1, 8, n), rng.normal(0, 0.3, n), rng.normal(0, 0.5, n),
                         rng.uniform(-1, 1, (n, 2))])
    dt = 0.02
    Y = np.column_stack([dt * X[:, 3] * np.cos(X[:, 2]), dt * X[:, 3] * np.sin(X[:, 2]),
                         dt * X[:, 5], dt * (2.0 * X[:, 7] - 0.25 * X[:, 3]),
                         dt * (-X[:, 4] + 0.5 * X[:, 6]), dt * (3.0 * X[:, 6] - X[:, 5])])
    ls = (np.inf, np.inf, 1.0, 3.0, 0.5, 1.0, 1.0, 1.0)
    models = [fit_posterior(X, Y[:, j], SSGPHyper(12, 0.1, 0.005, ls, periodic_dims=(2,)),
                            freq_seed=j)
              for j in range(6)]
    return DynamicsModel(models, 6, 2)


TINY_CONFIG = """\
seed: 3
collect: {n_rows: 400, subsample: 5}
ssgp: {m: 10, sweeps: 1}
ddp: {T_h: 20, max_iters: 10}
expert: {eval_rollouts: 2, eval_T: 60}
il: {n_iters: 2, samples_per_iter: 60, rollout_steps: 60, epochs: 3, eval_rollouts: 2, eval_T: 60}
"""


def run_pipeline(root, config_path):
    """Every CLI stage in order under ``root``; returns the run directories by stage."""
    from ildrive.cli import main

    d = {s: str(root / s) for s in ("data", "model", "expert", "batch", "online", "eval", "report")}
    cfg = ["--config", str(config_path)]
    steps = [
        ["collect-dynamics", *cfg, "--out", d["data"]],
        ["train-ssgp", *cfg, "--out", d["model"], "--data", d["data"]],
        ["run-expert", *cfg, "--out", d["expert"], "--model", d["model"]],
        ["train-batch", *cfg, "--out", d["batch"], "--model", d["model"]],
        ["train-online", *cfg, "--out", d["online"], "--model", d["model"],
         "--batch-run", d["batch"]],
        ["evaluate", *cfg, "--out", d["eval"], "--model", d["model"],
         "--policy", str(root / "batch" / "policy_batch.json"), "--name", "batch_again"],
        ["report", d["expert"], d["batch"], d["online"], d["eval"], "--out", d["report"]],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise RuntimeError(f"stage {argv[0]} exited with {code}")
    return d


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory, tiny_config):
    """The tiny pipeline run twice from scratch in separate directories."""
    return [run_pipeline(tmp_path_factory.mktemp(name), tiny_config) for name in ("run_a", "run_b")]


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; the lines are repeated at the end."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
