"""``ildrive`` command line: reproducible pipeline stages from dynamics data to the metrics table."""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import config as C
from .ddp import MPCExpert
from .dynamics import TransitionData, collect_dynamics, fit_dynamics
from .il import (TABLE_COLUMNS, CollectionError, EvalMetrics, ImitationDataset, best_iteration,
                 check_equal_data, evaluate_policy, run_batch_il, run_dagger, write_metrics_csv)
from .policy import MLPPolicy, PolicyParams
from .sim.world import rollout
from .ssgp import DynamicsModel

log = logging.getLogger("ildrive")

MANIFEST = "manifest.json"


class StageError(RuntimeError):
    """Missing artifact, hash mismatch or other pipeline failure."""


# --------------------------------------------------------------------------
# Run directories
# --------------------------------------------------------------------------

def _prepare(out, cfg: dict, stage: str) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(C.dump(cfg))
    except OSError as exc:
        raise StageError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _finish(out: Path, cfg: dict, stage: str, inputs: dict, outputs, extra: dict | None = None):
    manifest = {
        "stage": stage,
        "seed": cfg["seed"],
        "config_hash": C.content_hash(cfg),
        "section_hashes": C.section_hashes(cfg, stage),
        "inputs": inputs,
        "outputs": {name: C.file_hash(out / name) for name in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _upstream(run_dir, artifact: str, cfg: dict) -> tuple[Path, str]:
    """Locate ``artifact`` in an upstream run and check it was produced under the same config."""
    run_dir = Path(run_dir)
    path = run_dir / artifact
    if not path.exists():
        raise StageError(f"missing upstream artifact: {path}")
    mpath = run_dir / MANIFEST
    if not mpath.exists():
        raise StageError(f"missing upstream artifact: {mpath}")
    manifest = json.loads(mpath.read_text())
    digest = C.file_hash(path)
    if manifest["outputs"].get(artifact) != digest:
        raise StageError(f"{path} does not match the hash recorded in {mpath}")
    for name, h in manifest["section_hashes"].items():
        if C.content_hash(cfg[name]) != h:
            raise StageError(f"config hash mismatch in section {name!r} between {run_dir} "
                             f"(stage {manifest['stage']}) and the current config")
    return path, digest


def _expert(cfg: dict, model_dir):
    path, digest = _upstream(model_dir, "model.json", cfg)
    world = C.build_world(cfg)
    dyn = DynamicsModel.load(path)
    return world, MPCExpert(dyn, world.weights, world.track_model, C.ddp_config(cfg)), digest


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                          default=None, help="YAML experiment config (defaults if omitted).")
out_opt = click.option("--out", required=True, type=click.Path(file_okay=False),
                       help="Run directory to write.")
seed_opt = click.option("--seed", type=int, default=None, help="Override the config seed.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Imitation-learning driving lab: dynamics data, SSGP, MPC expert, batch and online IL."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("collect-dynamics")
@config_opt
@out_opt
@seed_opt
@click.option("--rows", type=int, default=None, help="Override collect.n_rows.")
def collect_dynamics_cmd(config_path, out, seed, rows):
    """Drive the scripted explorer and write (state, action, next_state) rows."""
    cfg = C.load(config_path, seed)
    if rows is not None:
        cfg["collect"]["n_rows"] = rows
    out = _prepare(out, cfg, "collect-dynamics")
    world = C.build_world(cfg)
    data = collect_dynamics(world, int(cfg["collect"]["n_rows"]), int(cfg["collect"]["subsample"]),
                            C.substream(cfg["seed"], "world"))
    data.to_csv(out / "dynamics.csv")
    _finish(out, cfg, "collect-dynamics", {}, ["dynamics.csv"])
    click.echo(str(out / "dynamics.csv"))


@cli.command("train-ssgp")
@config_opt
@out_opt
@seed_opt
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False),
              help="Run directory of collect-dynamics.")
def train_ssgp_cmd(config_path, out, seed, data_dir):
    """Fit one SSGP per state dimension to the collected transitions."""
    cfg = C.load(config_path, seed)
    path, digest = _upstream(data_dir, "dynamics.csv", cfg)
    out = _prepare(out, cfg, "train-ssgp")
    data = TransitionData.from_csv(path)
    fit = C.fit_config(cfg)
    fit = type(fit)(**{**fit.__dict__, "freq_seed": C.substream_seed(cfg["seed"], "freqs")})
    model = fit_dynamics(data, fit)
    model.save(out / "model.json")
    _finish(out, cfg, "train-ssgp", {"dynamics.csv": digest}, ["model.json"])
    click.echo(str(out / "model.json"))


@cli.command("run-expert")
@config_opt
@out_opt
@seed_opt
@click.option("--model", "model_dir", required=True, type=click.Path(file_okay=False),
              help="Run directory of train-ssgp.")
def run_expert_cmd(config_path, out, seed, model_dir):
    """Evaluate the MPC expert on its own and log each rollout."""
    cfg = C.load(config_path, seed)
    world, expert, digest = _expert(cfg, model_dir)
    out = _prepare(out, cfg, "run-expert")
    ex = cfg["expert"]
    rngs = C.substream(cfg["seed"], "expert-eval").spawn(int(ex["eval_rollouts"]))
    rows, names = [], []
    for k, r in enumerate(rngs):
        tr = rollout(None, expert, 1.0, int(ex["eval_T"]), world, r, label=True)
        name = f"trajectory_{k}.csv"
        tr.to_csv(out / name)
        names.append(name)
        vx = np.array([s.vx for s in tr.states]) if len(tr) else np.zeros(1)
        rows.append((vx.mean(), vx.max(), tr.completion_ratio))
    m = np.mean(rows, axis=0)
    metrics = EvalMetrics(float(m[0]), float(m[1]), float(m[2]), 0.0, 0.0, len(rngs))
    write_metrics_csv([metrics.row("expert", "-")], out / "metrics.csv")
    _finish(out, cfg, "run-expert", {"model.json": digest}, names + ["metrics.csv"],
            {"degraded_solves": expert.n_degraded, "expert_calls": expert.n_calls})
    click.echo(f"completion_ratio={metrics.completion_ratio!r} avg_speed={metrics.avg_speed!r}")


def _save_run(out: Path, results, dataset: ImitationDataset, training_data) -> list:
    names = ["dataset.csv", "metrics.csv"]
    dataset.to_csv(out / "dataset.csv")
    rows = []
    for r in results:
        r.params.save(out / f"policy_{r.name}.json")
        log_name = f"train_log_{r.name}.csv"
        with (out / log_name).open("w") as fh:
            fh.write("epoch,mean_loss\n")
            for k, v in enumerate(r.epoch_losses):
                fh.write(f"{k},{v!r}\n")
        names += [f"policy_{r.name}.json", log_name]
        if r.metrics is not None:
            rows.append(r.metrics.row(r.name, training_data(r)))
    write_metrics_csv(rows, out / "metrics.csv")
    return names


@cli.command("train-batch")
@config_opt
@out_opt
@seed_opt
@click.option("--model", "model_dir", required=True, type=click.Path(file_okay=False))
def train_batch_cmd(config_path, out, seed, model_dir):
    """Batch IL: expert-only data, equal in size to the online run's total."""
    cfg = C.load(config_path, seed)
    world, expert, digest = _expert(cfg, model_dir)
    out = _prepare(out, cfg, "train-batch")
    il = cfg["il"]
    n = int(il["samples_per_iter"]) * (int(il["n_iters"]) + 1)
    try:
        result, data = run_batch_il(expert, world, n, C.train_config(cfg),
                                    C.substream_seed(cfg["seed"], "batch"), C.collect_config(cfg),
                                    int(il["eval_rollouts"]), int(il["eval_T"]))
    except CollectionError as exc:
        if exc.partial is not None and len(exc.partial):
            exc.partial.to_csv(out / "partial_dataset.csv")
        raise
    names = _save_run(out, [result], data, lambda r: r.dataset_size)
    _finish(out, cfg, "train-batch", {"model.json": digest}, names,
            {"dataset_size": len(data), "seeds": {"batch": C.substream_seed(cfg["seed"], "batch")}})
    click.echo(f"total_loss={result.metrics.total_loss!r}")


@cli.command("train-online")
@config_opt
@out_opt
@seed_opt
@click.option("--model", "model_dir", required=True, type=click.Path(file_okay=False))
@click.option("--batch-run", "batch_dir", default=None, type=click.Path(file_okay=False),
              help="Reuse the first samples of this batch run's expert data as iteration 0.")
def train_online_cmd(config_path, out, seed, model_dir, batch_dir):
    """Online IL (DAgger) with expert mixing beta**i."""
    cfg = C.load(config_path, seed)
    world, expert, digest = _expert(cfg, model_dir)
    inputs = {"model.json": digest}
    initial = None
    if batch_dir is not None:
        path, d = _upstream(batch_dir, "dataset.csv", cfg)
        inputs["dataset.csv"] = d
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        initial = (arr[:, 1:-2], arr[:, -2:])
    out = _prepare(out, cfg, "train-online")
    il = cfg["il"]
    results, data = run_dagger(expert, world, int(il["n_iters"]), int(il["samples_per_iter"]),
                               float(il["beta"]), C.train_config(cfg),
                               C.substream_seed(cfg["seed"], "online"), C.collect_config(cfg),
                               int(il["eval_rollouts"]), int(il["eval_T"]), initial,
                               evaluate_initial=initial is None)
    if batch_dir is not None:
        check_equal_data(len(data), len(initial[0]))
    names = _save_run(out, results, data, lambda r: r.dataset_size)
    best = results[best_iteration(results)].name
    _finish(out, cfg, "train-online", inputs, names,
            {"best": best, "dataset_size": len(data),
             "expert_fractions": {r.name: r.expert_fraction for r in results},
             "seeds": {"online": C.substream_seed(cfg["seed"], "online")}})
    click.echo(f"best={best}")


@cli.command("evaluate")
@config_opt
@out_opt
@seed_opt
@click.option("--model", "model_dir", required=True, type=click.Path(file_okay=False))
@click.option("--policy", "policy_path", required=True, type=click.Path(dir_okay=False))
@click.option("--name", default="policy", help="Row name in the metrics table.")
def evaluate_cmd(config_path, out, seed, model_dir, policy_path, name):
    """Run a saved policy alone and score it against the expert's labels."""
    cfg = C.load(config_path, seed)
    world, expert, digest = _expert(cfg, model_dir)
    if not Path(policy_path).exists():
        raise StageError(f"missing upstream artifact: {policy_path}")
    params = PolicyParams.load(policy_path)
    out = _prepare(out, cfg, "evaluate")
    il = cfg["il"]
    metrics = evaluate_policy(MLPPolicy(params), world, int(il["eval_rollouts"]), int(il["eval_T"]),
                              expert, C.substream(cfg["seed"], "evaluate"))
    write_metrics_csv([metrics.row(name, "-")], out / "metrics.csv")
    _finish(out, cfg, "evaluate", {"model.json": digest, "policy": C.file_hash(policy_path)},
            ["metrics.csv"])
    click.echo(f"total_loss={metrics.total_loss!r}")


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(file_okay=False))
@out_opt
def report_cmd(run_dirs, out):
    """Merge the metrics of several runs into one CSV and JSON table."""
    rows = []
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        if not path.exists():
            raise StageError(f"missing upstream artifact: {path}")
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TABLE_COLUMNS:
                raise StageError(f"{path}: unexpected columns {reader.fieldnames}")
            rows += list(reader)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    (out / "report.json").write_text(json.dumps(rows, indent=2) + "\n")
    click.echo(str(out / "report.csv"))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="ildrive", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        err = {"error": type(exc).__name__, "message": exc.format_message()}
        click.echo(json.dumps(err), err=True)
        return 2
    except (StageError, C.ConfigError, CollectionError, ValueError, OSError) as exc:
        click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
