"""Command-line entry point: dataset generation, training, the 16-cell
loss-by-scenario grid, and gradient checking.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import datasets as ds
from .losses import LossKind
from .metrics import EvalReport, grid_csv, grid_markdown, reconstruction_success_ratio
from .nets import (NumericalError, SetAutoencoder, RuleClausePredictor,
                   save_checkpoint)

LOSS_CHOICES = ("ce", "sce", "avg", "hausdorff")

# exit code convention: 1 usage, 2 data, 3 numerical
click.exceptions.UsageError.exit_code = 1


class DataError(click.ClickException):
    exit_code = 2


class NumericalFailure(click.ClickException):
    exit_code = 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict,
                    data_files=(), outputs=(), started=None) -> None:
    manifest = {
        "command": command,
        "config": {k: (v.value if isinstance(v, LossKind) else v)
                   for k, v in config.items()},
        "seed": config.get("seed"),
        "dataset_hash": {str(p): _sha256(Path(p)) for p in data_files},
        "wall_clock_seconds": (time.time() - started) if started else None,
        "outputs": [str(p) for p in outputs],
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _merge_config_file(ctx: click.Context, config_path, values: dict) -> dict:
    """Optional flat key=value config file; explicit flags win."""
    if not config_path:
        return values
    out = dict(values)
    try:
        lines = Path(config_path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError("cannot read config file: %s" % (e,))
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.UsageError("%s:%d: expected key=value"
                                   % (config_path, lineno))
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in values:
            raise click.UsageError("%s:%d: unknown key %r"
                                   % (config_path, lineno, key))
        src = ctx.get_parameter_source(key)
        if src is not None and src.name != "DEFAULT":
            continue  # flag given explicitly, flags win
        current = values[key]
        if isinstance(current, bool):
            out[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            out[key] = int(value)
        elif isinstance(current, float):
            out[key] = float(value)
        else:
            out[key] = value
    return out


@click.group()
def main():
    """Set-loss experiment harness."""


# ---------------------------------------------------------------------------
# gen-data

@main.command("gen-data")
@click.argument("kind", type=click.Choice(["puzzle", "puzzle-variable",
                                           "rules"]))
@click.option("--count", default=500, show_default=True,
              help="Number of states / clauses to generate.")
@click.option("--seed", default=1, show_default=True)
@click.option("--out", "out_dir", default="data", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--n", "hops", default=2, show_default=True,
              help="Hop count for rule datasets.")
@click.option("--edges", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Edge-list file for rule datasets.")
@click.option("--synthetic", is_flag=True,
              help="Use the bundled synthetic 163-entity graph.")
@click.option("--config", "config_path", default=None,
              type=click.Path(dir_okay=False))
@click.pass_context
def cmd_gen_data(ctx, kind, count, seed, out_dir, hops, edges, synthetic,
                 config_path):
    """Generate a dataset directory (SETD containers plus meta.json)."""
    values = _merge_config_file(ctx, config_path, dict(
        count=count, seed=seed, out_dir=out_dir, hops=hops))
    count, seed, out_dir, hops = (values["count"], values["seed"],
                                  values["out_dir"], values["hops"])
    started = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind in ("puzzle", "puzzle-variable"):
        try:
            states = ds.sample_states(count, seed)
        except ValueError as e:
            raise DataError(str(e))
        if kind == "puzzle":
            sets = ds.encode_states(states)
            segments = [list(s) for s in ds.PUZZLE_SEGMENTS]
        else:
            variable = ds.drop_elements(states, seed + 1)
            sets = np.stack([ds.pad_with_dummies(x, 9) for x in variable])
            segments = [[sets.shape[2], "sigmoid"]]
        ds.save_object_sets(out / "sets.setd", sets)
        ds.export_csv(out / "sets.csv", sets)
        meta = {"task": kind, "count": int(sets.shape[0]),
                "n_elements": int(sets.shape[1]),
                "n_features": int(sets.shape[2]),
                "segments": segments, "seed": seed}
        outputs = [out / "sets.setd", out / "sets.csv"]
    else:
        if edges and synthetic:
            raise click.UsageError("--edges and --synthetic are exclusive")
        if edges:
            try:
                graph = ds.load_edge_list(edges)
            except ValueError as e:
                raise DataError(str(e))
        else:
            graph = ds.synthetic_countries_graph(seed=seed)
        try:
            clauses = ds.enumerate_clauses(graph, hops)
        except ValueError as e:
            raise DataError(str(e))
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(clauses))[:count]
        picked = [clauses[i] for i in order]
        heads, bodies = ds.encode_clauses(picked)
        ds.save_object_sets(out / "heads.setd", heads[:, None, :])
        ds.save_object_sets(out / "bodies.setd", bodies)
        meta = {"task": "rules", "count": len(picked), "n": hops,
                "n_entities": graph.n_entities,
                "total_clauses": len(clauses), "seed": seed,
                "graph": edges or "synthetic"}
        outputs = [out / "heads.setd", out / "bodies.setd"]
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(out / "meta.json")
    _write_manifest(out, "gen-data", dict(kind=kind, **values),
                    outputs=outputs, started=started)
    click.echo("wrote %s (%d sets)" % (out, meta["count"]))


# ---------------------------------------------------------------------------
# training

def _load_meta(data_dir: Path) -> dict:
    meta_path = data_dir / "meta.json"
    if not meta_path.exists():
        raise DataError("missing dataset: %s" % (meta_path,))
    with open(meta_path, encoding="utf-8") as fh:
        return json.load(fh)


def _split(count: int, fraction: float = 0.9) -> tuple:
    cut = int(round(count * fraction))
    return np.arange(cut), np.arange(cut, count)


def run_puzzle_training(data_dir: Path, loss: str, scenario: int, seed: int,
                        epochs: int, width: int, latent_mode: str,
                        eval_split: str = "all", full_scale: bool = False):
    """Train one autoencoder cell and return (estimator, report, history)."""
    meta = _load_meta(data_dir)
    sets = ds.load_object_sets(data_dir / "sets.setd")
    segments = tuple((int(a), b) for a, b in meta["segments"])
    train_ids, test_ids = _split(sets.shape[0])
    cfg = ds.ScenarioConfig.preset(scenario, seed=seed + 1000)
    inputs, targets = ds.make_scenario(sets[train_ids], cfg)
    eff_epochs = max(1, epochs // cfg.epoch_divisor)
    extra = {}
    if full_scale:
        # full-scale regime: wide layers, a 100-unit annealed binary
        # latent, batchnorm + dropout, large batches
        extra = dict(latent_units=100, use_batchnorm=True, dropout_rate=0.5,
                     batch_size=100, beta2=0.999, lr_decay=1.0,
                     validation_fraction=0.1)
    model = SetAutoencoder(loss=loss, width=width, epochs=eff_epochs,
                           latent_mode=latent_mode, segments=segments,
                           random_state=seed, **extra)
    model.fit(inputs, targets)
    eval_sets = {"train": sets[train_ids], "test": sets[test_ids],
                 "all": sets}[eval_split]
    ratio = reconstruction_success_ratio(eval_sets, model.predict(eval_sets),
                                         segments)
    report = EvalReport(loss=loss, scenario=scenario, seed=seed,
                        split=eval_split, success_ratio=ratio)
    return model, report, model.history_


def run_rules_training(data_dir: Path, loss: str, scenario: int, seed: int,
                       epochs: int, width: int, eval_split: str = "test"):
    """Train one rule-learning cell. Scenario 1 keeps the body order
    fixed; scenario 3 repeats the data 5x with shuffled body order."""
    meta = _load_meta(data_dir)
    heads = ds.load_object_sets(data_dir / "heads.setd")[:, 0, :]
    bodies = ds.load_object_sets(data_dir / "bodies.setd")
    train_ids, test_ids = _split(heads.shape[0])
    if scenario not in (1, 3):
        raise click.UsageError("rules task supports scenarios 1 (fixed) "
                               "and 3 (random body order)")
    cfg = ds.ScenarioConfig.preset(scenario, seed=seed + 1000)
    _, train_bodies = ds.make_scenario(bodies[train_ids], cfg)
    train_heads = np.concatenate([heads[train_ids]] * cfg.repetition)
    eff_epochs = max(1, epochs // cfg.epoch_divisor)
    model = RuleClausePredictor(loss=loss, width=width, epochs=eff_epochs,
                                random_state=seed)
    model.fit(train_heads, train_bodies)
    ids = {"train": train_ids, "test": test_ids,
           "all": np.arange(heads.shape[0])}[eval_split]
    ratio = model.score(heads[ids], bodies[ids])
    report = EvalReport(loss=loss, scenario=scenario, seed=seed,
                        split=eval_split, success_ratio=ratio)
    return model, report, model.history_


def _write_trace(path: Path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,temperature\n")
        for row in history:
            fh.write("%d,%.10g,%.10g,%.10g\n"
                     % (row["epoch"], row["train_loss"], row["val_loss"],
                        row["temperature"]))


@main.command("train")
@click.option("--task", type=click.Choice(["puzzle", "puzzle-variable",
                                           "rules"]), required=True)
@click.option("--loss", type=click.Choice(LOSS_CHOICES), default="sce",
              show_default=True)
@click.option("--scenario", type=click.IntRange(1, 4), default=1,
              show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=30, show_default=True)
@click.option("--width", default=0,
              help="Hidden width; 0 picks the desk-scale default "
                   "(300 autoencoder, 400 rules).")
@click.option("--latent-mode", type=click.Choice(["gumbel-binary", "sigmoid",
                                                  "none"]),
              default="none", show_default=True,
              help="Latent layer type; --full-scale switches the default "
                   "to gumbel-binary.")
@click.option("--full-scale", is_flag=True,
              help="Full-scale regime: width 1000, 100-unit annealed binary "
                   "latent, batchnorm, dropout, batch size 100.")
@click.option("--data", "data_dir", default="data", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--out", "out_dir", default="run", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--eval-split", type=click.Choice(["train", "test", "all"]),
              default="all", show_default=True)
@click.option("--config", "config_path", default=None,
              type=click.Path(dir_okay=False))
@click.pass_context
def cmd_train(ctx, task, loss, scenario, seed, epochs, width, latent_mode,
              full_scale, data_dir, out_dir, eval_split, config_path):
    """Train one model and write checkpoint, loss trace and evaluation."""
    values = _merge_config_file(ctx, config_path, dict(
        loss=loss, scenario=scenario, seed=seed, epochs=epochs, width=width,
        latent_mode=latent_mode, data_dir=data_dir, out_dir=out_dir,
        eval_split=eval_split))
    loss, scenario, seed, epochs = (values["loss"], values["scenario"],
                                    values["seed"], values["epochs"])
    width, latent_mode = values["width"], values["latent_mode"]
    data_dir, out_dir = Path(values["data_dir"]), Path(values["out_dir"])
    eval_split = values["eval_split"]
    if width == 0:
        width = 1000 if full_scale else (400 if task == "rules" else 300)
    if full_scale and ctx.get_parameter_source("latent_mode").name == \
            "DEFAULT":
        latent_mode = "gumbel-binary"
    started = time.time()
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        if task == "rules":
            model, report, history = run_rules_training(
                data_dir, loss, scenario, seed, epochs, width,
                eval_split=eval_split if eval_split != "all" else "test")
        else:
            model, report, history = run_puzzle_training(
                data_dir, loss, scenario, seed, epochs, width, latent_mode,
                eval_split=eval_split, full_scale=full_scale)
    except NumericalError as e:
        raise NumericalFailure(str(e))
    except FileNotFoundError as e:
        raise DataError(str(e))
    save_checkpoint(out_dir / "checkpoint.setm", model.core_.arrays())
    _write_trace(out_dir / "trace.csv", history)
    with open(out_dir / "eval.json", "w", encoding="utf-8") as fh:
        json.dump({"loss": report.loss, "scenario": report.scenario,
                   "seed": report.seed, "split": report.split,
                   "success_ratio": report.success_ratio},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    data_files = sorted(p for p in data_dir.glob("*.setd"))
    values.update(width=width, latent_mode=latent_mode)
    _write_manifest(out_dir, "train",
                    dict(task=task, full_scale=full_scale, **values),
                    data_files=data_files,
                    outputs=[out_dir / "checkpoint.setm",
                             out_dir / "trace.csv", out_dir / "eval.json"],
                    started=started)
    click.echo("task=%s loss=%s scenario=%d seed=%d success=%.3f"
               % (task, loss, scenario, seed, report.success_ratio))


# ---------------------------------------------------------------------------
# grid

def _grid_cell(args):
    (task, data_dir, loss, scenario, seed, epochs, width,
     latent_mode, eval_split, full_scale) = args
    try:
        if task == "rules":
            _, report, _ = run_rules_training(Path(data_dir), loss, scenario,
                                              seed, epochs, width,
                                              eval_split="test")
        else:
            _, report, _ = run_puzzle_training(Path(data_dir), loss, scenario,
                                               seed, epochs, width,
                                               latent_mode, eval_split,
                                               full_scale=full_scale)
        return (loss, scenario, seed, report.success_ratio, None)
    except Exception as e:  # recorded per cell, grid still emitted
        return (loss, scenario, seed, None, "%s: %s" % (type(e).__name__, e))


@main.command("grid")
@click.option("--task", type=click.Choice(["puzzle", "puzzle-variable",
                                           "rules"]), required=True)
@click.option("--runs", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True,
              help="Base seed; run r uses seed + r.")
@click.option("--epochs", default=30, show_default=True)
@click.option("--width", default=0)
@click.option("--latent-mode", default="none", show_default=True,
              type=click.Choice(["gumbel-binary", "sigmoid", "none"]))
@click.option("--full-scale", is_flag=True)
@click.option("--data", "data_dir", default="data", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--out", "out_dir", default="grid", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--eval-split", type=click.Choice(["train", "test", "all"]),
              default="all", show_default=True)
@click.option("--jobs", default=None, type=int,
              help="Parallel workers; defaults to $SETLOSS_JOBS or 1.")
@click.option("--config", "config_path", default=None,
              type=click.Path(dir_okay=False))
@click.pass_context
def cmd_grid(ctx, task, runs, seed, epochs, width, latent_mode, full_scale,
             data_dir, out_dir, eval_split, jobs, config_path):
    """Run every loss x scenario cell ``runs`` times and emit the result
    table as CSV and markdown (best plus mean +/- std per cell)."""
    values = _merge_config_file(ctx, config_path, dict(
        runs=runs, seed=seed, epochs=epochs, width=width,
        latent_mode=latent_mode, data_dir=data_dir, out_dir=out_dir,
        eval_split=eval_split))
    runs, seed, epochs = values["runs"], values["seed"], values["epochs"]
    width, latent_mode = values["width"], values["latent_mode"]
    data_dir, out_dir = Path(values["data_dir"]), Path(values["out_dir"])
    eval_split = values["eval_split"]
    if width == 0:
        width = 1000 if full_scale else (400 if task == "rules" else 300)
    if full_scale and ctx.get_parameter_source("latent_mode").name == \
            "DEFAULT":
        latent_mode = "gumbel-binary"
    if jobs is None:
        jobs = int(os.environ.get("SETLOSS_JOBS", "1"))
    started = time.time()
    out_dir.mkdir(parents=True, exist_ok=True)
    _load_meta(data_dir)  # fail fast with exit code 2
    scenarios = (1, 3) if task == "rules" else (1, 2, 3, 4)
    cells = [(task, str(data_dir), loss, scenario, seed + r, epochs, width,
              latent_mode, eval_split, full_scale)
             for loss in LOSS_CHOICES for scenario in scenarios
             for r in range(runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_cell, cells))
    else:
        results = [_grid_cell(c) for c in cells]
    reports, failures = [], []
    for loss, scenario, cell_seed, ratio, error in results:
        if error is None:
            reports.append(EvalReport(loss=loss, scenario=scenario,
                                      seed=cell_seed, split=eval_split,
                                      success_ratio=ratio))
        else:
            failures.append({"loss": loss, "scenario": scenario,
                             "seed": cell_seed, "error": error})
    (out_dir / "grid.csv").write_text(grid_csv(reports), encoding="utf-8")
    (out_dir / "grid.md").write_text(grid_markdown(reports,
                                                   scenarios=scenarios),
                                     encoding="utf-8")
    if failures:
        with open(out_dir / "failures.json", "w", encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
            fh.write("\n")
    data_files = sorted(p for p in data_dir.glob("*.setd"))
    values.update(width=width, latent_mode=latent_mode)
    _write_manifest(out_dir, "grid",
                    dict(task=task, jobs=jobs, full_scale=full_scale,
                         **values),
                    data_files=data_files,
                    outputs=[out_dir / "grid.csv", out_dir / "grid.md"],
                    started=started)
    click.echo((out_dir / "grid.md").read_text())
    if failures:
        click.echo("%d cell(s) failed; see failures.json" % len(failures),
                   err=True)


# ---------------------------------------------------------------------------
# gradcheck

@main.command("gradcheck")
@click.option("--inject-bad-op", is_flag=True, hidden=True,
              help="Negative control: corrupt one backward on purpose.")
def cmd_gradcheck(inject_bad_op):
    """Run the finite-difference suites for ops, losses and the model."""
    from .gradcheck import run_suite
    ok, reports = run_suite(inject_bad_op=inject_bad_op)
    for r in reports:
        click.echo(r.line())
    click.echo("gradcheck: %d checks, %d failed"
               % (len(reports), sum(not r.ok for r in reports)))
    if not ok:
        raise NumericalFailure("gradient check failed")


if __name__ == "__main__":
    main()
