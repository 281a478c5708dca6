"""Command-line surface for batch runs.

Exit codes: 0 success, 2 invalid input (config, flags, data), 1 runtime
failure. All randomness is seeded through the config; results land at --out.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click

from . import pipeline, simulators
from .errors import UqnetError, ValidationError
from .gp import loo_diagnostics
from .pipeline import (
    MODEL_IDS,
    CaseStudyConfig,
    ModelStore,
    load_model,
    run_scenario,
    save_model,
    store_resolver,
    write_records_csv,
)

DEFAULT_STORE = "out/store"


def _store(store_dir: str | None) -> ModelStore:
    path = store_dir or os.environ.get("UQNET_STORE_DIR") or DEFAULT_STORE
    return ModelStore(path)


def _fail(err: UqnetError) -> None:
    click.echo(f"error [{err.code}]: {err.message} {err.context or ''}", err=True)
    sys.exit(2 if isinstance(err, ValidationError) else 1)


def _config(path: str) -> CaseStudyConfig:
    return CaseStudyConfig.from_file(path)


@click.group()
def main():
    """Composite forecasting for energy-planning scenarios."""


@main.command("simulate-ensemble")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--target", type=click.Choice(["heat", "cost"]), required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def simulate_ensemble(config_path, target, out_path):
    """Generate a maximin hypercube ensemble CSV for one simulator."""
    try:
        config = _config(config_path)
        if target == "heat":
            domains = simulators.HEAT_DOMAINS
            settings = config.heat_design
            sim = lambda row: simulators.heat_demand_from_row(
                row, baseline=config.heat.baseline
            )
            output_name = "demand_kwh"
        else:
            domains = simulators.DISPATCH_DOMAINS
            settings = config.cost_design
            sim = simulators.dispatch_cost_from_row
            output_name = "cost_gbp"
        X = simulators.lhc_design(settings.n, list(domains.values()), settings.seed)
        F = simulators.run_ensemble(X, sim)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        simulators.write_ensemble_csv(out_path, X, F, list(domains), output_name)
        click.echo(f"wrote {settings.n} rows to {out_path}")
    except UqnetError as err:
        _fail(err)


@main.command("fit-gp")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--target", type=click.Choice(["heat", "cost"]), required=True)
@click.option("--model-id", required=True)
@click.option("--store", "store_dir", default=None, type=click.Path())
def fit_gp_cmd(config_path, target, model_id, store_dir):
    """Fit one simulator emulator and persist it."""
    try:
        config = _config(config_path)
        if target == "heat":
            sim = lambda row: simulators.heat_demand_from_row(
                row, baseline=config.heat.baseline
            )
            em, _ = pipeline.fit_simulator_emulator(
                sim,
                list(simulators.HEAT_DOMAINS.values()),
                config.heat_design,
                config.gp_restarts,
                config.gp_seed,
            )
        else:
            em, _ = pipeline.fit_simulator_emulator(
                simulators.dispatch_cost_from_row,
                list(simulators.DISPATCH_DOMAINS.values()),
                config.cost_design,
                config.gp_restarts,
                config.gp_seed + 1,
            )
        save_model(_store(store_dir), model_id, em, overwrite=True)
        click.echo(f"fitted {target} emulator -> {model_id}")
    except UqnetError as err:
        _fail(err)


@main.command("fit-dlm")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--target", type=click.Choice(["gas", "elec"]), required=True)
@click.option("--model-id", required=True)
@click.option("--store", "store_dir", default=None, type=click.Path())
def fit_dlm_cmd(config_path, target, model_id, store_dir):
    """Fit one price DLM and persist it."""
    try:
        config = _config(config_path)
        gas = pipeline.ingest(config.gas_csv, "gas-factors")
        elec = pipeline.ingest(config.elec_csv, "elec-factors")
        gas_model, elec_model = pipeline.fit_price_dlms(
            gas, elec, config.dlm_prior, seed=config.seed
        )
        model = gas_model if target == "gas" else elec_model
        save_model(_store(store_dir), model_id, model, overwrite=True)
        click.echo(f"fitted {target} dlm -> {model_id}")
    except UqnetError as err:
        _fail(err)


@main.command("build-graph")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--graph-id", default="energy-graph")
@click.option("--store", "store_dir", default=None, type=click.Path())
def build_graph_cmd(config_path, graph_id, store_dir):
    """Fit all component models and persist them plus the wired graph."""
    try:
        config = _config(config_path)
        store = _store(store_dir)
        models, _, data = pipeline.fit_case_study_models(config)
        graph_doc = pipeline.build_case_study_graph_doc(config, models, data)
        for node, model_id in MODEL_IDS.items():
            save_model(store, model_id, models[node], overwrite=True)
        save_model(store, graph_id, graph_doc, overwrite=True)
        click.echo(f"graph {graph_id} ready ({', '.join(MODEL_IDS.values())})")
    except UqnetError as err:
        _fail(err)


@main.command("forecast")
@click.option("--graph-id", default="energy-graph")
@click.option("--horizon", type=int, required=True)
@click.option("--store", "store_dir", default=None, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def forecast_cmd(graph_id, horizon, store_dir, out_path):
    """Baseline forecast (identity scenario) from a stored graph."""
    try:
        if horizon < 1:
            raise ValidationError("horizon must be >= 1", horizon=horizon)
        store = _store(store_dir)
        graph_doc = load_model(store, graph_id)
        run = run_scenario(
            graph_doc, store_resolver(store), "scenario1", horizon
        )
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        write_records_csv(out_path, run.records)
        click.echo(f"wrote {len(run.records)} rows to {out_path}")
    except UqnetError as err:
        _fail(err)


@main.group()
def scenario():
    """Scenario operations."""


@scenario.command("run")
@click.option("--scenario", "scenario_name", required=True)
@click.option("--graph-id", default="energy-graph")
@click.option("--horizon", type=int, default=4)
@click.option("--store", "store_dir", default=None, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--scenario-file", default=None, type=click.Path(),
              help="JSON file with custom scenario definitions keyed by name.")
def scenario_run(scenario_name, graph_id, horizon, store_dir, out_path, scenario_file):
    """Run one scenario against a stored graph and emit tidy CSV."""
    try:
        if horizon < 1:
            raise ValidationError("horizon must be >= 1", horizon=horizon)
        store = _store(store_dir)
        graph_doc = load_model(store, graph_id)
        sc = scenario_name
        if scenario_file:
            defs = json.loads(Path(scenario_file).read_text())
            if scenario_name in defs:
                sc = dict(defs[scenario_name], name=scenario_name)
        run = run_scenario(graph_doc, store_resolver(store), sc, horizon)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        write_records_csv(out_path, run.records)
        click.echo(f"wrote {len(run.records)} rows to {out_path}")
    except UqnetError as err:
        _fail(err)


@main.command("diagnostics")
@click.option("--model-id", required=True)
@click.option("--store", "store_dir", default=None, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def diagnostics_cmd(model_id, store_dir, out_path):
    """Leave-one-out diagnostics table for a stored emulator."""
    try:
        model = load_model(_store(store_dir), model_id)
        if not hasattr(model, "design"):
            raise ValidationError(
                "diagnostics require a gp model", model_id=model_id
            )
        records = loo_diagnostics(model)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "observed", "mean", "sd", "within_two_sd", "error"])
            for rec in records:
                writer.writerow(
                    [
                        rec.index,
                        repr(rec.observed),
                        "" if rec.mean is None else repr(rec.mean),
                        "" if rec.sd is None else repr(rec.sd),
                        "" if rec.within_two_sd is None else rec.within_two_sd,
                        rec.error or "",
                    ]
                )
        n_ok = sum(1 for r in records if r.within_two_sd)
        click.echo(f"{n_ok}/{len(records)} points within two sd -> {out_path}")
    except UqnetError as err:
        _fail(err)


@main.command("run-case-study")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--store", "store_dir", default=None, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def run_case_study_cmd(config_path, store_dir, out_path):
    """Full pipeline: fit, build graph, run all configured scenarios."""
    try:
        config = _config(config_path)
        store = _store(store_dir)
        result = pipeline.run_case_study(config, store)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        write_records_csv(out_path, result.records)
        click.echo(
            f"{len(result.records)} rows over {len(result.config.scenarios)} scenarios -> {out_path}"
        )
    except UqnetError as err:
        _fail(err)


if __name__ == "__main__":
    main()
