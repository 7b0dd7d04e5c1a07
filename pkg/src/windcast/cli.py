"""Command-line entry points for the forecasting pipeline.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .pipeline import (STAGES, ConfigError, PipelineConfig, StageError,
                       run_pipeline, run_stage)

CONFIG_EXIT = 2
STAGE_EXIT = 3


def _load_config(config_path: str, seed: int | None) -> PipelineConfig:
    cfg = PipelineConfig.from_json_file(config_path)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _stage_command(name: str):
    @click.command(name=name, help=f"Run the '{name}' stage only.")
    @click.option("--config", "config_path", required=True,
                  type=click.Path(exists=True), help="Pipeline config JSON.")
    @click.option("--out", "out_dir", required=True, type=click.Path(),
                  help="Artifact directory.")
    @click.option("--seed", type=int, default=None,
                  help="Override the config seed.")
    @click.option("--verbose", is_flag=True, default=False)
    def command(config_path, out_dir, seed, verbose):
        try:
            cfg = _load_config(config_path, seed)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(CONFIG_EXIT)
        try:
            elapsed = run_stage(name, cfg, Path(out_dir))
        except StageError as exc:
            click.echo(str(exc), err=True)
            sys.exit(STAGE_EXIT)
        if verbose:
            click.echo(f"{name}: done in {elapsed:.2f}s")

    return command


@click.group()
def main():
    """Two-stage wind-speed forecasting pipeline."""


for _name in STAGES:
    main.add_command(_stage_command(_name))


@main.command(name="run", help="Run the full pipeline end to end.")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True), help="Pipeline config JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Artifact directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--verbose", is_flag=True, default=False)
def run_command(config_path, out_dir, seed, verbose):
    try:
        cfg = _load_config(config_path, seed)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(CONFIG_EXIT)
    try:
        report = run_pipeline(cfg, Path(out_dir))
    except StageError as exc:
        click.echo(str(exc), err=True)
        sys.exit(STAGE_EXIT)
    if verbose:
        agg = report["aggregate_mae"]
        for method, mae in agg.items():
            shown = "n/a" if mae is None else f"{mae:.4f}"
            click.echo(f"{method:>12s} MAE: {shown}")


if __name__ == "__main__":
    main()
