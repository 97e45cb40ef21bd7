"""Command-line entry point: ``mcm-sim run <scenario> [options]``."""
from __future__ import annotations

import dataclasses
import sys
import time

import click

from .config import MAX_SEED, SCENARIOS, ConfigError, load_config
from .scenarios import run_scenario
from .sequence import SequenceError


@click.group()
def main():
    """Seeded Monte Carlo simulator for mid-circuit measurement in tweezer arrays."""


@main.command()
@click.argument("scenario", type=click.Choice(SCENARIOS))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML config; defaults apply to everything not set.")
@click.option("--seed", type=click.IntRange(0, MAX_SEED), default=None, help="Master seed (overrides config).")
@click.option("--trials", type=click.IntRange(0), default=None, help="Trials per run (overrides config).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--workers", type=click.IntRange(1), default=None, help="Worker processes (overrides config).")
@click.option("--block-size", type=click.IntRange(1), default=None, help="Trials per work unit.")
@click.option("--check", is_flag=True, help="Exit nonzero if any acceptance check fails.")
def run(scenario, config_path, seed, trials, out_dir, workers, block_size, check):
    """Run SCENARIO and write tables plus summary.json into --out."""
    try:
        cfg = load_config(config_path, scenario)
    except (ConfigError, SequenceError) as exc:
        raise click.UsageError(f"invalid config: {exc}") from None
    overrides = {k: v for k, v in (("seed", seed), ("trials", trials), ("workers", workers),
                                   ("block_size", block_size)) if v is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    t0 = time.perf_counter()
    log = run_scenario(cfg)
    elapsed = time.perf_counter() - t0
    written = log.write(out_dir)
    for c in log.checks:
        click.echo(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  value={c.value}  target={c.target}")
    n_abort = sum(len(lg.aborted) for lg in log.experiments.values())
    if n_abort:
        click.echo(f"aborted trials: {n_abort}", err=True)
    click.echo(f"wrote {len(written)} files to {out_dir} in {elapsed:.1f} s")
    if check and not log.passed:
        sys.exit(1)


if __name__ == "__main__":
    main()
