from pathlib import Path
from typing import Optional

import click

from app.cli.context import CliContext, pass_context
from app.core.errors import ConfigurationError
from app.core.runconfig import parse_value
from app.tasks.pipeline import format_summary, run_pipeline
from app.tasks.sweep import format_sweep, is_non_increasing, run_grid, run_lambda_sweep


@click.command("pipeline")
@click.option("--skip-audit", is_flag=True, help="Stop after scoring.")
@pass_context
def pipeline(ctx: CliContext, skip_audit: bool):
    """End-to-end run from synthetic data to the audit comparison."""
    summary = run_pipeline(ctx.workspace(), audit=not skip_audit)
    click.echo(format_summary(summary))


def _parse_grid(items: tuple[str, ...]) -> dict[str, list]:
    grid = {}
    for item in items:
        name, sep, values = item.partition("=")
        if not sep or "." not in name:
            raise ConfigurationError(f"Grid entries look like section.key=v1,v2, got {item!r}")
        grid[name.strip()] = [parse_value(v) for v in values.split(",") if v.strip()]
    return grid


@click.command("sweep")
@click.option("--grid", "grid_items", multiple=True, help="section.key=v1,v2 (repeatable).")
@click.option("--lambdas", default=None, help="Comma-separated lambda values for the penalty sweep.")
@click.option("--seeds", type=click.IntRange(min=1), default=3, show_default=True,
              help="Number of consecutive seeds for the penalty sweep.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Root directory of the sweep runs.")
@pass_context
def sweep(ctx: CliContext, grid_items: tuple[str, ...], lambdas: Optional[str], seeds: int, out: Optional[Path]):
    """Held-out PSNR over a settings grid, or held-out consistency loss over lambda."""
    root = out or ctx.config.paths.work_dir / "sweep"
    if lambdas:
        values = [float(v) for v in lambdas.split(",")]
        result = run_lambda_sweep(ctx.config, [ctx.seed + k for k in range(seeds)], values, root)
        click.echo(format_sweep(result, "heldout_l2"))
        means = [result.mean_by_setting("heldout_l2")[f"training.lambda={v}"] for v in values]
        click.echo(f"non-increasing in lambda: {is_non_increasing(means)}")
        return
    if not grid_items:
        raise ConfigurationError("Give at least one --grid entry or --lambdas")
    result = run_grid(ctx.config, ctx.seed, _parse_grid(grid_items), root)
    click.echo(format_sweep(result, "psnr"))
