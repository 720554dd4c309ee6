from pathlib import Path
from typing import Optional

import click

from app.cli.context import CliContext, pass_context
from app.core.errors import RefineError
from app.services.audit_service import format_report
from app.services.metrics_service import format_table
from app.services.oracle_service import format_oracle_report


@click.command("eval")
@click.option("--denoised-dir", type=click.Path(path_type=Path), default=None,
              help="Directory of outputs to score (default: the refined outputs).")
@click.option("--suffix", default=None, help="File suffix before .pgm, e.g. .denoised")
@click.option("--heldout-only", is_flag=True, help="Score only the images held out of training.")
@pass_context
def evaluate(ctx: CliContext, denoised_dir: Optional[Path], suffix: Optional[str], heldout_only: bool):
    """PSNR and SSIM of denoised images against the clean images."""
    workspace = ctx.workspace()
    if denoised_dir is None:
        denoised_dir, suffix = workspace.refined_dir, ".refined" if suffix is None else suffix
    summary = workspace.evaluate(denoised_dir, suffix or "", heldout_only)
    click.echo(format_table(summary, f"scores for {denoised_dir}"))


@click.command("audit")
@click.option("--target", type=click.Choice(["base", "refined", "both"]), default="both", show_default=True)
@pass_context
def audit(ctx: CliContext, target: str):
    """Fit the consistency nets for a denoiser and report residual energies."""
    targets = ("base", "refined") if target == "both" else (target,)
    reports, comparison = ctx.workspace().audit(targets)
    for report in reports:
        click.echo(format_report(report))
        click.echo("")
    if comparison is not None:
        click.echo(
            f"{comparison.b_id} vs {comparison.a_id}: wins {comparison.b_wins}, losses {comparison.a_wins}, "
            f"ties {comparison.ties}, energy ratio {comparison.energy_ratio:.4f}"
        )


@click.command("verify-oracles")
@click.option("--worlds", type=click.Path(path_type=Path, exists=True, dir_okay=False), default=None,
              help="INI file of fixture worlds.")
@click.option("--random-worlds", type=click.IntRange(min=0), default=100, show_default=True)
@pass_context
def verify_oracles(ctx: CliContext, worlds: Optional[Path], random_worlds: int):
    """Exact enumeration checks of the posterior identity and the Gaussian toy coefficient."""
    report = ctx.workspace().verify_oracles(worlds, random_worlds)
    click.echo(format_oracle_report(report))
    if not report.passed:
        raise RefineError("Oracle checks failed")
