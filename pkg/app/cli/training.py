import click

from app.cli.context import CliContext, pass_context


@click.command("train-estimator")
@pass_context
def train_estimator(ctx: CliContext):
    """Calibrate the scaling constants and fit the conditional-expectation estimator."""
    path = ctx.workspace().train_estimator()
    click.echo(f"Saved estimator to {path}")


@click.command("train-refiner")
@click.option("--resume", is_flag=True, help="Continue from the last refiner checkpoint.")
@pass_context
def train_refiner(ctx: CliContext, resume: bool):
    """Jointly train the refiner and the consistency nets."""
    path = ctx.workspace().train_refiner(resume=resume)
    click.echo(f"Saved refiner to {path}")


@click.command("denoise")
@pass_context
def denoise(ctx: CliContext):
    """Run the trained refiner on every noisy image (mean over heads)."""
    workspace = ctx.workspace()
    paths = workspace.denoise()
    click.echo(f"Wrote {len(paths)} refined images to {workspace.refined_dir}")
