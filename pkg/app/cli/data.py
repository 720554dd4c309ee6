import click

from app.cli.context import CliContext, pass_context


@click.command("gen-data")
@pass_context
def gen_data(ctx: CliContext):
    """Generate the synthetic clean dataset."""
    workspace = ctx.workspace()
    paths = workspace.gen_data()
    click.echo(f"Wrote {len(paths)} clean images to {workspace.clean_dir}")


@click.command("add-noise")
@pass_context
def add_noise(ctx: CliContext):
    """Corrupt every clean image with the configured noise model."""
    workspace = ctx.workspace()
    paths = workspace.add_noise()
    click.echo(f"Wrote {len(paths)} noisy images ({ctx.config.noise.describe()}) to {workspace.noisy_dir}")


@click.command("make-aux")
@pass_context
def make_aux(ctx: CliContext):
    """Draw the auxiliary samples yhat = y + z for every noisy image."""
    workspace = ctx.workspace()
    workspace.make_aux()
    click.echo(f"Wrote auxiliary samples to {workspace.aux_dir}")


@click.command("base-denoise")
@pass_context
def base_denoise(ctx: CliContext):
    """Apply the configured base denoiser to every noisy image."""
    workspace = ctx.workspace()
    paths = workspace.base_denoise()
    click.echo(f"Wrote {len(paths)} {workspace.denoiser.identifier} outputs to {workspace.denoised_dir}")
