from pathlib import Path
from typing import Optional

import click

from app.cli import data, evaluation, training, workflows
from app.cli.context import CliContext
from app.core.autodiff import set_default_dtype
from app.core.config import settings
from app.core.errors import RefineError
from app.utils.logger import logger


class RefineGroup(click.Group):
    """Maps failures to exit codes: RefineError carries its own, anything else exits 1."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except RefineError as exc:
            logger.error(f"{type(exc).__name__}: {exc.message}")
            click.echo(f"Error: {exc.message}", err=True)
            ctx.exit(exc.exit_code)
        except Exception as exc:
            logger.exception(f"Unhandled exception: {exc}")
            click.echo(f"Error: unexpected failure: {exc}", err=True)
            ctx.exit(1)


@click.group(cls=RefineGroup)
@click.option("--config", "config_path", type=click.Path(path_type=Path, dir_okay=False), default=None,
              help="INI run configuration (default: built-in desk settings).")
@click.option("--seed", type=int, required=True, help="Root seed; every stage derives its own substream.")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one configuration value (repeatable, applied after the file).")
@click.option("--work-dir", type=click.Path(path_type=Path, file_okay=False), default=None,
              help="Root directory of all artifacts.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], seed: int, overrides: tuple[str, ...], work_dir: Optional[Path]):
    """Statistical refinement of image denoisers."""
    set_default_dtype(settings.precision)
    ctx.obj = CliContext(seed=seed, config_path=config_path, overrides=overrides, work_dir=work_dir)


for command in (
    data.gen_data,
    data.add_noise,
    data.make_aux,
    data.base_denoise,
    training.train_estimator,
    training.train_refiner,
    training.denoise,
    evaluation.evaluate,
    evaluation.audit,
    evaluation.verify_oracles,
    workflows.pipeline,
    workflows.sweep,
):
    cli.add_command(command)


if __name__ == "__main__":
    cli()
