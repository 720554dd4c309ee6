from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import click

from app.core.runconfig import load_run_config
from app.schemas.config import RunConfig
from app.services.workflow_service import Workspace


@dataclass
class CliContext:
    seed: int
    config_path: Optional[Path] = None
    overrides: tuple[str, ...] = ()
    work_dir: Optional[Path] = None
    _config: Optional[RunConfig] = field(default=None, repr=False)

    @property
    def config(self) -> RunConfig:
        if self._config is None:
            self._config = load_run_config(self.config_path, self.overrides, self.work_dir)
        return self._config

    def workspace(self) -> Workspace:
        return Workspace(self.config, self.seed)


pass_context = click.make_pass_decorator(CliContext)
