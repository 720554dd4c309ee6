"""Hyper-parameter sweeps that share one clean/noisy dataset.

Each setting gets its own working directory for auxiliary samples, checkpoints and
refined outputs; the clean and noisy images come from the base workspace.
"""
import itertools
from pathlib import Path
from typing import Any, Mapping, Sequence

from app.core.runconfig import override_config
from app.db.manifest import read_manifest
from app.schemas.config import RunConfig
from app.schemas.pipeline import SweepResult, SweepRow
from app.services.workflow_service import Workspace
from app.utils.logger import logger


def _label(setting: Mapping[str, Any]) -> str:
    return "_".join(f"{key.split('.')[-1]}-{value}" for key, value in sorted(setting.items())) or "base"


def _prepare_data(config: RunConfig, seed: int) -> Workspace:
    base = Workspace(config, seed)
    if not base.noisy_dir.exists():
        base.gen_data()
        base.add_noise()
    return base


def _setting_workspace(base: Workspace, root: Path, setting: Mapping[str, Any], seed: int) -> Workspace:
    assignments = dict(setting)
    assignments["paths.work_dir"] = str(root / f"{_label(setting)}_seed{seed}")
    assignments["paths.clean_dir"] = str(base.clean_dir)
    assignments["paths.noisy_dir"] = str(base.noisy_dir)
    return Workspace(override_config(base.config, assignments), seed)


def run_grid(config: RunConfig, seed: int, grid: Mapping[str, Sequence[Any]], root: Path) -> SweepResult:
    """Train and score the refiner for every combination in ``grid``; reports held-out PSNR."""
    base = _prepare_data(config, seed)
    keys = sorted(grid)
    result = SweepResult()
    for values in itertools.product(*(grid[key] for key in keys)):
        setting = dict(zip(keys, values))
        workspace = _setting_workspace(base, root, setting, seed)
        workspace.make_aux()
        workspace.base_denoise()
        workspace.train_estimator()
        workspace.train_refiner()
        workspace.denoise()
        summary = workspace.evaluate(workspace.refined_dir, ".refined", heldout_only=True, name="refined")
        result.rows.append(SweepRow(setting=setting, seed=seed, psnr=summary.mean_psnr))
        logger.info(f"Sweep {_label(setting)}: held-out PSNR {summary.mean_psnr:.2f} dB")
    return result


def run_lambda_sweep(config: RunConfig, seeds: Sequence[int], lams: Sequence[float], root: Path) -> SweepResult:
    """Final held-out L2 for each lambda and seed; the estimator is trained once per seed."""
    result = SweepResult()
    for seed in seeds:
        base = _prepare_data(config, seed)
        shared = _setting_workspace(base, root, {}, seed)
        shared.make_aux()
        shared.base_denoise()
        shared.train_estimator()
        for lam in lams:
            setting = {"training.lambda": lam}
            workspace = _setting_workspace(base, root, setting, seed)
            overrides = {"paths.aux_dir": str(shared.aux_dir), "paths.denoised_dir": str(shared.denoised_dir)}
            workspace = Workspace(override_config(workspace.config, overrides), seed)
            workspace.estimator_dir.mkdir(parents=True, exist_ok=True)
            workspace.estimator_path.write_bytes(shared.estimator_path.read_bytes())
            workspace.train_refiner()
            l2 = _heldout_l2(workspace)
            result.rows.append(SweepRow(setting=setting, seed=seed, heldout_l2=l2))
            logger.info(f"Lambda sweep seed {seed} lambda {lam}: held-out L2 {l2:.4g}")
    return result


def _heldout_l2(workspace: Workspace) -> float:
    return float(read_manifest(workspace.refiner_dir).notes["consistency"])


def is_non_increasing(means: Sequence[float], tolerance: float = 0.0) -> bool:
    return all(later <= earlier + tolerance for earlier, later in zip(means, means[1:]))


def format_sweep(result: SweepResult, field: str) -> str:
    lines = [f"{'setting':<48} {field:>12}"]
    for key, value in result.mean_by_setting(field).items():
        lines.append(f"{key:<48} {value:>12.4f}")
    return "\n".join(lines)
