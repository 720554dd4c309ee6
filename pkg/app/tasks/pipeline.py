import numpy as np

from app.db.pgm import load_pgm
from app.schemas.pipeline import PipelineSummary
from app.services.aux_service import aux_stem, load_aux
from app.services.metrics_service import format_table, psnr
from app.services.refiner_service import infer, load_refiner
from app.services.workflow_service import Workspace
from app.utils.logger import logger


def inference_input_gap(workspace: Workspace, stems: list[str]) -> float:
    """Mean PSNR(infer on y) - PSNR(infer on yhat) against the clean images."""
    refiner, _, _ = load_refiner(workspace.refiner_path)
    gaps = []
    for stem in stems:
        clean = load_pgm(workspace.clean_dir / f"{stem}.pgm")
        sample = load_aux(workspace.aux_dir, aux_stem(stem, 0))
        on_y, _ = psnr(clean, infer(refiner, sample.y))
        on_yhat, _ = psnr(clean, infer(refiner, sample.yhat))
        gaps.append(on_y - on_yhat)
    return float(np.mean(gaps))


def run_pipeline(workspace: Workspace, audit: bool = True) -> PipelineSummary:
    """gen-data, add-noise, make-aux, base-denoise, train-estimator, train-refiner, denoise, eval and audit."""
    logger.info(f"Starting pipeline in {workspace.work_dir} (config {workspace.config_hash[:12]}, seed {workspace.seed})")
    workspace.gen_data()
    workspace.add_noise()
    workspace.make_aux()
    workspace.base_denoise()
    workspace.train_estimator()
    workspace.train_refiner()
    workspace.denoise()

    train, heldout = workspace.split_stems(workspace.noisy_stems())
    scored = heldout or train
    summary = PipelineSummary(
        denoiser_id=workspace.denoiser.identifier,
        noisy=workspace.evaluate(workspace.noisy_dir, heldout_only=True, name="noisy"),
        base=workspace.evaluate(workspace.denoised_dir, ".denoised", heldout_only=True, name="base"),
        refined=workspace.evaluate(workspace.refined_dir, ".refined", heldout_only=True, name="refined"),
        yhat_gap_db=inference_input_gap(workspace, scored),
    )
    if audit:
        _, summary.comparison = workspace.audit(("base", "refined"))
    logger.info(f"Pipeline finished: refined minus {summary.denoiser_id} = {summary.delta_db:+.2f} dB")
    return summary


def format_summary(summary: PipelineSummary) -> str:
    lines = [
        f"{'held-out images':<24} {'PSNR [dB]':>10} {'SSIM':>8}",
        f"{'noisy':<24} {summary.noisy.mean_psnr:>10.2f} {summary.noisy.mean_ssim:>8.4f}",
        f"{summary.denoiser_id:<24} {summary.base.mean_psnr:>10.2f} {summary.base.mean_ssim:>8.4f}",
        f"{'refined ' + summary.denoiser_id:<24} {summary.refined.mean_psnr:>10.2f} {summary.refined.mean_ssim:>8.4f}",
        f"refined minus base: {summary.delta_db:+.2f} dB",
    ]
    if summary.yhat_gap_db is not None:
        lines.append(f"inference on y minus inference on yhat: {summary.yhat_gap_db:+.3f} dB")
    if summary.comparison is not None:
        c = summary.comparison
        lines.append(
            f"audit: {c.b_id} has lower residual energy on {c.b_wins} images, {c.a_id} on {c.a_wins}, "
            f"{c.ties} ties; energy ratio {c.energy_ratio:.3f}"
        )
    lines.append("")
    lines.append(format_table(summary.refined, "refined, per image"))
    return "\n".join(lines)
