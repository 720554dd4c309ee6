import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from skimage.metrics import structural_similarity

from app.core.errors import ImageTooSmallError, MissingArtifactError, ShapeError
from app.db.dataset import image_stem, list_images
from app.db.pgm import load_pgm
from app.schemas.metrics import MetricResult, MetricSummary

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _values(image) -> np.ndarray:
    return np.asarray(getattr(image, "values", image), dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> tuple[float, bool]:
    """PSNR in dB and whether it hit the cap (identical inputs)."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ShapeError(f"PSNR needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP, True
    return min(float(10.0 * np.log10(peak ** 2 / mse)), PSNR_CAP), False


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ShapeError(f"SSIM needs equal shapes, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ImageTooSmallError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
    return float(
        structural_similarity(
            a,
            b,
            data_range=peak,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


def evaluate_pair(stem: str, clean, denoised, peak: float = 1.0) -> MetricResult:
    value, capped = psnr(clean, denoised, peak)
    return MetricResult(stem=stem, psnr=value, ssim=ssim(clean, denoised, peak), psnr_capped=capped)


def evaluate_dirs(clean_dir, denoised_dir, suffix: str = "", stems: Optional[Iterable[str]] = None) -> MetricSummary:
    """Score every denoised image against the clean image with the same stem (restricted to ``stems`` if given)."""
    wanted = set(stems) if stems is not None else None
    clean = {image_stem(p): p for p in list_images(clean_dir)}
    rows = []
    for path in list_images(denoised_dir, suffix):
        stem = image_stem(path)
        if wanted is not None and stem not in wanted:
            continue
        if stem not in clean:
            raise MissingArtifactError(f"No clean image for {path.name} in {clean_dir}", path=path)
        rows.append(evaluate_pair(stem, load_pgm(clean[stem]), load_pgm(path)))
    return MetricSummary(rows=rows)


def format_table(summary: MetricSummary, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'image':<24} {'PSNR [dB]':>10} {'SSIM':>8}")
    for row in summary.rows:
        flag = " (cap)" if row.psnr_capped else ""
        lines.append(f"{row.stem:<24} {row.psnr:>10.2f} {row.ssim:>8.4f}{flag}")
    lines.append(f"{'mean':<24} {summary.mean_psnr:>10.2f} {summary.mean_ssim:>8.4f}")
    return "\n".join(lines)


def write_records(path, summary: MetricSummary) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for row in summary.rows:
            handle.write(row.model_dump_json() + "\n")
        handle.write(json.dumps({"stem": "mean", "psnr": summary.mean_psnr, "ssim": summary.mean_ssim}) + "\n")
    return path
