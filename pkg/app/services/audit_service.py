"""Statistical-consistency audit of a fixed denoiser or of a trained refiner.

A fixed denoiser is audited through its Dirac posterior: one head, R_1 := D(yhat).
Only noisy data, D(yhat) and the estimator maps enter here; clean images never do.
"""
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from app.core.autodiff import Tensor, backward, no_grad
from app.core.errors import ConfigurationError, DivergenceError, NonFiniteError, ShapeError
from app.core.optim import Adam, Schedule
from app.db.pgm import save_pgm
from app.models.networks import ConsistencyBank, RefinerNet
from app.schemas.audit import AuditConfig, ConsistencyReport, ImageResidual, ReportComparison
from app.schemas.image import Image
from app.schemas.network import ConsistencyConfig
from app.services.aux_service import AuxEntry, AuxPool
from app.services.batching import BatchPrefetcher
from app.services.loss_service import loss_l2
from app.services.refiner_service import make_batch
from app.utils.images import to_display
from app.utils.logger import logger

# (yhat [N,1,H,W], D(yhat) [N,1,H,W]) -> outputs [N,K,H,W]
Outputs = Callable[[np.ndarray, np.ndarray], np.ndarray]

TIE_TOLERANCE = 1e-12


def dirac_outputs(yhat: np.ndarray, denoised: np.ndarray) -> np.ndarray:
    return denoised


def refiner_outputs(refiner: RefinerNet) -> Outputs:
    def outputs(yhat: np.ndarray, denoised: np.ndarray) -> np.ndarray:
        with no_grad():
            return refiner(Tensor(yhat)).data.astype(np.float64)

    return outputs


def fit_g_for_denoiser(
    pool: AuxPool,
    orders: Sequence[int],
    net_cfg: ConsistencyConfig,
    cfg: AuditConfig,
    seed: int,
    outputs: Outputs = dirac_outputs,
    progress: bool = True,
) -> tuple[ConsistencyBank, float]:
    """Fit the consistency nets on L2 alone (lambda = 1) with the outputs held fixed."""
    if pool.orders != len(orders):
        raise ShapeError(f"Pool carries {pool.orders} estimator maps but {len(orders)} orders were requested")
    bank = ConsistencyBank(orders, net_cfg.layers, net_cfg.width, seed)
    optimizer = Adam(bank.parameters())
    schedule = Schedule.parse(cfg.lr_schedule, cfg.steps)
    recent: list[float] = []

    def draw(step: int):
        return make_batch(pool, cfg.batch, cfg.crop, seed, step, stage="audit-batch")

    with BatchPrefetcher(draw, 0, cfg.steps) as batches:
        for step, batch in tqdm(batches, total=cfg.steps, desc="audit", disable=not progress):
            heads = Tensor(outputs(batch.yhat, batch.denoised))
            try:
                loss = loss_l2(bank.head_means(heads, Tensor(batch.yhat)), batch.estimate, 1.0)
                optimizer.zero_grad()
                backward(loss)
            except NonFiniteError:
                raise DivergenceError("Consistency fit became non-finite", step, recent[-10:])
            recent.append(loss.item())
            optimizer.step(schedule.value_at(step))

    final = float(np.mean(recent[-min(len(recent), 100):]))
    logger.info(f"Fitted consistency nets for orders {list(orders)}: final L2 {final:.3g}")
    if len(recent) >= 200 and final > np.mean(recent[:100]):
        logger.warning("Consistency fit did not reduce L2; residual maps may be unreliable")
    return bank, final


def residual_map(entry: AuxEntry, bank: ConsistencyBank, outputs: Outputs = dirac_outputs) -> tuple[np.ndarray, list[float]]:
    """r_l = est_l - (1/K) sum_k G_l(R_k, yhat) on the full image; maps are [L,H,W]."""
    yhat = entry.sample.yhat.values[None, None]
    heads = outputs(yhat, entry.denoised[None, None])
    if heads.shape[0] != 1 or heads.shape[2:] != yhat.shape[2:]:
        raise ShapeError(f"Outputs {heads.shape} do not match image {entry.sample.yhat.shape}")
    with no_grad():
        means = bank.head_means(Tensor(heads), Tensor(yhat))
    maps = np.stack([entry.estimate[l] - mean.data[0, 0].astype(np.float64) for l, mean in enumerate(means)])
    return maps, [float(np.mean(m ** 2)) for m in maps]


def export_residuals(directory, stem: str, maps: np.ndarray, orders: Sequence[int]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [
        save_pgm(directory / f"{stem}.residual{order}.pgm", Image.quantized(to_display(m)))
        for order, m in zip(orders, maps)
    ]


def audit_pool(
    pool: AuxPool,
    bank: ConsistencyBank,
    denoiser_id: str,
    config_hash: str,
    outputs: Outputs = dirac_outputs,
    fit_loss: Optional[float] = None,
    export_dir: Optional[Path] = None,
) -> ConsistencyReport:
    rows = []
    heads = 1
    for entry in pool.entries:
        maps, energies = residual_map(entry, bank, outputs)
        rows.append(ImageResidual(stem=entry.stem, energies=energies))
        if export_dir is not None:
            export_residuals(export_dir, entry.stem, maps, bank.orders)
    if pool.entries:
        first = pool.entries[0]
        heads = outputs(first.sample.yhat.values[None, None], first.denoised[None, None]).shape[1]
    report = ConsistencyReport(
        denoiser_id=denoiser_id, config_hash=config_hash, orders=bank.orders, heads=heads, fit_loss=fit_loss, rows=rows,
    )
    logger.info(f"Audit of {denoiser_id}: aggregate residual energy {report.aggregate:.4g} over {len(rows)} images")
    return report


def compare_reports(a: ConsistencyReport, b: ConsistencyReport) -> ReportComparison:
    if a.config_hash != b.config_hash:
        raise ConfigurationError(f"Reports come from different configurations ({a.config_hash[:12]} vs {b.config_hash[:12]})")
    a_rows, b_rows = a.by_stem(), b.by_stem()
    if set(a_rows) != set(b_rows):
        raise ConfigurationError("Reports cover different images")
    a_wins = b_wins = ties = 0
    for stem, row in a_rows.items():
        difference = b_rows[stem].total - row.total
        if abs(difference) <= TIE_TOLERANCE * max(row.total, b_rows[stem].total, 1e-300):
            ties += 1
        elif difference < 0:
            b_wins += 1
        else:
            a_wins += 1
    if a.aggregate == 0.0:
        ratio = 1.0 if b.aggregate == 0.0 else float("inf")
    else:
        ratio = b.aggregate / a.aggregate
    return ReportComparison(a_id=a.denoiser_id, b_id=b.denoiser_id, a_wins=a_wins, b_wins=b_wins, ties=ties, energy_ratio=ratio)


def edge_mask(image: np.ndarray, edge_quantile: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Edge pixels (top gradient magnitudes, dilated by one) and flat pixels (bottom half)."""
    magnitude = np.hypot(ndimage.sobel(image, axis=0, mode="nearest"), ndimage.sobel(image, axis=1, mode="nearest"))
    edges = ndimage.binary_dilation(magnitude >= np.quantile(magnitude, edge_quantile))
    flat = (magnitude <= np.quantile(magnitude, 0.5)) & ~edges
    return edges, flat


def region_energies(residual: np.ndarray, guide: np.ndarray) -> tuple[float, float]:
    """Mean squared residual near edges of ``guide`` and in its flat regions."""
    edges, flat = edge_mask(guide)
    edge_energy = float(np.mean(residual[edges] ** 2)) if edges.any() else 0.0
    flat_energy = float(np.mean(residual[flat] ** 2)) if flat.any() else 0.0
    return edge_energy, flat_energy


def format_report(report: ConsistencyReport) -> str:
    header = f"{'image':<24}" + "".join(f"{'order ' + str(o):>14}" for o in report.orders) + f"{'total':>14}"
    lines = [f"consistency audit: {report.denoiser_id} (K={report.heads})", header]
    for row in report.rows:
        lines.append(f"{row.stem:<24}" + "".join(f"{e:>14.4e}" for e in row.energies) + f"{row.total:>14.4e}")
    lines.append(f"{'aggregate':<24}" + " " * 14 * len(report.orders) + f"{report.aggregate:>14.4e}")
    return "\n".join(lines)


def save_report(path, report: ConsistencyReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_report(path) -> ConsistencyReport:
    return ConsistencyReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
