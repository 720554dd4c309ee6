from typing import Sequence

import numpy as np

from app.core.autodiff import Tensor, absolute, as_tensor, reduce_mean
from app.core.errors import ShapeError


def loss_l1(denoised, heads: Tensor) -> Tensor:
    """Mean over heads and pixels of (R_k - D)^2.

    ``denoised`` is [N,1,H,W] and ``heads`` [N,K,H,W]; normalising per pixel keeps
    the penalty weight independent of the crop size.
    """
    denoised = as_tensor(denoised)
    if denoised.ndim != heads.ndim or denoised.shape[0] != heads.shape[0] or denoised.shape[2:] != heads.shape[2:]:
        raise ShapeError(f"Denoiser output {denoised.shape} does not match refiner output {heads.shape}")
    diff = heads - denoised
    return reduce_mean(diff * diff)


def loss_l2(head_means: Sequence[Tensor], estimates, lam: float) -> Tensor:
    """(lam / L) * sum_l mean |head_means_l - est_l|.

    ``estimates`` is [N,L,H,W] (or a list of [N,1,H,W]).
    """
    if isinstance(estimates, (list, tuple)):
        per_order = [as_tensor(e) for e in estimates]
    else:
        estimates = as_tensor(estimates)
        per_order = [estimates[:, l:l + 1] for l in range(estimates.shape[1])]
    if len(per_order) != len(head_means):
        raise ShapeError(f"{len(head_means)} consistency outputs but {len(per_order)} estimator maps")
    total = None
    for mean, estimate in zip(head_means, per_order):
        if mean.shape != estimate.shape:
            raise ShapeError(f"Consistency output {mean.shape} does not match estimator map {estimate.shape}")
        term = reduce_mean(absolute(mean - estimate))
        total = term if total is None else total + term
    return total * (lam / len(head_means))


def loss_l2_terms(head_means: Sequence[Tensor], estimates: np.ndarray) -> list[float]:
    """Per-order mean |difference| outside the graph (for logging)."""
    return [float(np.mean(np.abs(mean.data - estimates[:, l:l + 1]))) for l, mean in enumerate(head_means)]


def _match_norm(a: np.ndarray, reference_norm: float) -> np.ndarray:
    """s(a) = (|g1| / |a|) a, with s(0) = 0."""
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        return np.zeros_like(a)
    return a * (reference_norm / norm)


def rescale_gradient(g1: np.ndarray, g2: np.ndarray, gamma: float) -> np.ndarray:
    """g = (g1 + gamma * (s(g2) + s(sgn g2)) / 2) / (1 + gamma).

    Both rescaled terms have the norm of g1, so |g| <= |g1| and gamma = 0 returns g1.
    """
    if g1.shape != g2.shape:
        raise ShapeError(f"g1 has shape {g1.shape} but g2 has {g2.shape}")
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if gamma == 0:
        return g1
    reference = float(np.linalg.norm(g1))
    mixed = (_match_norm(g2, reference) + _match_norm(np.sign(g2), reference)) / 2.0
    return ((g1 + gamma * mixed) / (1.0 + gamma)).astype(g1.dtype, copy=False)
