import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from app.core.autodiff import Tensor, ancestors, backward, identity, no_grad
from app.core.errors import DivergenceError, GraphError, MissingArtifactError, NonFiniteError
from app.core.optim import Adam, Schedule
from app.core.rng import derive_rng
from app.db.checkpoint import load_checkpoint, save_checkpoint
from app.models.networks import ConsistencyBank, RefinerNet
from app.schemas.image import Image
from app.schemas.network import NetworksConfig
from app.schemas.training import LossBreakdown, TrainConfig
from app.services.aux_service import AuxPool
from app.services.batching import BatchPrefetcher, MovingAverage
from app.services.loss_service import loss_l1, loss_l2, loss_l2_terms, rescale_gradient
from app.utils.images import random_crop_origin
from app.utils.logger import logger


@dataclass
class Batch:
    yhat: np.ndarray       # [N,1,c,c]
    denoised: np.ndarray   # [N,1,c,c]
    estimate: np.ndarray   # [N,L,c,c]


def make_batch(pool: AuxPool, batch: int, crop: int, seed: int, step: int, stage: str = "refiner-batch") -> Batch:
    """Crops drawn from substream ``(seed, stage, step)`` only.

    Crops are ``crop`` pixels square, or as large as the smallest chosen image allows.
    """
    rng = derive_rng(seed, stage, step)
    chosen = [pool.entries[int(index)] for index in rng.integers(0, len(pool), size=batch)]
    size = min(crop, *(min(entry.sample.yhat.shape) for entry in chosen))
    yhats, denoised, estimates = [], [], []
    for entry in chosen:
        top, left = random_crop_origin(entry.sample.yhat.shape, size, rng)
        window = (slice(top, top + size), slice(left, left + size))
        yhats.append(entry.sample.yhat.values[window][None])
        denoised.append(entry.denoised[window][None])
        estimates.append(entry.estimate[(slice(None),) + window])
    return Batch(np.stack(yhats), np.stack(denoised), np.stack(estimates))


def full_image_batch(entry) -> Batch:
    return Batch(entry.sample.yhat.values[None, None], entry.denoised[None, None], entry.estimate[None])


class RefinerTrainer:
    """Joint optimisation of the refiner (theta) and the consistency nets (omega).

    Each step differentiates L1 + L2 once. The gradient reaching the refiner output is
    replaced by the rescaled mix of dL1/dR and dL2/dR; the consistency nets keep the
    plain dL2/domega because they are not upstream of the refiner output.
    """

    def __init__(self, cfg: TrainConfig, networks: NetworksConfig, seed: int, t: Sequence[float]):
        self.cfg = cfg
        self.networks = networks
        self.seed = seed
        self.t = list(t)
        self.refiner = RefinerNet(networks.refiner_depth, networks.refiner_width, cfg.heads, seed)
        self.bank = ConsistencyBank(cfg.orders, networks.consistency_layers, networks.consistency_width, seed)
        self.theta_optimizer = Adam(self.refiner.parameters(), cfg.betas, cfg.eps)
        self.omega_optimizer = Adam(self.bank.parameters(), cfg.betas, cfg.eps)
        self.lr_schedule = Schedule.parse(cfg.lr_schedule, cfg.steps)
        self.gamma_schedule = Schedule.parse(cfg.gamma_schedule, cfg.steps)
        self.step_count = 0
        self._omega_ids = {id(p) for p in self.bank.parameters().values()}

    # --- one step ---
    def _injected(self, data_branch: Tensor, consistency_branch: Tensor, gamma: float):
        def replace(computed: np.ndarray) -> np.ndarray:
            g1 = data_branch.grad if data_branch.grad is not None else np.zeros_like(computed)
            g2 = consistency_branch.grad if consistency_branch.grad is not None else np.zeros_like(computed)
            if self.cfg.reduce_heads:
                g2 = np.broadcast_to(g2.sum(axis=1, keepdims=True), g2.shape)
            return rescale_gradient(g1, g2, gamma)

        return replace

    def compute_gradients(self, batch: Batch, gamma: float, rescale: bool = True) -> tuple[float, float, list[float]]:
        """Forward and backward on one batch; leaves gradients on theta and omega."""
        yhat = Tensor(batch.yhat)
        heads = self.refiner(yhat)
        data_branch = identity(heads, "data-branch")
        consistency_branch = identity(heads, "consistency-branch")
        l1 = loss_l1(batch.denoised, data_branch)
        means = self.bank.head_means(consistency_branch, yhat)
        l2 = loss_l2(means, batch.estimate, self.cfg.lam)
        if rescale:
            heads.inject(self._injected(data_branch, consistency_branch, gamma))
        if self._omega_ids & ancestors(heads):
            raise GraphError("Consistency parameters are upstream of the refiner output")
        self.theta_optimizer.zero_grad()
        self.omega_optimizer.zero_grad()
        backward(l1 + l2)
        return l1.item(), l2.item(), [self.cfg.lam / len(means) * v for v in loss_l2_terms(means, batch.estimate)]

    def step(self, batch: Batch) -> LossBreakdown:
        lr = self.lr_schedule.value_at(self.step_count)
        gamma = self.gamma_schedule.value_at(self.step_count)
        l1, l2, per_order = self.compute_gradients(batch, gamma)
        if not (np.isfinite(l1) and np.isfinite(l2)):
            raise NonFiniteError(f"Loss became non-finite at step {self.step_count}")
        self.theta_optimizer.step(lr)
        self.omega_optimizer.step(lr)
        record = LossBreakdown(step=self.step_count, lr=lr, gamma=gamma, l1=l1, l2=l2, l2_per_order=per_order)
        self.step_count += 1
        return record

    # --- loop ---
    def fit(
        self,
        pool: AuxPool,
        steps: Optional[int] = None,
        log_path: Optional[Path] = None,
        checkpoint_path: Optional[Path] = None,
        header: Optional[dict] = None,
        progress: bool = True,
    ) -> list[LossBreakdown]:
        """Train up to ``steps`` total steps, resuming from ``step_count``."""
        steps = steps or self.cfg.steps
        history: list[LossBreakdown] = []
        monitor = MovingAverage(100)
        recent: list[float] = []
        previous: Optional[tuple[float, float]] = None
        log_handle = open(log_path, "a", encoding="utf-8") if log_path else None
        batches = BatchPrefetcher(
            lambda step: make_batch(pool, self.cfg.batch, self.cfg.crop, self.seed, step), self.step_count, steps
        )
        try:
            for step, batch in tqdm(batches, total=steps - self.step_count, desc="refiner", disable=not progress):
                try:
                    record = self.step(batch)
                except NonFiniteError:
                    raise DivergenceError("Refiner loss became non-finite", step, recent[-10:])
                recent.append(record.l1 + record.l2)
                if monitor.update(record.l1 + record.l2) is False:
                    logger.debug(f"Refiner 100-step mean loss rose to {monitor.mean:.4g} at step {step}")
                changed = previous != (record.lr, record.gamma)
                previous = (record.lr, record.gamma)
                if changed or step % self.cfg.log_every == 0 or step == steps - 1:
                    history.append(record)
                    logger.info(
                        f"refiner step {step} lr {record.lr:.2e} gamma {record.gamma:.3f} "
                        f"l1 {record.l1:.6f} l2 {record.l2:.6f}"
                    )
                    if log_handle:
                        log_handle.write(record.model_dump_json() + "\n")
                        log_handle.flush()
                if checkpoint_path and (step + 1) % self.cfg.checkpoint_every == 0:
                    self.save(checkpoint_path, header)
        finally:
            batches.close()
            if log_handle:
                log_handle.close()
        if checkpoint_path:
            self.save(checkpoint_path, header)
        return history

    def evaluate(self, pool: AuxPool) -> dict[str, float]:
        """Held-out losses on full images; ``consistency`` is L2 without the lambda weight."""
        l1s, l2s, consistency, rms = [], [], [], []
        with no_grad():
            for entry in pool.entries:
                batch = full_image_batch(entry)
                yhat = Tensor(batch.yhat)
                heads = self.refiner(yhat)
                l1s.append(loss_l1(batch.denoised, heads).item())
                unweighted = loss_l2(self.bank.head_means(heads, yhat), batch.estimate, 1.0).item()
                consistency.append(unweighted)
                l2s.append(self.cfg.lam * unweighted)
                head_mean = heads.data.astype(np.float64).mean(axis=1)[0]
                rms.append(float(np.sqrt(np.mean((head_mean - entry.denoised) ** 2))))
        return {
            "l1": float(np.mean(l1s)),
            "l2": float(np.mean(l2s)),
            "consistency": float(np.mean(consistency)),
            "rms_to_denoiser": float(np.mean(rms)),
        }

    # --- persistence ---
    def save(self, path, header: Optional[dict] = None) -> Path:
        tensors = {}
        tensors.update(self.refiner.state_dict())
        tensors.update(self.bank.state_dict())
        tensors.update(self.theta_optimizer.state_tensors("adam-theta"))
        tensors.update(self.omega_optimizer.state_tensors("adam-omega"))
        meta = {
            "kind": "refiner",
            "refiner": self.refiner.architecture(),
            "consistency": self.bank.architecture(),
            "t": self.t,
            "step": self.step_count,
            "adam_steps": [self.theta_optimizer.state.step, self.omega_optimizer.state.step],
        }
        meta.update(header or {})
        return save_checkpoint(path, tensors, meta)

    def restore(self, path) -> None:
        tensors, header = load_checkpoint(path)
        if header.get("kind") != "refiner":
            raise MissingArtifactError(f"{path} is not a refiner checkpoint", path=path)
        self.refiner.load_state_dict(tensors)
        self.bank.load_state_dict(tensors)
        theta_steps, omega_steps = header.get("adam_steps", [0, 0])
        self.theta_optimizer.load_state_tensors("adam-theta", tensors, theta_steps)
        self.omega_optimizer.load_state_tensors("adam-omega", tensors, omega_steps)
        self.step_count = int(header.get("step", 0))
        logger.info(f"Resumed refiner training from {path} at step {self.step_count}")


def train_refiner(
    pool: AuxPool,
    cfg: TrainConfig,
    networks: NetworksConfig,
    seed: int,
    t: Sequence[float],
    log_path: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
    header: Optional[dict] = None,
    resume: bool = False,
) -> tuple[RefinerTrainer, list[LossBreakdown]]:
    trainer = RefinerTrainer(cfg, networks, seed, t)
    if resume and checkpoint_path and Path(checkpoint_path).exists():
        trainer.restore(checkpoint_path)
    history = trainer.fit(pool, log_path=log_path, checkpoint_path=checkpoint_path, header=header)
    return trainer, history


def load_refiner(path) -> tuple[RefinerNet, ConsistencyBank, dict]:
    tensors, header = load_checkpoint(path)
    if header.get("kind") != "refiner":
        raise MissingArtifactError(f"{path} is not a refiner checkpoint", path=path)
    arch, consistency = header["refiner"], header["consistency"]
    refiner = RefinerNet(arch["depth"], arch["width"], arch["heads"], seed=0)
    refiner.load_state_dict(tensors)
    bank = ConsistencyBank(consistency["orders"], consistency["layers"], consistency["width"], seed=0)
    bank.load_state_dict(tensors)
    return refiner, bank, header


def infer(refiner: RefinerNet, y: Image) -> Image:
    """Average of the K heads on the full image.

    Heads are unconstrained and can leave [0, 1]; the average is clipped to that range
    before it becomes an Image, and scores are computed on the clipped result.
    """
    with no_grad():
        heads = refiner(y.values).data.astype(np.float64)
    return Image(values=np.clip(heads.mean(axis=1)[0], 0.0, 1.0))


def read_training_log(path) -> list[LossBreakdown]:
    with open(path, "r", encoding="utf-8") as handle:
        return [LossBreakdown(**json.loads(line)) for line in handle if line.strip()]
