import json
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from app.core.autodiff import Tensor, backward
from app.core.errors import DivergenceError, MissingArtifactError, NonFiniteError
from app.core.optim import Adam, Schedule
from app.core.rng import derive_rng
from app.db.checkpoint import load_checkpoint, save_checkpoint
from app.models.networks import EstimatorNet
from app.schemas.aux import AuxConfig, AuxSample
from app.schemas.image import Image
from app.schemas.network import EstimatorConfig
from app.schemas.training import EstimatorRecord, TrainConfig
from app.services.aux_service import calibrate_t, make_aux, measure_moments, targets
from app.services.batching import BatchPrefetcher, MovingAverage
from app.utils.images import random_crop_origin
from app.utils.logger import logger

AuxSampler = Callable[[Image, np.random.Generator], AuxSample]


def crop_image(image: Image, top: int, left: int, size: int) -> Image:
    return Image(values=image.values[top:top + size, left:left + size], levels=image.levels)


class EstimatorTrainer:
    """Fits E(yhat) to f_l(z) = t_l z^l by mean squared error."""

    def __init__(
        self,
        aux_cfg: AuxConfig,
        cfg: TrainConfig,
        net_cfg: EstimatorConfig,
        seed: int,
        aux_sampler: Optional[AuxSampler] = None,
        shuffle_targets: bool = False,
    ):
        self.aux_cfg = aux_cfg
        self.cfg = cfg
        self.net_cfg = net_cfg
        self.seed = seed
        self.aux_sampler = aux_sampler or (lambda image, rng: make_aux(image, aux_cfg, rng))
        self.shuffle_targets = shuffle_targets

    # --- data ---
    def split(self, images: Sequence[Image]) -> tuple[list[Image], list[Image]]:
        count = int(round(len(images) * self.cfg.holdout_fraction))
        if len(images) < 2:
            return list(images), list(images)
        count = min(max(count, 1), len(images) - 1)
        return list(images[:-count]), list(images[-count:])

    def holdout_samples(self, images: Sequence[Image]) -> list[AuxSample]:
        _, heldout = self.split(images)
        return [self.aux_sampler(image, derive_rng(self.seed, "estimator-holdout", i)) for i, image in enumerate(heldout)]

    def _targets(self, z: np.ndarray, t: Sequence[float], rng: np.random.Generator) -> np.ndarray:
        if self.shuffle_targets:
            z = rng.permutation(z.reshape(-1)).reshape(z.shape)
        return targets(z, self.cfg.orders, t)

    def make_batch(self, images: Sequence[Image], t: Sequence[float], step: int) -> tuple[np.ndarray, np.ndarray]:
        rng = derive_rng(self.seed, "estimator-batch", step)
        chosen = [images[int(index)] for index in rng.integers(0, len(images), size=self.cfg.estimator_batch)]
        # one crop size per batch: the smallest chosen image bounds it
        size = min(self.cfg.crop, *(min(image.shape) for image in chosen))
        inputs, outputs = [], []
        for image in chosen:
            top, left = random_crop_origin(image.shape, size, rng)
            sample = self.aux_sampler(crop_image(image, top, left, size), rng)
            inputs.append(sample.yhat.values)
            outputs.append(self._targets(sample.z, t, rng))
        return np.stack(inputs), np.stack(outputs)

    # --- training ---
    def build(self) -> EstimatorNet:
        return EstimatorNet(self.net_cfg.depth, self.net_cfg.width, len(self.cfg.orders), self.seed)

    def heldout_loss(self, estimator: EstimatorNet, samples: Sequence[AuxSample], t: Sequence[float]) -> float:
        rng = derive_rng(self.seed, "estimator-holdout-targets")
        losses = []
        for sample in samples:
            predicted = estimator.predict(sample.yhat.values)
            wanted = self._targets(sample.z, t, rng)
            losses.append(float(np.sum(np.mean((predicted - wanted) ** 2, axis=(-2, -1)))))
        return float(np.mean(losses)) if losses else float("nan")

    def train(
        self,
        images: Sequence[Image],
        t: Sequence[float],
        steps: Optional[int] = None,
        log_path: Optional[Path] = None,
        progress: bool = True,
    ) -> tuple[EstimatorNet, list[EstimatorRecord]]:
        steps = steps or self.cfg.estimator_steps
        train_images, _ = self.split(images)
        holdout = self.holdout_samples(images)
        estimator = self.build()
        optimizer = Adam(estimator.parameters(), self.cfg.betas, self.cfg.eps)
        schedule = Schedule.parse(self.cfg.estimator_lr_schedule, steps)
        monitor = MovingAverage(100)
        recent: list[float] = []
        history: list[EstimatorRecord] = []
        log_handle = open(log_path, "w", encoding="utf-8") if log_path else None
        batches = BatchPrefetcher(lambda step: self.make_batch(train_images, t, step), 0, steps)
        try:
            for step, (inputs, wanted) in tqdm(batches, total=steps, desc="estimator", disable=not progress):
                lr = schedule.value_at(step)
                try:
                    predicted = estimator(inputs)
                    diff = predicted - Tensor(wanted)
                    loss = (diff * diff).mean(axis=(0, 2, 3)).sum()
                    optimizer.zero_grad()
                    backward(loss)
                except NonFiniteError:
                    raise DivergenceError("Estimator loss became non-finite", step, recent[-10:])
                value = loss.item()
                recent.append(value)
                optimizer.step(lr)

                if monitor.update(value) is False:
                    logger.warning(f"Estimator 100-step mean loss rose to {monitor.mean:.4g} at step {step}")
                if step % self.cfg.log_every == 0 or step == steps - 1:
                    record = EstimatorRecord(step=step, lr=lr, train_loss=value,
                                             heldout_loss=self.heldout_loss(estimator, holdout, t))
                    history.append(record)
                    logger.info(f"estimator step {step} lr {lr:.2e} loss {value:.5f} heldout {record.heldout_loss:.5f}")
                    if log_handle:
                        log_handle.write(record.model_dump_json() + "\n")
                        log_handle.flush()
        finally:
            batches.close()
            if log_handle:
                log_handle.close()
        return estimator, history

    def pilot(self, images: Sequence[Image], t: Sequence[float], steps: int) -> EstimatorNet:
        estimator, _ = self.train(images, t, steps=steps, progress=False)
        return estimator


def train_estimator(
    images: Sequence[Image],
    aux_cfg: AuxConfig,
    cfg: TrainConfig,
    net_cfg: EstimatorConfig,
    seed: int,
    t: Optional[Sequence[float]] = None,
    log_path: Optional[Path] = None,
) -> tuple[EstimatorNet, list[float], list[EstimatorRecord]]:
    """Calibrate t when not given, then train the estimator with targets t_l z^l."""
    trainer = EstimatorTrainer(aux_cfg, cfg, net_cfg, seed)
    if t is None:
        t = cfg.t or calibrate_t(images, cfg.orders, trainer, cfg.pilot_steps)
    estimator, history = trainer.train(images, t, log_path=log_path)
    moments = measure_moments(estimator, trainer.holdout_samples(images))
    if any(not 0.5 <= m <= 2.0 for m in moments):
        logger.warning(f"Estimator output second moments {['%.3g' % m for m in moments]} fall outside [0.5, 2]")
    return estimator, list(t), history


def save_estimator(path, estimator: EstimatorNet, t: Sequence[float], orders: Sequence[int], header: Optional[dict] = None) -> Path:
    meta = {"kind": "estimator", "architecture": estimator.architecture(), "t": list(t), "orders": list(orders)}
    meta.update(header or {})
    return save_checkpoint(path, estimator.state_dict(), meta)


def load_estimator(path) -> tuple[EstimatorNet, list[float], list[int]]:
    tensors, header = load_checkpoint(path)
    if header.get("kind") != "estimator":
        raise MissingArtifactError(f"{path} is not an estimator checkpoint", path=path)
    arch = header["architecture"]
    estimator = EstimatorNet(arch["depth"], arch["width"], arch["outputs"], seed=0)
    estimator.load_state_dict(tensors)
    return estimator, list(header["t"]), list(header["orders"])


def read_estimator_log(path) -> list[EstimatorRecord]:
    with open(path, "r", encoding="utf-8") as handle:
        return [EstimatorRecord(**json.loads(line)) for line in handle if line.strip()]
