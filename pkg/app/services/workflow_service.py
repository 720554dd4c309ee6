"""Stages of a run, one method per command, all rooted in one working directory.

Every stage reads its inputs from disk, writes its outputs plus a manifest, and
derives its randomness from ``(seed, stage, index)``.
"""
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from app.core.errors import MissingArtifactError
from app.core.rng import derive_rng
from app.db.dataset import image_stem, list_images, write_file_list
from app.db.manifest import write_manifest
from app.db.pgm import load_pgm, save_pgm
from app.schemas.audit import ConsistencyReport, ReportComparison
from app.schemas.config import RunConfig
from app.schemas.image import Image
from app.schemas.metrics import MetricSummary
from app.schemas.oracle import OracleReport
from app.services import audit_service, metrics_service, oracle_service
from app.services.aux_service import AuxPool, draw_aux_samples, list_aux_stems, load_aux, make_aux_pool, save_aux
from app.services.dataset_service import gen_synthetic_dataset
from app.services.denoiser_service import DenoiserService
from app.services.estimator_service import load_estimator, save_estimator, train_estimator
from app.services.noise_service import NoiseService
from app.services.refiner_service import infer, load_refiner, train_refiner
from app.utils.logger import logger


def source_stem(aux_name: str) -> str:
    return aux_name.rsplit("_a", 1)[0]


class Workspace:
    def __init__(self, config: RunConfig, seed: int):
        self.config = config
        self.seed = seed
        self.config_hash = config.content_hash()
        self.denoiser = DenoiserService(config.denoiser)

    # --- layout ---
    @property
    def work_dir(self) -> Path:
        return self.config.paths.work_dir

    @property
    def clean_dir(self) -> Path:
        return self.config.paths.resolve("clean")

    @property
    def noisy_dir(self) -> Path:
        return self.config.paths.resolve("noisy")

    @property
    def aux_dir(self) -> Path:
        return self.config.paths.resolve("aux")

    @property
    def denoised_dir(self) -> Path:
        return self.config.paths.resolve("denoised")

    @property
    def estimator_dir(self) -> Path:
        return self.config.paths.resolve("checkpoint") / "estimator"

    @property
    def refiner_dir(self) -> Path:
        return self.config.paths.resolve("checkpoint") / "refiner"

    @property
    def refined_dir(self) -> Path:
        return self.work_dir / "refined"

    @property
    def audit_dir(self) -> Path:
        return self.work_dir / "audit"

    @property
    def estimator_path(self) -> Path:
        return self.estimator_dir / "estimator.ckpt"

    @property
    def refiner_path(self) -> Path:
        return self.refiner_dir / "refiner.ckpt"

    def _manifest(self, out_dir, command: str, artifacts, inputs=(), reads_clean=False, notes=None) -> Path:
        return write_manifest(out_dir, command, self.config_hash, self.seed, artifacts, inputs, reads_clean, notes)

    # --- stems ---
    def noisy_stems(self) -> list[str]:
        return [image_stem(p) for p in list_images(self.noisy_dir)]

    def split_stems(self, stems: Sequence[str]) -> tuple[list[str], list[str]]:
        """The last ``holdout_fraction`` of the sorted stems are held out of training."""
        stems = sorted(stems)
        count = int(round(len(stems) * self.config.training.holdout_fraction))
        if len(stems) < 2 or count == 0:
            return stems, []
        count = min(count, len(stems) - 1)
        return stems[:-count], stems[-count:]

    def load_noisy(self, stems: Iterable[str]) -> list[Image]:
        return [load_pgm(self.noisy_dir / f"{stem}.pgm") for stem in stems]

    # --- data ---
    def gen_data(self) -> list[Path]:
        images = gen_synthetic_dataset(self.config.data.count, self.config.data.size, self.seed)
        paths = [save_pgm(self.clean_dir / f"img{i:04d}.pgm", image) for i, image in enumerate(images)]
        write_file_list(self.clean_dir, paths)
        self._manifest(self.clean_dir, "gen-data", paths, reads_clean=True)
        logger.info(f"Generated {len(paths)} clean images in {self.clean_dir}")
        return paths

    def add_noise(self) -> list[Path]:
        service = NoiseService(self.config.noise)
        clean_paths = list_images(self.clean_dir)
        paths = []
        for i, path in enumerate(clean_paths):
            noisy = service.apply_quantized(load_pgm(path), derive_rng(self.seed, "noise", i))
            paths.append(save_pgm(self.noisy_dir / path.name, noisy))
        write_file_list(self.noisy_dir, paths)
        self._manifest(self.noisy_dir, "add-noise", paths, clean_paths, reads_clean=True,
                       notes={"noise": self.config.noise.describe()})
        logger.info(f"Added {self.config.noise.describe()} to {len(paths)} images")
        return paths

    def make_aux(self) -> list[Path]:
        stems = self.noisy_stems()
        aux_stems, samples = draw_aux_samples(
            self.load_noisy(stems), stems, self.config.aux, self.seed, self.config.training.samples_per_image
        )
        paths = []
        for stem, sample in zip(aux_stems, samples):
            paths += save_aux(self.aux_dir, stem, sample)
        self._manifest(self.aux_dir, "make-aux", paths, [self.noisy_dir])
        logger.info(f"Wrote {len(samples)} auxiliary samples to {self.aux_dir}")
        return paths

    def base_denoise(self) -> list[Path]:
        paths = []
        noisy_paths = list_images(self.noisy_dir)
        for path in noisy_paths:
            output = self.denoiser.apply(load_pgm(path), source_path=path)
            paths.append(save_pgm(self.denoised_dir / f"{image_stem(path)}.denoised.pgm", output))
        self._manifest(self.denoised_dir, "base-denoise", paths, [self.noisy_dir],
                       notes={"denoiser": self.denoiser.identifier})
        logger.info(f"Applied {self.denoiser.identifier} to {len(paths)} images")
        return paths

    # --- training ---
    def _denoise_aux(self, stem: str, sample) -> np.ndarray:
        return self.denoiser.apply(sample.yhat, source_path=self.aux_dir / f"{stem}.yhat.pgm").values

    def aux_pool(self, stems: Iterable[str], estimator, samples_per_image: Optional[int] = None) -> AuxPool:
        wanted = set(stems)
        names = [name for name in list_aux_stems(self.aux_dir) if source_stem(name) in wanted]
        if samples_per_image is not None:
            names = [name for name in names if int(name.rsplit("_a", 1)[1]) < samples_per_image]
        if not names:
            raise MissingArtifactError(f"No auxiliary samples for the requested images in {self.aux_dir}", path=self.aux_dir)
        samples = [load_aux(self.aux_dir, name) for name in names]
        return make_aux_pool(names, samples, self._denoise_aux, estimator,
                             cache_tag=f"{self.config_hash}:{self.seed}:{self.denoiser.identifier}")

    def train_estimator(self) -> Path:
        train, _ = self.split_stems(self.noisy_stems())
        self.estimator_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.estimator_dir / "estimator.log.jsonl"
        estimator, t, history = train_estimator(
            self.load_noisy(train), self.config.aux, self.config.training, self.config.networks.estimator,
            self.seed, t=self.config.training.t, log_path=log_path,
        )
        path = save_estimator(self.estimator_path, estimator, t, self.config.training.orders,
                              header={"config_hash": self.config_hash, "seed": self.seed})
        final = history[-1].heldout_loss if history else None
        self._manifest(self.estimator_dir, "train-estimator", [path, log_path], [self.noisy_dir],
                       notes={"t": ",".join(f"{value:.6g}" for value in t), "heldout_loss": f"{final}"})
        return path

    def train_refiner(self, resume: bool = False) -> Path:
        estimator, t, _ = load_estimator(self.estimator_path)
        train, heldout = self.split_stems(self.noisy_stems())
        pool = self.aux_pool(train, estimator)
        holdout_pool = self.aux_pool(heldout, estimator, samples_per_image=1) if heldout else pool.split(
            self.config.training.holdout_fraction)[1]
        self.refiner_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.refiner_dir / "refiner.log.jsonl"
        if not resume and log_path.exists():
            log_path.unlink()
        header = {"config_hash": self.config_hash, "seed": self.seed, "denoiser": self.denoiser.identifier}
        trainer, _ = train_refiner(pool, self.config.training, self.config.networks, self.seed, t,
                                   log_path=log_path, checkpoint_path=self.refiner_path, header=header, resume=resume)
        notes = {}
        if holdout_pool is not None:
            notes = {key: f"{value:.6g}" for key, value in trainer.evaluate(holdout_pool).items()}
            logger.info(f"Held-out refiner losses: {notes}")
        self._manifest(self.refiner_dir, "train-refiner", [self.refiner_path, log_path],
                       [self.noisy_dir, self.aux_dir, self.estimator_path], notes=notes)
        return self.refiner_path

    # --- inference and evaluation ---
    def denoise(self) -> list[Path]:
        refiner, _, _ = load_refiner(self.refiner_path)
        paths = []
        for path in list_images(self.noisy_dir):
            refined = infer(refiner, load_pgm(path))
            paths.append(save_pgm(self.refined_dir / f"{image_stem(path)}.refined.pgm", refined))
        self._manifest(self.refined_dir, "denoise", paths, [self.noisy_dir, self.refiner_path])
        return paths

    def evaluate(self, denoised_dir: Path, suffix: str = "", heldout_only: bool = False, name: Optional[str] = None) -> MetricSummary:
        stems = None
        if heldout_only:
            train, heldout = self.split_stems(self.noisy_stems())
            stems = heldout or train
        summary = metrics_service.evaluate_dirs(self.clean_dir, denoised_dir, suffix, stems)
        out_dir = self.work_dir / "eval" / (name or Path(denoised_dir).name)
        records = metrics_service.write_records(out_dir / "metrics.jsonl", summary)
        self._manifest(out_dir, "eval", [records], [self.clean_dir, denoised_dir], reads_clean=True)
        return summary

    def audit(self, targets: Sequence[str] = ("base", "refined")) -> tuple[list[ConsistencyReport], Optional[ReportComparison]]:
        estimator, _, orders = load_estimator(self.estimator_path)
        train, heldout = self.split_stems(self.noisy_stems())
        pool = self.aux_pool(heldout or train, estimator, samples_per_image=1)
        export_dir = self.audit_dir / "maps" if self.config.audit.export_maps else None
        reports, artifacts = [], []
        for target in targets:
            if target == "base":
                outputs, denoiser_id = audit_service.dirac_outputs, self.denoiser.identifier
            else:
                refiner, _, _ = load_refiner(self.refiner_path)
                outputs, denoiser_id = audit_service.refiner_outputs(refiner), f"refined-{self.denoiser.identifier}"
            bank, fit_loss = audit_service.fit_g_for_denoiser(
                pool, orders, self.config.networks.consistency, self.config.audit, self.seed, outputs
            )
            report = audit_service.audit_pool(
                pool, bank, denoiser_id, self.config_hash, outputs, fit_loss,
                export_dir / target if export_dir else None,
            )
            reports.append(report)
            artifacts.append(audit_service.save_report(self.audit_dir / f"report-{target}.json", report))
        comparison = None
        if len(reports) == 2:
            comparison = audit_service.compare_reports(reports[0], reports[1])
            path = self.audit_dir / "comparison.json"
            path.write_text(comparison.model_dump_json(indent=2) + "\n", encoding="utf-8")
            artifacts.append(path)
        if export_dir and export_dir.exists():
            artifacts += sorted(export_dir.rglob("*.pgm"))
        self._manifest(self.audit_dir, "audit", artifacts, [self.noisy_dir, self.aux_dir, self.estimator_path])
        return reports, comparison

    def verify_oracles(self, worlds_path: Optional[Path] = None, random_count: int = 100) -> OracleReport:
        fixtures = oracle_service.load_worlds(worlds_path) if worlds_path else []
        report = oracle_service.run_oracle_suite(self.seed, fixtures, random_count)
        out_dir = self.work_dir / "oracles"
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.json"
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        self._manifest(out_dir, "verify-oracles", [path], [worlds_path] if worlds_path else [])
        return report

