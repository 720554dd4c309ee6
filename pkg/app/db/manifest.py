import hashlib
from pathlib import Path
from typing import Iterable, Optional

from app.schemas.manifest import Manifest

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(
    out_dir,
    command: str,
    config_hash: str,
    seed: int,
    artifacts: Iterable,
    inputs: Iterable = (),
    reads_clean: bool = False,
    notes: Optional[dict[str, str]] = None,
) -> Path:
    """Record what produced ``out_dir``. No timestamps, so identical reruns give identical manifests."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for artifact in sorted({Path(p) for p in artifacts}):
        key = artifact.relative_to(out_dir).as_posix() if artifact.is_relative_to(out_dir) else artifact.as_posix()
        checksums[key] = sha256_file(artifact)
    manifest = Manifest(
        command=command,
        config_hash=config_hash,
        seed=seed,
        reads_clean=reads_clean,
        inputs=sorted(str(Path(p).as_posix()) for p in inputs),
        artifacts=checksums,
        notes=dict(sorted((notes or {}).items())),
    )
    path = out_dir / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(directory) -> Manifest:
    return Manifest.model_validate_json((Path(directory) / MANIFEST_NAME).read_text(encoding="utf-8"))
