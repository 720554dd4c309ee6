from pathlib import Path

from app.core.errors import MissingArtifactError

FILE_LIST_NAME = "dataset.txt"
_DERIVED_SUFFIXES = (".denoised", ".refined", ".yhat")


def image_stem(path) -> str:
    """File stem with derived-artifact suffixes removed (``a.denoised.pgm`` -> ``a``)."""
    stem = Path(path).name[: -len(".pgm")] if str(path).endswith(".pgm") else Path(path).stem
    changed = True
    while changed:
        changed = False
        for suffix in _DERIVED_SUFFIXES:
            if stem.endswith(suffix):
                stem = stem[: -len(suffix)]
                changed = True
    return stem


def list_images(directory, suffix: str = "") -> list[Path]:
    """Sorted PGM files in ``directory`` whose name ends with ``suffix + '.pgm'``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingArtifactError(f"Directory not found: {directory}", path=directory)
    pattern = f"*{suffix}.pgm"
    paths = sorted(p for p in directory.glob(pattern) if not p.name.endswith(".tmp"))
    if not suffix:
        paths = [p for p in paths if image_stem(p) == p.name[: -len(".pgm")]]
    if not paths:
        raise MissingArtifactError(f"No {pattern} images in {directory}", path=directory)
    return paths


def write_file_list(directory, paths) -> Path:
    directory = Path(directory)
    target = directory / FILE_LIST_NAME
    lines = [Path(p).relative_to(directory).as_posix() if Path(p).is_relative_to(directory) else str(p) for p in paths]
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target

