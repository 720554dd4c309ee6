"""Binary (P5) 8-bit PGM codec."""
import os
import re
from pathlib import Path

import numpy as np

from app.core.errors import ImageFormatError, MissingArtifactError
from app.schemas.image import EIGHT_BIT_LEVELS, Image

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def _read_header(data: bytes, path) -> tuple[int, int, int, int]:
    tokens = []
    position = 0
    while len(tokens) < 4:
        match = _TOKEN.match(data, position)
        if not match:
            raise ImageFormatError(f"Malformed PGM header in {path}")
        tokens.append(match.group(1))
        position = match.end()
    # exactly one whitespace byte separates the header from the raster
    if position >= len(data) or not data[position:position + 1].isspace():
        raise ImageFormatError(f"Malformed PGM header in {path}")
    magic, width, height, maxval = tokens
    if magic != b"P5":
        raise ImageFormatError(f"Unsupported PGM magic {magic!r} in {path}, expected P5")
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise ImageFormatError(f"Non-numeric PGM header field in {path}")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"Invalid PGM dimensions {width}x{height} in {path}")
    if maxval != 255:
        raise ImageFormatError(f"Only 8-bit PGM (maxval 255) is supported, {path} declares {maxval}")
    return width, height, maxval, position + 1


def load_pgm(path) -> Image:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Image not found: {path}", path=path)
    data = path.read_bytes()
    width, height, _, offset = _read_header(data, path)
    expected = width * height
    raster = data[offset:offset + expected]
    if len(raster) != expected:
        raise ImageFormatError(f"Truncated PGM raster in {path}: {len(raster)} of {expected} bytes")
    codes = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return Image.eight_bit(EIGHT_BIT_LEVELS[codes])


def encode_pgm(image: Image) -> bytes:
    codes = image.to_codes()
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + codes.tobytes()


def save_pgm(path, image: Image) -> Path:
    """Write atomically; continuous images are rounded to the nearest 8-bit level."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp = path.with_name(path.name + ".tmp")
    temp.write_bytes(encode_pgm(image))
    os.replace(temp, path)
    return path
