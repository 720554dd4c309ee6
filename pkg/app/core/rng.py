import hashlib

import numpy as np


def derive_rng(seed: int, stage: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stage, index)``.

    Streams are addressed by hashing, never by draw order, so work can be split
    across threads or reordered without changing any drawn value.
    """
    digest = hashlib.sha256(f"{seed}:{stage}:{index}".encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:16], "little")))
