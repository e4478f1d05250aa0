import logging
import zlib

import numpy as np

logger = logging.getLogger("atlas-toolkit")


def format_eta(seconds: float) -> str:
    """Format seconds as human-readable duration (e.g., '2m 30s')."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        return f"{int(seconds // 60)}m {int(seconds % 60)}s"
    else:
        hours = int(seconds // 3600)
        mins = int((seconds % 3600) // 60)
        return f"{hours}h {mins}m"


def make_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream name, index).

    Streams are independent of call order, so subject i always draws the same
    numbers no matter how many other subjects were generated before it.
    """
    key = (int(seed) & 0xFFFFFFFF) << 64 | zlib.crc32(stream.encode("utf-8")) << 32 | (int(index) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))
