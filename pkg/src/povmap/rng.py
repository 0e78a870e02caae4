"""Named, reproducible random substreams.

Every source of randomness in the package flows from a single integer seed
through named substreams (``synth``, ``init.access``, ``shuffle.morph``,
``forest``, ``splits``, ...).  Substream derivation uses SHA-256 on the
stream name, so the mapping is stable across platforms and Python versions
(unlike the builtin ``hash``).
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "stream_key"]


def stream_key(name: str) -> int:
    """Stable 64-bit key for a substream name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the substream ``name`` of ``seed``.

    Optional integer ``indices`` address per-entity children (e.g. one
    stream per tile) without consuming draws from the parent stream.
    """
    entropy = (int(seed), stream_key(name), *[int(i) for i in indices])
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
