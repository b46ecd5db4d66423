"""Counter-based random-number substreams for order-independent replication."""

from __future__ import annotations

import numpy as np


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for replicate ``index`` of a run seeded with ``seed``.

    Built on the Philox counter-based bit generator: each replicate gets its
    own jumped substream, so results do not depend on scheduling order or
    worker count.
    """
    if index < 0:
        raise ValueError(f"replicate index must be >= 0, got {index}")
    return np.random.Generator(np.random.Philox(key=seed).jumped(index))
