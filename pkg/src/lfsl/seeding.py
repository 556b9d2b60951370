"""Deterministic random-stream splitting.

Every command takes one master seed; independent substreams are derived
through ``numpy.random.SeedSequence`` spawn keys so that results do not
depend on evaluation order or parallel schedule.  The spawn key is a tuple
of small integers naming the consumer, e.g. ``(DOMAIN_FRAME, scene, frame)``.
"""

import numpy as np

# Spawn-key domains.  Keep these stable: they are part of the
# reproducibility contract for serialized artifacts.
DOMAIN_INSTANCE = 1
DOMAIN_FRAME = 2
DOMAIN_EPISODE = 3
DOMAIN_REBALANCE = 4
DOMAIN_MODEL_INIT = 5
DOMAIN_TRAIN = 6
DOMAIN_AUG = 7
DOMAIN_GRADCHECK = 8


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream named by ``path`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
