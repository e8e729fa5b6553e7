"""Deterministic random-stream derivation.

Every stochastic unit of work (simulation replicate, imputation index,
sensitivity grid point) gets its own generator derived from the master seed
and a tuple of non-negative integers identifying the unit:

    rng = derive_rng(master_seed, REPLICATE, r, IMPUTATION, t)

The derivation feeds ``(master_seed, *path)`` as entropy to
``numpy.random.SeedSequence``, so streams for distinct paths are
independent and a unit's stream never depends on how many sibling units
exist or in which order they run.  This is what makes replicates and grid
points safe to execute in parallel and lets one method's draws stay fixed
when another method is added to a run.
"""

from __future__ import annotations

import numpy as np

# Path tags.  Keeping them distinct (and stable) is what guarantees that
# e.g. replicate 3's data stream never collides with imputation 3's stream.
DATA = 0
IMPUTATION = 1
REPLICATE = 2
METHOD_NSC = 3
METHOD_MAR = 4
PIPELINE = 5


def seed_sequence(master_seed: int, *path: int) -> np.random.SeedSequence:
    """SeedSequence for the work unit identified by ``path``."""
    entropy = (int(master_seed),) + tuple(int(p) for p in path)
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for the work unit identified by ``path``."""
    return np.random.default_rng(seed_sequence(master_seed, *path))


def derive_int_seed(master_seed: int, *path: int) -> int:
    """A plain integer seed (for APIs that take one) derived like a stream."""
    return int(seed_sequence(master_seed, *path).generate_state(1)[0])
