"""Named random substreams derived from a single run seed.

Every consumer asks for a stream by purpose name ("folds", "init", "synth", ...)
so adding a new consumer never perturbs the draws seen by existing ones.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *names: str) -> np.random.Generator:
    """Return a generator for the substream identified by ``names``.

    The same (seed, names) pair always yields an identical generator,
    independent of platform and of any other stream.
    """
    label = "/".join(names).encode("utf-8")
    digest = hashlib.blake2b(label, digest_size=8).digest()
    key = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
