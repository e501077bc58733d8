"""Named random streams derived from one master seed.

Every logical noise source gets its own stream keyed by a tuple of small
integers, e.g. ``(OUTER_NOISE, t)``. Streams are ``numpy.random.Generator``
objects over the counter-based Philox bit generator seeded through
``SeedSequence(entropy=seed, spawn_key=key)``; Gaussians come from
``Generator.standard_normal`` (numpy's ziggurat sampler). Given the same seed
and key the draws are identical across platforms and independent of the order
in which streams are created.
"""
from __future__ import annotations

import numpy as np

INNER_G = 1
INNER_PENALTY = 2
OUTER_NOISE = 3
OUTER_BATCH = 4
INNER_BATCH = 5
MISC = 9


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def child(rng: np.random.Generator, *key: int) -> np.random.Generator:
    """Deterministic sub-stream of an existing stream (does not advance ``rng``)."""
    parent = rng.bit_generator.seed_seq
    ss = np.random.SeedSequence(entropy=parent.entropy, spawn_key=tuple(parent.spawn_key) + tuple(key))
    return np.random.Generator(np.random.Philox(ss))
