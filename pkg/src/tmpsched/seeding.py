"""Named random sub-streams derived from one top-level seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the stream ``name`` under ``seed``.

    Streams are independent of each other, so drawing more schedules never
    perturbs model generation.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def draw_samples(seed: int, m: int, d: int) -> np.ndarray:
    """Initial latents ``x_T ~ N(0, I_d)``, shape ``(m, d)``."""
    return substream(seed, "samples").standard_normal((m, d))
