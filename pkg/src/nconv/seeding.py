"""Deterministic, splittable random number generation.

Every stochastic component (parameter init, data synthesis, shuffling)
derives its generator from an integer seed plus a path of string/int keys,
so independent components never share streams and reruns are bit-identical.
"""
from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Return a Generator for the stream named by ``keys`` under ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
