"""Seeded, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by the
run seed and a stream name, so changing how many numbers one component
consumes never perturbs another component.
"""

import zlib

import numpy as np

STREAMS = ("data", "init", "freq_model", "freq_sampler", "eval")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` derived from ``seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))
