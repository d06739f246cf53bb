import zlib

from typing import Dict

import numpy as np

STREAM_NAMES = ('data', 'degrade', 'init', 'shuffle', 'eval')


class SeedStreams:
    """Independent named random streams derived from one seed.

    Each stream name maps to a fixed spawn key, so re-seeding one component
    never shifts the draws of another.
    """
    seed: int
    _cache: Dict[str, np.random.Generator]

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = seed
        self._cache = {}

    def sequence(self, name: str, *extra: int) -> np.random.SeedSequence:
        key = zlib.crc32(name.encode('utf8'))
        return np.random.SeedSequence([self.seed, key, *extra])

    def generator(self, name: str, *extra: int) -> np.random.Generator:
        return np.random.default_rng(self.sequence(name, *extra))

    def stream(self, name: str) -> np.random.Generator:
        # stateful: successive calls continue the same stream
        if name not in self._cache:
            self._cache[name] = self.generator(name)
        return self._cache[name]
