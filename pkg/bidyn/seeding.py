"""Named random substreams derived from one seed.

Every component draws from its own stream so that adding draws in one place
never shifts the numbers another component sees.
"""
import zlib

from typing import Dict

import numpy as np
import torch


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RandomStreams:
    """Lazily created numpy and torch generators keyed by name.

    Parameters
    ----------
    seed: int
        root seed; identical seeds give identical streams for every name
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._numpy: Dict[str, np.random.Generator] = {}
        self._torch: Dict[str, torch.Generator] = {}

    def _sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=self.seed, spawn_key=(_name_key(name),)
        )

    def numpy(self, name: str) -> np.random.Generator:
        if name not in self._numpy:
            self._numpy[name] = np.random.default_rng(self._sequence(name))
        return self._numpy[name]

    def torch(self, name: str) -> torch.Generator:
        if name not in self._torch:
            # separate child so the torch seed does not replay the numpy draws
            child = self._sequence(name).spawn(1)[0]
            g = torch.Generator()
            g.manual_seed(int(child.generate_state(1, dtype=np.uint64)[0] >> 1))
            self._torch[name] = g
        return self._torch[name]


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    """Seed a fresh torch generator from a numpy generator."""
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**62)))
    return g
