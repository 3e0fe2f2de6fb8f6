"""Named random streams derived from a single master seed.

Every source of randomness in the toolkit draws from one of a fixed set of
named substreams so that components can be re-seeded or varied independently
(masking can change without disturbing initialization, and so on).
"""

import numpy as np

STREAM_NAMES = ("mask", "init", "diffusion-noise", "sampling", "negatives", "synth")


class RngHub:
    """One generator per named stream, all derived from a master seed."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._streams = {}
        for idx, name in enumerate(STREAM_NAMES):
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(idx,))
            self._streams[name] = np.random.Generator(np.random.PCG64(ss))

    def stream(self, name):
        if name not in self._streams:
            raise KeyError(f"unknown rng stream {name!r}")
        return self._streams[name]

    def state(self):
        """Serializable snapshot of all stream states."""
        return {name: gen.bit_generator.state for name, gen in self._streams.items()}

    def restore(self, state):
        for name, st in state.items():
            self._streams[name].bit_generator.state = st


def cell_generator(base_seed, *indices):
    """Stateless generator for one work item (e.g. one item-modality cell).

    Deriving noise from (seed, indices) rather than a shared stream keeps
    generation deterministic regardless of batching or thread scheduling.
    """
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(i) for i in indices))
    return np.random.Generator(np.random.PCG64(ss))
