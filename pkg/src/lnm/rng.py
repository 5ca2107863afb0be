"""Deterministic, splittable random streams.

Every source of randomness in the package flows through a ``Stream``: a
(seed, path) pair mapped onto a counter-based Philox generator via numpy's
SeedSequence spawning. The same (seed, path, call sequence) produces the
same bits on every platform and regardless of how many other streams
exist, which is what makes multi-worker runs byte-identical to serial
ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Stream:
    """Identifier for one independent random stream."""

    seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def child(self, *indices: int) -> "Stream":
        """Derive a sub-stream; children with different indices never collide."""
        return Stream(self.seed, self.path + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


# Fixed role indices so streams stay stable when code is reordered.
ROLE_DATA = 0
ROLE_SPLIT = 1
ROLE_LONGTAIL = 2
ROLE_NOISE_TRAIN = 3
ROLE_NOISE_VAL = 4
ROLE_REF_MODEL = 5
ROLE_MODEL_A = 6
ROLE_MODEL_B = 7
ROLE_EPOCH = 8      # child(ROLE_EPOCH, t) -> per-epoch batch order / method draws
