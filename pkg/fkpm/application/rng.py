"""Counter-based random streams.

Every draw is a pure function of (seed, time, draw kind): a Philox generator
is keyed by those three numbers and element i of a vector draw belongs to
particle i. Nothing is shared sequentially across particles or steps, so
results do not depend on how work is scheduled.
"""

from dataclasses import dataclass

import numpy as np

INIT = 0
SELECT_ACCEPT = 1
SELECT_RESAMPLE = 2
MUTATE = 3
MCMC = 4
BACKWARD = 5


@dataclass(frozen=True)
class RngStream:
    seed: int

    def generator(self, time: int, draw: int, salt: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, time, draw, salt])
        key = seq.generate_state(2, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def uniforms(self, time: int, draw: int, size: int, salt: int = 0) -> np.ndarray:
        return self.generator(time, draw, salt).random(size)

    def derive(self, offset: int) -> "RngStream":
        return RngStream(self.seed + offset)
