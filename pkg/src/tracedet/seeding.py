"""Named RNG streams derived from one integer seed."""

import numpy as np

STREAMS = {"sim": 0, "split": 1, "shuffle": 10, "gumbel": 11, "init": 12, "grid": 13, "eval": 14}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), STREAMS[name]])))
