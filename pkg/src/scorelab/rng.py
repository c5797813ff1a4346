"""Reproducible random streams.

Every stream is a Philox (counter-based) generator keyed by
``(run seed, stream id)``, so streams never overlap and do not depend on the
order in which they are created.
"""

import numpy as np

GENERATOR_NAME = "numpy.Philox/SeedSequence"

# Fixed stream ids so that subcommands draw from the same places.
INIT = 0
DATA = 1
NOISE = 2
SAMPLER = 3
EVAL = 4


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, stream_id)``."""
    seq = np.random.SeedSequence([int(seed), int(stream_id)])
    return np.random.Generator(np.random.Philox(seq))


def spawn(seed: int, stream_id: int, n: int) -> list:
    """``n`` independent child streams of one stream, e.g. one per chain shard."""
    seq = np.random.SeedSequence([int(seed), int(stream_id)])
    return [np.random.Generator(np.random.Philox(s)) for s in seq.spawn(n)]
