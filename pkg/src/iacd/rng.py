"""Reproducible random stream derivation.

Every stochastic routine in the package draws from a ``numpy.random.Generator``
backed by the counter-based Philox bit generator. Streams are addressed by a
master seed plus an integer path, so replication ``r`` of cell ``c`` always
sees the same draws no matter how work is split across processes.
"""

import numpy as np


def substream(master_seed, *path):
    """Return a Generator for the stream addressed by ``(master_seed, *path)``.

    Parameters
    ----------
    master_seed : int
        Experiment-level seed.
    *path : int
        Hierarchical stream coordinates, e.g. ``(cell, replication, attempt)``.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(master_seed, *path):
    """Collapse ``(master_seed, *path)`` into a single child seed integer."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


def unit_exponential(rng, size):
    """Unit-mean exponential draws via inversion, ``-log(U)`` with U in (0, 1].

    Inversion (rather than ziggurat) keeps draws reproducible from the raw
    uniform stream and lets scaled Weibull draws share the same uniforms.
    """
    u = rng.random(size)
    e = -np.log1p(-u)
    if np.any(e == 0.0):  # u == 0 happens with probability 2**-53 per draw
        e = np.where(e == 0.0, np.finfo(float).tiny, e)
    return e
