"""Named, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream, *indices)``. Any single replicate can therefore be
regenerated in isolation, independent of worker scheduling.

Streams
-------
population
    covariates, compliance labels and potential outcomes of a simulated
    population.
randomization
    cluster treatment assignment; indexed by replication.
bootstrap
    cluster resampling; indexed by (replication, replicate).
noise
    per-unit noise of the randomized learners; indexed by target type and
    the index of the stream that produced the data being classified.
"""
import numpy as np

STREAMS = {"population": 0, "randomization": 1, "bootstrap": 2, "noise": 3}


def stream(seed, name, *indices):
    """Return an independent ``numpy.random.Generator`` for a named stream."""
    if name not in STREAMS:
        raise ValueError(f"unknown stream {name!r}; expected one of {sorted(STREAMS)}")
    key = (STREAMS[name],) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed, name, *indices):
    """Derive an integer seed for a sub-computation from a named stream."""
    return int(stream(seed, name, *indices).integers(0, 2**63 - 1))
