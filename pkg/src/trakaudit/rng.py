"""Named random streams derived from one master seed.

Each stream is a Philox (counter-based) generator keyed by the master seed
and a fixed spawn key, so the draws of one stream never depend on how much
another stream has consumed::

    design      features of training rows
    test        features of fresh test rows
    beta        true parameter vector
    responses   responses of training rows
    test_resp   responses of test rows
    removal     which training rows get removed
    projection  Gaussian projection matrices

Per-trial seeds come from ``trial_seed``.
"""

import numpy as np

STREAMS = {
    "design": 0,
    "test": 1,
    "beta": 2,
    "responses": 3,
    "test_resp": 4,
    "removal": 5,
    "projection": 6,
    "trial": 7,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = (STREAMS[name],) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def trial_seed(seed: int, trial: int) -> int:
    """Independent 63-bit seed for trial ``trial`` of a run seeded with ``seed``."""
    return int(stream(seed, "trial", trial).integers(0, 2**63 - 1))
