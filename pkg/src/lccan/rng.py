"""Named, counter-based random streams.

Every stochastic choice draws from ``stream(seed, name, *indices)``, a Philox
generator keyed by a hash of its arguments, so results never depend on call
order elsewhere in the program.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    h = hashlib.sha256(repr((int(seed),) + tuple(str(n) for n in names)).encode()).digest()
    key = int.from_bytes(h[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
