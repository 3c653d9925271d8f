"""Named derived random streams.

All randomness in a run flows from one master seed; components draw from
streams derived by stable string labels (crc32), so e.g. the evaluation
stream is identical no matter how much the training stream consumed.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed_sequence(seed: int, *scope: str | int) -> np.random.SeedSequence:
    keys = [
        zlib.crc32(s.encode("utf-8")) if isinstance(s, str) else int(s) for s in scope
    ]
    return np.random.SeedSequence([int(seed), *keys])


def derive_rng(seed: int, *scope: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, *scope))
