"""Child-seed derivation.

Every stochastic step draws from a generator seeded by
``derive_seed(master, tag, *indices)``: the blake2b digest of the
``/``-joined string ``"{master}/{tag}/{i0}/{i1}/..."`` read as a 63-bit
unsigned integer. The result depends only on its arguments, so parallel
workers and re-runs see identical streams.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, tag: str, *indices: int) -> int:
    key = "/".join([str(int(master)), tag, *(str(int(i)) for i in indices)])
    digest = hashlib.blake2b(key.encode("ascii"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def child_rng(master: int, tag: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, tag, *indices))
