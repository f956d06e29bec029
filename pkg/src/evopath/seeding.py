"""Labeled RNG streams derived from a single root seed.

Every random draw in a run goes through a generator obtained from
``stream(root, label)``. The label is hashed into the ``spawn_key`` of a
``numpy.random.SeedSequence`` so streams are independent of the order in
which they are requested, which keeps serial and threaded runs identical.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def stream(root_seed: int, label: str) -> np.random.Generator:
    """Generator for ``label`` (conventionally ``module.purpose.index``)."""
    seq = np.random.SeedSequence(int(root_seed), spawn_key=_label_key(label))
    return np.random.Generator(np.random.PCG64(seq))


class Streams:
    """Convenience wrapper binding a root seed."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)

    def __call__(self, *parts) -> np.random.Generator:
        return stream(self.root_seed, ".".join(str(p) for p in parts))

    def seed_for(self, *parts) -> int:
        """Integer sub-seed, for handing to code that wants an int."""
        return int(self(*parts).integers(0, 2**63 - 1))
