"""Seed derivation.

Every random draw in the package comes from ``child_rng(master, *path)``.
The path is a sequence of stage names and integers; string parts are hashed
with SHA-256 so the mapping from (master seed, path) to a stream is stable
across processes and Python versions.  Example paths::

    ("generate",)                     synthetic cohort
    ("splits",)                       fold assignment
    ("train", run, member)            init + batch order for one model
    ("sample", run, member, index)    one posterior weight draw

Streams are numpy ``SeedSequence`` children, so distinct paths are
statistically independent and a given path can be evaluated in any order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("seed path integers must be non-negative")
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(master: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=tuple(_word(p) for p in path))


def child_rng(master: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *path)))


def child_seed(master: int, *path) -> int:
    """A 63-bit integer seed for the given path."""
    return int(seed_sequence(master, *path).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


def counter_rng(master: int, *path) -> np.random.Generator:
    """Counter-based (Philox) stream; used for per-sample posterior draws."""
    return np.random.Generator(np.random.Philox(seed_sequence(master, *path)))
