"""Seeded randomness with independently derived sub-streams.

Every random draw in the package comes from one documented generator,
PCG64, seeded through numpy's SeedSequence. Consumers never share a
stream: each (hash sampling, dropout masks, weight init, data
generation, Monte-Carlo trials, ...) derives its own generator from the
master seed plus a label path, so toggling one feature cannot shift the
draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigurationError

ALGORITHM = "pcg64"

_U64 = 2**64


def _check_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)) or not 0 <= int(seed) < _U64:
        raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return int(seed)


def make_rng(seed: int) -> np.random.Generator:
    """Master generator for `seed`. Identical seed, identical stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_check_seed(seed))))


def derive(seed: int, *path: str | int) -> np.random.Generator:
    """Generator for the sub-stream named by `path` under `seed`.

    Labels may be strings (hashed with CRC-32, which is fixed by RFC 1952
    and identical on every platform) or non-negative integers such as a
    sample or trial index.
    """
    key = []
    for part in path:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode("utf-8")))
        elif isinstance(part, (int, np.integer)) and int(part) >= 0:
            key.append(int(part))
        else:
            raise ConfigurationError(f"sub-seed labels must be str or int >= 0, got {part!r}")
    seq = np.random.SeedSequence(entropy=_check_seed(seed), spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(seq))
