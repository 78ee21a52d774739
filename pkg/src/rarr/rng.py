"""Named random streams expanded from one global seed.

Each stream is keyed by a tuple of names, so drawing from one stream never
shifts another (corpus synthesis, parameter init, batching and latent noise
stay independent of each other and of call order).
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(names) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(n).encode()) for n in names)


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=_key(names))


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *names))


def stream_seed(seed: int, *names) -> int:
    """A 63-bit integer seed for libraries that want a plain int."""
    return int(seed_sequence(seed, *names).generate_state(1, np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(seed, *names))
    return g


def stream_label(seed: int, *names) -> str:
    return f"seed={int(seed)}/" + "/".join(str(n) for n in names)
