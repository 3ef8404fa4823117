"""Named RNG streams derived from one master seed.

Each consumer (weight init, timestep draws, noise draws, shuffling, the
sampler) gets its own generator so that switching the alignment term on or
off never shifts the random numbers another consumer sees.
"""

from __future__ import annotations

import numpy as np
import torch

STREAMS = {
    "init": 0,
    "timestep": 1,
    "noise": 2,
    "shuffle": 3,
    "sampler": 4,
    "align_init": 5,
    "expert_init": 6,
    "expert_shuffle": 7,
}


def stream_seed(master_seed: int, name: str, *extra: int) -> int:
    if name not in STREAMS:
        raise KeyError(f"unknown RNG stream {name!r}")
    ss = np.random.SeedSequence([int(master_seed), STREAMS[name], *map(int, extra)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32 | int(lo)) & ((1 << 63) - 1)


def generator(master_seed: int, name: str, *extra: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(master_seed, name, *extra))
    return g
