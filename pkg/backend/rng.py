# counter-based random streams
#
# every stochastic operation draws from numpy's Philox-4x64 generator.
# key = (seed, stream id), counter = (0, a, b, c) where (a, b, c) names the
# draw site (step, item, ...). the low counter word is left for the
# generator itself, so sites never overlap and results do not depend on
# call order or on how work is split between threads.

import numpy as np

_MASK64 = (1 << 64) - 1

STREAM_NOISE = 1
STREAM_PAIRING = 2
STREAM_SLICES = 3
STREAM_TRAIN = 4
STREAM_INIT = 5
STREAM_ZCD = 6
STREAM_PHANTOM = 7
STREAM_AUGMENT = 8


def check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def make_rng(seed: int, stream: int = 0, *site: int) -> np.random.Generator:
    """generator for (seed, stream) positioned at draw site `site` (up to 3 ints)"""
    if len(site) > 3:
        raise ValueError("at most three site coordinates are supported")
    words = [0] + [int(v) & _MASK64 for v in site] + [0] * (3 - len(site))
    key = np.array([check_seed(seed), int(stream) & _MASK64], dtype=np.uint64)
    counter = np.array(words, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
