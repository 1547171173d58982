"""
Counter-based random streams.

Every stream is keyed by ``(seed, purpose, *index)``, so samples depend only on
the seed and the logical position of the draw, never on the order or the
worker in which chunks are generated. ``stream`` returns a numpy Philox
generator for sequential draws; ``KeyedStream`` evaluates Philox-4x32 directly
on arrays of (path or particle index, draw number) so that every index owns
its own stream without a generator object per index.
"""

from typing import Tuple, Union

import numpy as np

PATHS = 1
OBSERVATIONS = 2
TRAINING = 3
INIT = 4
PARTICLES = 5
SPLIT = 6
SHUFFLE = 7
STARTS = 8

# Paths and sequences are processed in fixed-size chunks.
CHUNK_SIZE = 4096

PHILOX_ROUNDS = 10
_MUL = (np.uint64(0xD2511F53), np.uint64(0xCD9E8D57))
_BUMP = (np.uint64(0x9E3779B9), np.uint64(0xBB67AE85))
_LOW = np.uint64(0xFFFFFFFF)
_HALF = np.uint64(32)


def stream(seed: int, purpose: int, *index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(purpose, *index))
    return np.random.Generator(np.random.Philox(seq))


def chunks(total: int, size: int = CHUNK_SIZE):
    for index, start in enumerate(range(0, total, size)):
        yield index, start, min(start + size, total)


def philox4x32(counter, key, rounds: int = PHILOX_ROUNDS) -> np.ndarray:
    """Philox-4x32 on rows of 32-bit words: counter (n, 4), key (n, 2)."""
    ctr = np.asarray(counter, dtype=np.uint64).reshape(-1, 4) & _LOW
    keys = np.broadcast_to(
        np.asarray(key, dtype=np.uint64).reshape(-1, 2) & _LOW, (ctr.shape[0], 2)
    )
    c0, c1, c2, c3 = (ctr[:, i].copy() for i in range(4))
    k0, k1 = keys[:, 0].copy(), keys[:, 1].copy()
    for r in range(rounds):
        if r:
            k0 = (k0 + _BUMP[0]) & _LOW
            k1 = (k1 + _BUMP[1]) & _LOW
        p0 = c0 * _MUL[0]
        p1 = c2 * _MUL[1]
        c0, c1, c2, c3 = (
            (p1 >> _HALF) ^ c1 ^ k0,
            p1 & _LOW,
            (p0 >> _HALF) ^ c3 ^ k1,
            p0 & _LOW,
        )
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


def _open_unit(high: np.ndarray, low: np.ndarray) -> np.ndarray:
    """53-bit uniforms in (0, 1) from two 32-bit words."""
    bits = (high >> np.uint64(5)).astype(float) * 67108864.0 + (
        low >> np.uint64(6)
    ).astype(float)
    return (bits + 0.5) / 9007199254740992.0


Draw = Union[int, Tuple[int, int]]


class KeyedStream:
    """
    Standard normals for many indices at once. Draw ``(step, sub)`` of index
    ``i`` depends on ``(seed, purpose, *index, i, step, sub)`` only.
    """

    def __init__(self, seed: int, purpose: int, *index: int):
        seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(purpose, *index))
        self.base = seq.generate_state(2, dtype=np.uint32).astype(np.uint64)

    def keys(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.uint64).ravel()
        return np.stack(
            [self.base[0] ^ (ids & _LOW), self.base[1] ^ (ids >> _HALF)], axis=1
        )

    def normals(self, ids, draw: Draw, size: int) -> np.ndarray:
        """(len(ids), size) Box-Muller normals, two per Philox block."""
        step, sub = (draw, 0) if np.isscalar(draw) else draw
        keys = self.keys(ids)
        count = keys.shape[0]
        blocks = (size + 1) // 2
        counter = np.zeros((count * blocks, 4), dtype=np.uint64)
        counter[:, 0] = np.tile(np.arange(blocks, dtype=np.uint64), count)
        counter[:, 1] = int(step) & 0xFFFFFFFF
        counter[:, 2] = int(sub) & 0xFFFFFFFF
        counter[:, 3] = (int(step) >> 32) & 0xFFFFFFFF
        words = philox4x32(counter, np.repeat(keys, blocks, axis=0)).astype(np.uint64)
        radius = np.sqrt(-2.0 * np.log(_open_unit(words[:, 0], words[:, 1])))
        angle = 2.0 * np.pi * _open_unit(words[:, 2], words[:, 3])
        pairs = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        return pairs.reshape(count, 2 * blocks)[:, :size]
