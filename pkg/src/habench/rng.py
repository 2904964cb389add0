"""Counter-based pseudo-random substreams built on the SplitMix64 mixer.

Every draw is a pure function of ``(seed, stream, index, draw)``:

    key    = mix64(seed) ^ mix64(stream)
    subkey = mix64(key + (index + 1) * GOLDEN)
    word   = mix64(subkey + (draw + 1) * GOLDEN)

where ``mix64`` is the SplitMix64 output finalizer and ``GOLDEN`` is
``0x9E3779B97F4A7C15``. Each ``(stream, index)`` pair is an independent
SplitMix64 sequence, so voxels or images can be generated in any order or in
parallel with bit-identical results. Uniforms use the top 53 bits of a word;
normals use the Box-Muller cosine branch on two consecutive uniforms.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def mix64(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * _M1
        z = z ^ (z >> np.uint64(27))
        z = z * _M2
        return z ^ (z >> np.uint64(31))


class Substreams:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._root = mix64(np.uint64(self.seed))

    def _words(self, stream: int, index, n_draws: int) -> np.ndarray:
        index = np.asarray(index, dtype=np.uint64)
        key = self._root ^ mix64(np.uint64(stream))
        draws = np.arange(1, n_draws + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            sub = mix64(key + (index + np.uint64(1)) * GOLDEN)
            return mix64(sub[..., None] + draws * GOLDEN)

    def uniform(self, stream: int, index, n_draws: int = 1) -> np.ndarray:
        """Uniforms on the open interval (0, 1), shape ``index.shape + (n_draws,)``."""
        words = self._words(stream, index, n_draws)
        return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def normal(self, stream: int, index, n_draws: int = 1) -> np.ndarray:
        u = self.uniform(stream, index, 2 * n_draws)
        u1, u2 = u[..., 0::2], u[..., 1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
