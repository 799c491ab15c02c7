"""Counter-based SplitMix64 generator with Box-Muller normals.

The stream is fully specified so it can be reproduced in any language:

* Seeding: a ``(seed, stream)`` pair is hashed to a 64-bit key with
  ``key = mix64(mix64(seed) ^ (stream * GOLDEN))``.
* Draw ``i`` (0-based counter) is ``mix64(key + (i + 1) * GOLDEN)``,
  all arithmetic modulo 2**64.
* ``mix64(z)``: ``z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9``;
  ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``; ``return z ^ (z >> 31)``.
* Uniform in [0, 1): ``(draw >> 11) * 2**-53``.
* Normal pairs via Box-Muller from two consecutive uniforms ``u1, u2``:
  ``r = sqrt(-2 ln(1 - u1))``, ``z0 = r cos(2 pi u2)``, ``z1 = r sin(2 pi u2)``.
  A request for ``n`` normals consumes ``2 * ceil(n / 2)`` draws and
  returns values in order ``z0, z1, z0', z1', ...``.
* Categorical choice among ``m`` equal options: ``floor(u * m)``.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, stream: int = 0) -> int:
    return _mix_int(_mix_int(seed) ^ ((stream * GOLDEN) & _MASK))


class SplitMix64:
    """Deterministic stream addressed by ``(seed, stream)`` plus a draw counter."""

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.key = stream_key(self.seed, self.stream)
        self.counter = int(counter)

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GOLDEN)
        self.counter += n
        return mix64(z)

    def uniform(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n].reshape(shape)

    def choice(self, m: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * m).astype(np.int64), m - 1)

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "SplitMix64":
        return cls(state["seed"], state["stream"], state["counter"])
