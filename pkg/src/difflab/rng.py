"""Seeded, counter-based random streams.

Uniforms come from numpy's Philox bit generator (a counter-based generator
whose output is identical on every platform); Gaussians are produced from
those uniforms by Box-Muller so that no platform-specific sampling routine
sits between the seed and the draws.
"""

from __future__ import annotations

import numpy as np

_TWO_PI = 2.0 * np.pi


class RngStream:
    """A reproducible stream of uniform and Gaussian draws.

    ``counter`` is the number of uniforms consumed so far. Two streams with the
    same seed that receive the same sequence of requests produce identical
    draws. A stream is not meant to be shared between threads; use
    :meth:`spawn` to hand independent children to parallel workers.
    """

    def __init__(self, seed: int = 0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = seed
        self.counter = 0
        self._gen = np.random.Generator(np.random.Philox(seed))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        u = self._gen.random(shape)
        self.counter += int(np.size(u))
        return u

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller (both branches are used)."""
        size = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)])[:size]
        if shape == ():
            return z[0]
        return z.reshape(shape)

    def choice(self, probs, n: int) -> np.ndarray:
        """Indices drawn i.i.d. from the categorical distribution ``probs``."""
        cdf = np.cumsum(np.asarray(probs, dtype=float))
        idx = np.searchsorted(cdf, self.uniform(n) * cdf[-1], side="right")
        return np.minimum(idx, len(cdf) - 1)

    def spawn(self, k: int) -> list[RngStream]:
        """``k`` child streams with distinct seeds derived from this one."""
        children = np.random.SeedSequence(self.seed).spawn(k)
        return [RngStream(int(c.generate_state(1, np.uint64)[0])) for c in children]


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))
