"""Seeded, splittable random streams.

Every random draw in the toolkit flows through an :class:`Rng`. The
underlying bit generator is Philox (counter-based), and child streams are
derived by hashing the parent key together with a string label. Children
are therefore independent of how much the parent has been consumed, so
adding a new consumer never shifts the draws seen by existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError


class Rng:
    """Deterministic random stream with named sub-streams."""

    def __init__(self, seed: int, _key: bytes | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        if _key is None:
            _key = hashlib.sha256(self.seed.to_bytes(8, "little")).digest()
        self._key = _key
        words = np.frombuffer(_key[:16], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=words))

    def split(self, label: str) -> "Rng":
        """Derive the independent child stream for the given purpose.

        Splitting is a pure function of (seed, path of labels); it does not
        consume or depend on draws made from this stream.
        """
        key = hashlib.sha256(self._key + label.encode("utf-8")).digest()
        return Rng(self.seed, _key=key)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size=None, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def standard_gamma(self, shape, size=None):
        return self._gen.standard_gamma(shape, size)


def sample_beta(rng: Rng, alpha: float) -> float:
    """Draw from the symmetric Beta(alpha, alpha) distribution.

    Uses the two-gamma construction, which stays correct for alpha < 1
    where naive rejection samplers break down. The result is strictly
    inside (0, 1); the resample loop only triggers when a gamma draw
    underflows to zero.
    """
    if not alpha > 0:
        raise ConfigError(f"beta distribution parameter must be > 0, got {alpha}")
    while True:
        g1 = float(rng.standard_gamma(alpha))
        g2 = float(rng.standard_gamma(alpha))
        if g1 + g2 > 0.0:
            lam = g1 / (g1 + g2)
            if 0.0 < lam < 1.0:
                return lam
