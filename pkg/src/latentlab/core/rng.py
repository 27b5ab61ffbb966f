"""Counter-based random streams.

A stream is keyed by ``(seed, stream_id)`` on top of numpy's Philox bit
generator, so the draw sequence depends only on the key and on how many
draws were taken before, never on thread layout.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = (self.stream_id << 64) | self.seed
        self._bitgen = np.random.Philox(key=key, counter=int(counter))
        self.gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        c = self._bitgen.state["state"]["counter"]
        return int(sum(int(v) << (64 * i) for i, v in enumerate(c)))

    def spawn(self, stream_id: int) -> "RngStream":
        """Independent stream sharing this seed."""
        return RngStream(self.seed, stream_id)

    def state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "counter": [int(v) for v in st["state"]["counter"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["stream_id"])
        st = rng._bitgen.state
        st["state"]["counter"] = np.asarray(state["counter"], dtype=np.uint64)
        st["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        rng._bitgen.state = st
        return rng

    # -- draws ---------------------------------------------------------------
    def normal(self, shape, dtype=np.float32, std: float = 1.0) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
        """Normal draws resampled until they fall within ``bound`` standard deviations."""
        out = self.gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, shape=None, dtype=np.float64):
        out = self.gen.uniform(low, high, shape)
        return out.astype(dtype) if shape is not None else float(out)

    def integers(self, low, high=None, shape=None):
        return self.gen.integers(low, high, size=shape)

    def bernoulli(self, p, shape=None) -> np.ndarray:
        return self.gen.random(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def random(self, shape=None):
        return self.gen.random(shape)
