"""Procedural shapes dataset with attribute conditioning.

Each 32x32 RGB image is a 4x4 grid of 8-pixel cells on a solid background.
One to three shapes (disc, square, triangle) in one of six colors occupy
distinct cells. Every attribute is drawn uniformly, and the conditioning
vector is a fixed one-hot layout of the attributes, so images and conditions
are deterministic functions of (seed, index).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core.rng import RngStream

IMAGE_SIDE = 32
CELL = 8
GRID = IMAGE_SIDE // CELL
N_CELLS = GRID * GRID
MAX_SHAPES = 3
SHAPES = ("disc", "square", "triangle")
BACKGROUNDS = np.array([[24, 24, 32], [236, 232, 220], [40, 72, 56], [92, 92, 140]], dtype=np.uint8)
COLORS = np.array([[230, 40, 40], [40, 200, 60], [40, 90, 230], [240, 210, 40], [200, 60, 220], [40, 210, 220]],
                  dtype=np.uint8)
SLOT_DIM = 1 + len(SHAPES) + len(COLORS) + GRID + GRID  # present, type, color, row, col
COND_DIM = 64
N_CONTENT = 1 + len(SHAPES) * len(COLORS)  # empty + (type, color)


def shape_masks() -> np.ndarray:
    """Boolean ``[3, 8, 8]`` masks for disc, square and triangle."""
    yy, xx = np.mgrid[0:CELL, 0:CELL] + 0.5
    c = CELL / 2
    disc = (yy - c) ** 2 + (xx - c) ** 2 <= 3.2 ** 2
    square = (yy > 1) & (yy < 7) & (xx > 1) & (xx < 7)
    # apex at the top center, base along row 6
    rows = np.floor(yy).astype(int)
    width = (rows - 1) * 0.6
    triangle = (rows >= 1) & (rows <= 6) & (np.abs(xx - c) <= width + 0.5)
    return np.stack([disc, square, triangle])


MASKS = shape_masks()


@dataclass
class Attributes:
    background: np.ndarray  # [n]
    count: np.ndarray  # [n]
    types: np.ndarray  # [n, 3], -1 where absent
    colors: np.ndarray  # [n, 3]
    cells: np.ndarray  # [n, 3] raster cell index, slots sorted by cell

    def __len__(self):
        return len(self.background)

    def __getitem__(self, idx) -> "Attributes":
        return Attributes(self.background[idx], self.count[idx], self.types[idx], self.colors[idx],
                          self.cells[idx])

    def content_grid(self) -> np.ndarray:
        """Per-cell content class ``[n, 16]``: 0 empty, else ``1 + type * 6 + color``."""
        n = len(self)
        out = np.zeros((n, N_CELLS), dtype=np.int64)
        for k in range(MAX_SHAPES):
            sel = self.types[:, k] >= 0
            out[np.nonzero(sel)[0], self.cells[sel, k]] = 1 + self.types[sel, k] * len(COLORS) + self.colors[sel, k]
        return out


def sample_attributes(rng: RngStream, n: int) -> Attributes:
    bg = rng.integers(0, len(BACKGROUNDS), n)
    count = rng.integers(1, MAX_SHAPES + 1, n)
    types = rng.integers(0, len(SHAPES), (n, MAX_SHAPES))
    colors = rng.integers(0, len(COLORS), (n, MAX_SHAPES))
    # distinct cells: first MAX_SHAPES entries of a random permutation per row
    cells = np.argsort(rng.random((n, N_CELLS)), axis=1)[:, :MAX_SHAPES]
    present = np.arange(MAX_SHAPES)[None, :] < count[:, None]
    # slots are ordered by cell so the attribute -> image map is one-to-one
    key = np.where(present, cells, N_CELLS + np.arange(MAX_SHAPES))
    order = np.argsort(key, axis=1, kind="stable")
    cells = np.take_along_axis(cells, order, axis=1)
    types = np.take_along_axis(types, order, axis=1)
    colors = np.take_along_axis(colors, order, axis=1)
    present = np.take_along_axis(present, order, axis=1)
    return Attributes(bg, count, np.where(present, types, -1), np.where(present, colors, -1),
                      np.where(present, cells, -1))


def render(attrs: Attributes) -> np.ndarray:
    """uint8 images ``[n, 32, 32, 3]``."""
    n = len(attrs)
    grid = np.empty((n, GRID, GRID, CELL, CELL, 3), dtype=np.uint8)
    grid[:] = BACKGROUNDS[attrs.background][:, None, None, None, None, :]
    for k in range(MAX_SHAPES):
        idx = np.nonzero(attrs.types[:, k] >= 0)[0]
        if not len(idx):
            continue
        r, c = np.divmod(attrs.cells[idx, k], GRID)
        patch = grid[idx, r, c]
        m = MASKS[attrs.types[idx, k]][..., None]
        grid[idx, r, c] = np.where(m, COLORS[attrs.colors[idx, k]][:, None, None, :], patch)
    return grid.transpose(0, 1, 3, 2, 4, 5).reshape(n, IMAGE_SIDE, IMAGE_SIDE, 3)


def encode_condition(attrs: Attributes) -> np.ndarray:
    """One-hot conditioning vector ``[n, 64]``: background, then 3 slots of (present, type, color, row, col)."""
    n = len(attrs)
    out = np.zeros((n, COND_DIM), dtype=np.float32)
    rows = np.arange(n)
    out[rows, attrs.background] = 1.0
    base = len(BACKGROUNDS)
    for k in range(MAX_SHAPES):
        off = base + k * SLOT_DIM
        sel = np.nonzero(attrs.types[:, k] >= 0)[0]
        r, c = np.divmod(attrs.cells[sel, k], GRID)
        out[sel, off] = 1.0
        out[sel, off + 1 + attrs.types[sel, k]] = 1.0
        out[sel, off + 1 + len(SHAPES) + attrs.colors[sel, k]] = 1.0
        out[sel, off + 1 + len(SHAPES) + len(COLORS) + r] = 1.0
        out[sel, off + 1 + len(SHAPES) + len(COLORS) + GRID + c] = 1.0
    return out


def decode_condition(cond: np.ndarray) -> Attributes:
    cond = np.asarray(cond)
    n = len(cond)
    bg = np.argmax(cond[:, :len(BACKGROUNDS)], axis=1)
    types = np.full((n, MAX_SHAPES), -1)
    colors = np.full((n, MAX_SHAPES), -1)
    cells = np.full((n, MAX_SHAPES), -1)
    base = len(BACKGROUNDS)
    for k in range(MAX_SHAPES):
        off = base + k * SLOT_DIM
        sel = cond[:, off] > 0.5
        t0 = off + 1
        c0 = t0 + len(SHAPES)
        r0 = c0 + len(COLORS)
        q0 = r0 + GRID
        types[sel, k] = np.argmax(cond[sel, t0:c0], axis=1)
        colors[sel, k] = np.argmax(cond[sel, c0:r0], axis=1)
        cells[sel, k] = np.argmax(cond[sel, r0:q0], axis=1) * GRID + np.argmax(cond[sel, q0:q0 + GRID], axis=1)
    return Attributes(bg, (types >= 0).sum(axis=1), types, colors, cells)


CHUNK = 4096


def _concat(parts: list[Attributes]) -> Attributes:
    return Attributes(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                        ("background", "count", "types", "colors", "cells")))


class SyntheticDataset:
    """Deterministic stream: item ``i`` depends only on ``(seed, i)``.

    Attributes are drawn in chunks of 4096 items, one RNG stream per chunk.
    With ``size`` set, indices wrap around so only ``size`` distinct items
    exist (a dataset-size cap).
    """

    def __init__(self, seed: int = 0, size: int | None = None):
        self.seed = int(seed)
        self.size = size

    def _chunk(self, b: int) -> Attributes:
        return sample_attributes(RngStream(self.seed, stream_id=1_000_000 + b), CHUNK)

    def attributes(self, indices) -> Attributes:
        indices = np.asarray(indices, dtype=np.int64).ravel()
        if self.size is not None:
            indices = indices % self.size
        chunks = indices // CHUNK
        parts: list[Attributes | None] = [None] * len(indices)
        for b in np.unique(chunks):
            sel = np.nonzero(chunks == b)[0]
            a = self._chunk(int(b))[indices[sel] - b * CHUNK]
            for j, k in enumerate(sel):
                parts[k] = a[j:j + 1]
        return _concat(parts) if parts else sample_attributes(RngStream(0), 0)

    def items(self, indices) -> tuple[np.ndarray, np.ndarray, Attributes]:
        attrs = self.attributes(indices)
        return render(attrs), encode_condition(attrs), attrs

    def block(self, start: int, n: int) -> tuple[np.ndarray, np.ndarray, Attributes]:
        return self.items(np.arange(start, start + n))

    def sample(self, n: int, rng: RngStream):
        """Fresh uncapped draws from an explicit stream."""
        attrs = sample_attributes(rng, n)
        return render(attrs), encode_condition(attrs), attrs


# -- Markov-chain token data ----------------------------------------------------

def random_markov_chain(vocab: int, rng: RngStream, concentration: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """(initial distribution, row-stochastic transition matrix) with Dirichlet rows."""
    initial = rng.gen.dirichlet(np.full(vocab, 1.0))
    transition = rng.gen.dirichlet(np.full(vocab, concentration), size=vocab)
    return initial, transition


def sample_markov(initial: np.ndarray, transition: np.ndarray, n: int, length: int, rng: RngStream) -> np.ndarray:
    """``n`` sequences of ``length`` tokens drawn by inverse-CDF sampling."""
    cum0 = np.cumsum(initial)
    cum = np.cumsum(transition, axis=1)
    V = len(initial)
    u = rng.random((n, length))
    out = np.empty((n, length), dtype=np.int64)
    out[:, 0] = np.minimum(np.searchsorted(cum0, u[:, 0] * cum0[-1], side="right"), V - 1)
    for i in range(1, length):
        rows = cum[out[:, i - 1]]
        out[:, i] = np.minimum((rows < (u[:, i] * rows[:, -1])[:, None]).sum(axis=1), V - 1)
    return out
