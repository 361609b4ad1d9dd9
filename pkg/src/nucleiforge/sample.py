"""Rare-class countermeasures: tile replication plans and the constrained mosaic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import nnls

from .core import CLASS_CODES, NUM_CLASSES, ClassId, InstanceMap, composition, relabel_sequential

# grid k (0-based) must contain this class; the fourth grid is free
MOSAIC_REQUIRED = (ClassId.NEUTROPHIL, ClassId.EOSINOPHIL, ClassId.PLASMA, None)
TILE_SHAPE = (256, 256)


class ConstraintError(ValueError):
    """A mosaic grid lacks its required class, or no tile can fill it."""


@dataclass
class DatasetStats:
    """Per-tile class counts, shape (n_tiles, 6); column j is class code j + 1."""

    tile_counts: np.ndarray

    def __post_init__(self):
        self.tile_counts = np.asarray(self.tile_counts, dtype=np.int64)
        if self.tile_counts.ndim != 2 or self.tile_counts.shape[1] != NUM_CLASSES:
            raise ValueError("tile_counts must have shape (n_tiles, 6)")
        if (self.tile_counts < 0).any():
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_maps(cls, maps: Sequence[InstanceMap]) -> "DatasetStats":
        return cls(np.array([composition(m) for m in maps]).reshape(-1, NUM_CLASSES))

    @property
    def n_tiles(self) -> int:
        return self.tile_counts.shape[0]

    @property
    def class_counts(self) -> np.ndarray:
        return self.tile_counts.sum(axis=0)

    def tiles_with(self, class_id: int) -> np.ndarray:
        return np.nonzero(self.tile_counts[:, class_id - 1] > 0)[0]


def _as_target(target) -> np.ndarray:
    if isinstance(target, Mapping):
        t = np.zeros(NUM_CLASSES)
        for k, v in target.items():
            code = ClassId[k.upper()] if isinstance(k, str) else ClassId(int(k))
            t[int(code) - 1] = v
    else:
        t = np.asarray(target, dtype=np.float64)
    if t.shape != (NUM_CLASSES,) or (t < 0).any() or t.sum() <= 0:
        raise ValueError("target must be 6 non-negative frequencies with a positive sum")
    return t / t.sum()


def replicated_frequencies(stats: DatasetStats, factors, target) -> np.ndarray:
    """Class frequencies of the replicated corpus over the classes with nonzero target."""
    t = _as_target(target)
    counts = np.asarray(factors, dtype=np.float64) @ stats.tile_counts
    counts = np.where(t > 0, counts, 0.0)
    return counts / counts.sum()


def upsample_plan(
    stats: DatasetStats,
    target,
    tolerance: float = 0.05,
    max_multiplier: int = 1000,
) -> np.ndarray:
    """Integer replication factor (>= 1) per tile balancing classes to ``target``.

    Frequencies are compared only over classes with nonzero target, and must
    land within ``tolerance`` (relative) of it.  A relaxed non-negative least
    squares solution is scaled by the smallest integer multiplier whose
    rounding satisfies the tolerance.
    """
    t = _as_target(target)
    active = np.nonzero(t > 0)[0]
    totals = stats.class_counts
    for j in active:
        if totals[j] == 0:
            raise ValueError(f"target unreachable: no tile contains {ClassId(j + 1).name.lower()}")

    N = stats.tile_counts[:, active].T.astype(np.float64)  # classes x tiles
    # factor = 1 + extra with extra >= 0, and N @ factor = scale * target for a
    # free scale >= 0; rows weighted by 1/target so residuals are relative
    w = 1.0 / t[active]
    A = np.hstack([N, -t[active][:, None]]) * w[:, None]
    b = -N.sum(axis=1) * w
    sol, _ = nnls(A, b, maxiter=50 * A.shape[1])
    relaxed = 1.0 + sol[:-1]

    for mult in range(1, max_multiplier + 1):
        factors = np.maximum(np.rint(mult * relaxed), 1).astype(np.int64)
        freq = replicated_frequencies(stats, factors, t)
        if np.all(np.abs(freq[active] - t[active]) <= tolerance * t[active]):
            return factors
    raise ValueError(f"no integer plan within {tolerance:.0%} of target up to multiplier {max_multiplier}")


@dataclass(frozen=True)
class MosaicRecipe:
    """Tile indices per grid (grid order: neutrophil, eosinophil, plasma, free)
    and the quadrant (0=TL, 1=TR, 2=BL, 3=BR) each grid is placed in."""

    sources: Tuple[int, int, int, int]
    quadrants: Tuple[int, int, int, int] = (0, 1, 2, 3)
    seed: Optional[int] = None

    def __post_init__(self):
        if len(self.sources) != 4 or sorted(self.quadrants) != [0, 1, 2, 3]:
            raise ValueError("recipe needs 4 sources and a permutation of quadrants 0..3")

    def to_dict(self) -> dict:
        return {"sources": list(self.sources), "quadrants": list(self.quadrants), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MosaicRecipe":
        return cls(tuple(int(s) for s in d["sources"]), tuple(int(q) for q in d["quadrants"]), d.get("seed"))


def draw_recipe(stats: DatasetStats, seed: int) -> MosaicRecipe:
    rng = np.random.default_rng(seed)
    sources = []
    for grid, required in enumerate(MOSAIC_REQUIRED):
        pool = np.arange(stats.n_tiles) if required is None else stats.tiles_with(required)
        if pool.size == 0:
            raise ConstraintError(f"no tile contains {required.name.lower()} for grid {grid + 1}")
        sources.append(int(rng.choice(pool)))
    quadrants = tuple(int(q) for q in rng.permutation(4))
    return MosaicRecipe(tuple(sources), quadrants, seed)


def compose_mosaic(
    recipe: MosaicRecipe,
    tiles: Sequence[InstanceMap],
    tile_shape: Tuple[int, int] = TILE_SHAPE,
) -> InstanceMap:
    """Place the four grid tiles (given in grid order) into a 2x2 mosaic without rescaling."""
    if len(tiles) != 4:
        raise ValueError("compose_mosaic takes exactly 4 tiles, in grid order")
    for grid, (tile, required) in enumerate(zip(tiles, MOSAIC_REQUIRED)):
        if tile.shape != tuple(tile_shape):
            raise ValueError(f"grid {grid + 1} tile is {tile.shape}, expected {tuple(tile_shape)}")
        if required is not None and int(required) not in tile.classes.values():
            raise ConstraintError(f"grid {grid + 1} contains no {required.name.lower()}")

    th, tw = tile_shape
    ids = np.zeros((2 * th, 2 * tw), dtype=np.int64)
    classes = {}
    offset = 0
    for tile, quad in zip(tiles, recipe.quadrants):
        r, c = divmod(quad, 2)
        ids[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = np.where(tile.ids > 0, tile.ids + offset, 0)
        classes.update({k + offset: v for k, v in tile.classes.items()})
        offset += int(tile.ids.max()) if tile.ids.size else 0
    return relabel_sequential(InstanceMap(ids, classes))


def mosaic_from_corpus(
    recipe: MosaicRecipe,
    corpus: Sequence[InstanceMap],
    tile_shape: Tuple[int, int] = TILE_SHAPE,
) -> InstanceMap:
    return compose_mosaic(recipe, [corpus[i] for i in recipe.sources], tile_shape)
