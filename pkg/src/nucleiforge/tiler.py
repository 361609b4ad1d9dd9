"""Overlapping sliding-window tiling and mean stitching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .core import InstanceMap, relabel_sequential

PATCH = 256
STRIDE = 192


def axis_offsets(dim: int, patch: int, stride: int) -> List[int]:
    offs = list(range(0, dim - patch + 1, stride))
    if offs[-1] != dim - patch:
        offs.append(dim - patch)
    return offs


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    patch: int = PATCH
    stride: int = STRIDE

    @property
    def windows(self) -> List[Tuple[int, int]]:
        """Top-left ``(x, y)`` offsets in row-major order."""
        ys = axis_offsets(self.height, self.patch, self.stride)
        xs = axis_offsets(self.width, self.patch, self.stride)
        return [(x, y) for y in ys for x in xs]

    def __len__(self) -> int:
        return len(self.windows)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "patch": self.patch,
            "stride": self.stride,
            "windows": [list(w) for w in self.windows],
        }


def plan_tiles(h: int, w: int, patch: int = PATCH, stride: int = STRIDE) -> TilePlan:
    if not 0 < stride <= patch:
        raise ValueError(f"stride must satisfy 0 < stride <= patch, got {stride}")
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} is smaller than the {patch}px patch; pad or reject it")
    return TilePlan(h, w, patch, stride)


def _check_dims(shape, plan: TilePlan):
    if tuple(shape[:2]) != (plan.height, plan.width):
        raise ValueError(f"source is {tuple(shape[:2])}, plan expects {(plan.height, plan.width)}")


def extract(source: Union[np.ndarray, InstanceMap], plan: TilePlan) -> list:
    """Crop every window; instance maps are renumbered per patch."""
    p = plan.patch
    if isinstance(source, InstanceMap):
        _check_dims(source.shape, plan)
        out = []
        for x, y in plan.windows:
            crop = source.ids[y : y + p, x : x + p]
            present = set(np.unique(crop).tolist()) - {0}
            out.append(relabel_sequential(InstanceMap(crop.copy(), {k: source.classes[k] for k in present})))
        return out
    arr = np.asarray(source)
    _check_dims(arr.shape, plan)
    return [arr[y : y + p, x : x + p].copy() for x, y in plan.windows]


def stitch_dense(patches: Sequence[np.ndarray], plan: TilePlan, reduce: str = "mean") -> np.ndarray:
    """Average overlapping patches back onto the full grid.

    Uses an incremental mean in window order, so a pixel whose covering
    patches agree gets that exact value back.
    """
    if reduce != "mean":
        raise ValueError(f"unsupported reduce {reduce!r}")
    windows = plan.windows
    if len(patches) != len(windows):
        raise ValueError(f"{len(patches)} patches for {len(windows)} windows")
    p = plan.patch
    first = np.asarray(patches[0])
    extra = first.shape[2:]
    acc = np.zeros((plan.height, plan.width) + extra, dtype=np.float64)
    cover = np.zeros((plan.height, plan.width), dtype=np.int64)
    for patch, (x, y) in zip(patches, windows):
        patch = np.asarray(patch)
        if patch.shape != (p, p) + extra:
            raise ValueError(f"patch shape {patch.shape} does not match plan")
        cover[y : y + p, x : x + p] += 1
        n = cover[y : y + p, x : x + p].reshape((p, p) + (1,) * len(extra))
        region = acc[y : y + p, x : x + p]
        region += (patch - region) / n
    return acc
