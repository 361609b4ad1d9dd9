"""Synthetic ground truth and idealised model outputs.

Everything here is a pure function of its inputs and a seed, so downstream
post-processing can be checked by round-tripping against known instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import CLASS_CODES, NUM_CLASSES, ClassGroup, InstanceMap, instance_boxes

MASK_SIZE = 16


class PlacementError(RuntimeError):
    """Raised when the requested number of nuclei cannot be packed."""


@dataclass(frozen=True)
class SynthSpec:
    height: int = 64
    width: int = 64
    count_range: Tuple[int, int] = (4, 12)
    # full ellipse axis lengths in pixels
    axis_range: Tuple[float, float] = (5.0, 9.0)
    separation: float = 2.0
    class_mix: Tuple[float, ...] = (1 / 6,) * 6
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad count_range {self.count_range}")
        a0, a1 = self.axis_range
        if a0 < 3 or a1 < a0:
            raise ValueError(f"axis_range must satisfy 3 <= min <= max, got {self.axis_range}")
        if self.separation < 1:
            raise ValueError("separation must be >= 1 px")
        mix = np.asarray(self.class_mix, dtype=float)
        if mix.shape != (NUM_CLASSES,) or (mix < 0).any() or abs(mix.sum() - 1) > 1e-9:
            raise ValueError("class_mix must be 6 non-negative probabilities summing to 1")
        if a1 > min(self.height, self.width):
            raise ValueError("axis_range exceeds image size")


@dataclass
class HoverOutput:
    """Dense outputs of one group model.

    ``np_prob`` is (H, W) foreground probability, ``hv`` is (H, W, 2) with the
    horizontal channel first, ``tp`` is (H, W, 1 + len(group)) with background
    in channel 0 and group members in ascending code order.
    """

    np_prob: np.ndarray
    hv: np.ndarray
    tp: np.ndarray
    group: ClassGroup = ClassGroup.EPI_LYM_CON

    def __post_init__(self):
        self.np_prob = np.asarray(self.np_prob, dtype=np.float64)
        self.hv = np.asarray(self.hv, dtype=np.float64)
        self.tp = np.asarray(self.tp, dtype=np.float64)
        H, W = self.np_prob.shape
        if self.hv.shape != (H, W, 2):
            raise ValueError(f"hv shape {self.hv.shape} does not match np {self.np_prob.shape}")
        if self.tp.shape != (H, W, 1 + len(self.group.members)):
            raise ValueError(f"tp shape {self.tp.shape} does not fit group {self.group.name}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.np_prob.shape


@dataclass
class Detection:
    box: Tuple[float, float, float, float]  # x, y, w, h; top-left origin
    class_id: int
    score: float
    mask: np.ndarray = field(default_factory=lambda: np.ones((MASK_SIZE, MASK_SIZE)))

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != (MASK_SIZE, MASK_SIZE):
            raise ValueError(f"detection mask must be {MASK_SIZE}x{MASK_SIZE}, got {self.mask.shape}")
        self.box = tuple(float(v) for v in self.box)
        self.class_id = int(self.class_id)
        self.score = float(self.score)


DetectionSet = List[Detection]


def _ellipse(shape, cy, cx, axis_a, axis_b, theta):
    H, W = shape
    r = int(np.ceil(max(axis_a, axis_b) / 2)) + 1
    y0, y1 = max(0, int(cy) - r), min(H, int(cy) + r + 2)
    x0, x1 = max(0, int(cx) - r), min(W, int(cx) + r + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    inside = (u / (axis_a / 2)) ** 2 + (v / (axis_b / 2)) ** 2 <= 1.0
    mask = np.zeros(shape, dtype=bool)
    mask[y0:y1, x0:x1] = inside
    # keep a single 4-connected piece
    lab, n = ndimage.label(mask)
    if n > 1:
        sizes = np.bincount(lab.ravel())[1:]
        mask = lab == (np.argmax(sizes) + 1)
    return mask


def gen_instance_map(spec: SynthSpec) -> InstanceMap:
    """Non-overlapping elliptical nuclei with at least ``spec.separation`` px between instances."""
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    lo, hi = spec.count_range
    n_target = int(rng.integers(lo, hi + 1))
    ids = np.zeros((H, W), dtype=np.int64)
    classes = {}
    if n_target == 0:
        return InstanceMap(ids, classes)

    dist_to_fg = np.full((H, W), np.inf)
    for k in range(1, n_target + 1):
        for _ in range(spec.max_attempts):
            a = rng.uniform(*spec.axis_range)
            b = rng.uniform(*spec.axis_range)
            theta = rng.uniform(0, np.pi)
            half = max(a, b) / 2
            cy = rng.uniform(half, H - 1 - half)
            cx = rng.uniform(half, W - 1 - half)
            blob = _ellipse((H, W), cy, cx, a, b, theta)
            if blob.sum() < 3:
                continue
            if dist_to_fg[blob].min() < spec.separation:
                continue
            ids[blob] = k
            classes[k] = int(rng.choice(CLASS_CODES, p=spec.class_mix))
            dist_to_fg = ndimage.distance_transform_edt(ids == 0)
            break
        else:
            density = (ids > 0).mean()
            raise PlacementError(
                f"placed {k - 1}/{n_target} nuclei after {spec.max_attempts} attempts "
                f"(foreground density {density:.3f})"
            )
    return InstanceMap(ids, classes)


def hv_maps(m: InstanceMap) -> np.ndarray:
    """Horizontal/vertical offset maps to each instance's centroid.

    Negative and positive offsets are scaled separately so the extreme pixels
    on either side of the centroid sit at exactly -1 and +1.
    """
    hv = np.zeros(m.shape + (2,), dtype=np.float64)
    for inst_id, sl in enumerate(ndimage.find_objects(m.ids) if m.classes else [], start=1):
        if sl is None:
            continue
        local = m.ids[sl] == inst_id
        yy, xx = np.nonzero(local)
        for ch, coords in ((0, xx.astype(float)), (1, yy.astype(float))):
            off = coords - coords.mean()
            neg, pos = off < 0, off > 0
            if neg.any():
                off[neg] /= -off[neg].min()
            if pos.any():
                off[pos] /= off[pos].max()
            plane = hv[sl + (ch,)]
            plane[yy, xx] = off
    return hv


def render_hover(
    m: InstanceMap,
    group: ClassGroup,
    noise_sigma: float = 0.0,
    seed: Optional[int] = 0,
) -> HoverOutput:
    """Ideal three-branch output of a model trained on ``group``, plus optional Gaussian noise.

    Instances of classes outside the group are rendered as background.
    """
    members = group.members
    keep = [i for i, c in m.classes.items() if c in members]
    sub = m.subset(keep)
    fg = sub.ids > 0
    np_prob = fg.astype(np.float64)
    hv = hv_maps(sub)
    tp = np.zeros(m.shape + (1 + len(members),), dtype=np.float64)
    tp[..., 0] = ~fg
    for inst_id in keep:
        tp[sub.ids == inst_id, 1 + members.index(sub.classes[inst_id])] = 1.0

    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        np_prob = np.clip(np_prob + rng.normal(0, noise_sigma, np_prob.shape), 0, 1)
        hv = np.clip(hv + rng.normal(0, noise_sigma, hv.shape), -1, 1)
        hv[~fg] = 0.0
        tp = np.clip(tp + rng.normal(0, noise_sigma, tp.shape), 1e-6, None)
        tp /= tp.sum(axis=-1, keepdims=True)
    return HoverOutput(np_prob, hv, tp, group)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the fraction of output bin i covered by each input pixel."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0, None)
    return overlap / (n_in / n_out)


def area_resample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted resampling; each output cell is the mean of the input area it covers."""
    arr = np.asarray(arr, dtype=np.float64)
    return _area_weights(arr.shape[0], out_h) @ arr @ _area_weights(arr.shape[1], out_w).T


def render_detections(
    m: InstanceMap,
    drop_rate: float = 0.0,
    jitter_px: int = 0,
    seed: Optional[int] = 0,
) -> DetectionSet:
    """Detector-style output: one box + 16x16 mask per retained instance."""
    if not 0 <= drop_rate <= 1:
        raise ValueError("drop_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    H, W = m.shape
    dets: DetectionSet = []
    for inst_id, (x0, y0, x1, y1) in sorted(instance_boxes(m).items()):
        u_drop, u_score = rng.random(2)
        jit = rng.integers(-jitter_px, jitter_px + 1, size=4) if jitter_px > 0 else np.zeros(4, int)
        if u_drop < drop_rate:
            continue
        bx0 = int(np.clip(x0 + jit[0], 0, W - 1))
        by0 = int(np.clip(y0 + jit[1], 0, H - 1))
        bx1 = int(np.clip(x1 + jit[2], bx0, W - 1))
        by1 = int(np.clip(y1 + jit[3], by0, H - 1))
        crop = (m.ids[by0 : by1 + 1, bx0 : bx1 + 1] == inst_id).astype(np.float64)
        mask = area_resample(crop, MASK_SIZE, MASK_SIZE)
        dets.append(
            Detection(
                box=(bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1),
                class_id=m.classes[inst_id],
                score=1.0 - drop_rate * u_score,
                mask=mask,
            )
        )
    return dets
