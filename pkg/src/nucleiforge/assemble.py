"""From dense model outputs and detections to fused instance maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.segmentation import watershed

from .core import ClassGroup, InstanceMap, relabel_sequential
from .synth import HoverOutput, Detection

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class PostprocParams:
    t_np: float = 0.5
    t_mk: float = 0.4
    min_size: int = 10

    def __post_init__(self):
        if not (0 < self.t_np < 1 and 0 < self.t_mk < 1):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.min_size < 1:
            raise ValueError("min_size must be >= 1")


@dataclass(frozen=True)
class FusionParams:
    f_miss: float = 0.5
    mask_threshold: float = 0.5
    score_floor: float = 0.05

    def __post_init__(self):
        for name in ("f_miss", "mask_threshold", "score_floor"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


def _minmax(values: np.ndarray, where: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    if not where.any():
        return out
    lo, hi = values[where].min(), values[where].max()
    if hi > lo:
        out[where] = (values[where] - lo) / (hi - lo)
    return out


def boundary_energy(hv: np.ndarray, fg: np.ndarray) -> np.ndarray:
    """Per-pixel boundary likelihood from the HV maps, in [0, 1] over ``fg``.

    Within a nucleus the horizontal map increases left to right, so its
    x-derivative is positive; at a boundary between two nuclei (or with
    the background) it drops.  Inverting the min-max normalised derivative
    turns those drops into ridges.  Same for the vertical map along y.
    """
    h = np.where(fg, hv[..., 0], 0.0)
    v = np.where(fg, hv[..., 1], 0.0)
    dh = ndimage.sobel(h, axis=1, mode="constant")
    dv = ndimage.sobel(v, axis=0, mode="constant")
    eh = np.where(fg, 1.0 - _minmax(dh, fg), 0.0)
    ev = np.where(fg, 1.0 - _minmax(dv, fg), 0.0)
    return np.maximum(eh, ev)


def _vote_classes(labels: np.ndarray, tp: np.ndarray, members: Sequence[int]) -> dict:
    """Majority class per label from the tp argmax over member channels; ties go to the lowest code."""
    cls_idx = np.argmax(tp[..., 1:], axis=-1)
    n = int(labels.max())
    votes = np.zeros((n + 1, len(members)), dtype=np.int64)
    np.add.at(votes, (labels.ravel(), cls_idx.ravel()), 1)
    # np.argmax returns the first maximum and channels are in ascending code order
    return {i: members[int(np.argmax(votes[i]))] for i in range(1, n + 1) if votes[i].sum()}


def hover_postproc(
    out: HoverOutput,
    params: PostprocParams = PostprocParams(),
    group: ClassGroup = None,
) -> InstanceMap:
    """Marker-controlled watershed over the HV boundary energy.

    Returned instances are 4-connected, at least ``params.min_size`` pixels,
    and numbered from 1 in raster order.
    """
    group = group or out.group
    if group is not out.group:
        raise ValueError(f"output was rendered for {out.group.name}, not {group.name}")
    fg = out.np_prob >= params.t_np
    if not fg.any():
        return InstanceMap.empty(*out.shape)
    energy = boundary_energy(out.hv, fg)
    markers, _ = ndimage.label(fg & (energy < params.t_mk), structure=_FOUR)
    labels = watershed(energy, markers=markers, mask=fg, connectivity=1)

    sizes = np.bincount(labels.ravel())
    small = np.nonzero(sizes < params.min_size)[0]
    small = small[small > 0]
    if small.size:
        labels[np.isin(labels, small)] = 0
    if not labels.any():
        return InstanceMap.empty(*out.shape)

    classes = _vote_classes(labels, out.tp, group.members)
    return relabel_sequential(InstanceMap(labels, classes))


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment (edge values replicated)."""
    in_h, in_w = arr.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(np.asarray(arr, dtype=np.float64), [yy, xx], order=1, mode="nearest")


def _box_pixels(box, shape) -> Tuple[int, int, int, int]:
    H, W = shape
    x, y, w, h = box
    x0 = int(np.clip(np.floor(x + 0.5), 0, W))
    y0 = int(np.clip(np.floor(y + 0.5), 0, H))
    x1 = int(np.clip(np.floor(x + w + 0.5), 0, W))
    y1 = int(np.clip(np.floor(y + h + 0.5), 0, H))
    return x0, y0, x1, y1


def assemble_detections(
    dets: Sequence[Detection],
    shape: Tuple[int, int],
    params: FusionParams = FusionParams(),
) -> InstanceMap:
    """Paint detection masks into a canvas, highest score first, each pixel claimed once."""
    canvas = np.zeros(shape, dtype=np.int64)
    classes = {}
    kept = [d for d in dets if d.score >= params.score_floor]
    # stable sort: equal scores keep input order
    kept.sort(key=lambda d: -d.score)
    next_id = 1
    for det in kept:
        x0, y0, x1, y1 = _box_pixels(det.box, shape)
        if x1 <= x0 or y1 <= y0:
            continue
        mask = bilinear_resize(det.mask, y1 - y0, x1 - x0) >= params.mask_threshold
        region = canvas[y0:y1, x0:x1]
        paint = mask & (region == 0)
        if not paint.any():
            continue
        region[paint] = next_id
        classes[next_id] = det.class_id
        next_id += 1
    return relabel_sequential(InstanceMap(canvas, classes))


def _check_same_shape(a: InstanceMap, b: InstanceMap):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def fuse_superposition(a: InstanceMap, b: InstanceMap) -> InstanceMap:
    """Overlay ``b`` on ``a``; wherever ``b`` is nonzero it owns the pixel.

    By convention ``a`` is the EPI_LYM_CON map and ``b`` the NEU_EOS_PLA map,
    so rare classes win conflicts.  Swap the arguments to invert the priority.
    """
    _check_same_shape(a, b)
    offset = int(a.ids.max()) if a.ids.size else 0
    b_shift = np.where(b.ids > 0, b.ids + offset, 0)
    ids = np.where(b.ids > 0, b_shift, a.ids)
    classes = dict(a.classes)
    classes.update({k + offset: v for k, v in b.classes.items()})
    present = set(np.unique(ids).tolist()) - {0}
    classes = {k: v for k, v in classes.items() if k in present}
    return relabel_sequential(InstanceMap(ids, classes))


def fuse_fill_missing(
    hover: InstanceMap,
    yolo: InstanceMap,
    params: FusionParams = FusionParams(),
) -> InstanceMap:
    """Add detector instances that the segmenter missed.

    ``hover`` is copied unchanged, ids included.  A ``yolo`` instance is
    added when less than ``params.f_miss`` of its pixels fall on hover
    foreground, and only its background pixels are painted.
    """
    _check_same_shape(hover, yolo)
    ids = hover.ids.copy()
    classes = dict(hover.classes)
    hover_fg = hover.ids > 0
    next_id = (int(hover.ids.max()) if hover.ids.size else 0) + 1
    if not yolo.classes:
        return InstanceMap(ids, classes)
    areas = np.bincount(yolo.ids.ravel())
    on_fg = np.bincount(yolo.ids[hover_fg].ravel(), minlength=areas.size)
    for yid in sorted(yolo.classes):
        if on_fg[yid] / areas[yid] >= params.f_miss:
            continue
        paint = (yolo.ids == yid) & ~hover_fg
        ids[paint] = next_id
        classes[next_id] = yolo.classes[yid]
        next_id += 1
    return InstanceMap(ids, classes)


# --- test-time augmentation -------------------------------------------------

Transform = Union[str, Tuple[str, int]]


def _parse_transform(t: Transform) -> Tuple[str, int]:
    if isinstance(t, tuple):
        name, k = t
        if name != "rot90":
            raise ValueError(f"unknown transform {t!r}")
        return "rot90", int(k) % 4
    if t == "identity":
        return "rot90", 0
    if t in ("hflip", "vflip"):
        return t, 0
    if t.startswith("rot"):
        deg = int(t[3:])
        if deg % 90:
            raise ValueError(f"unknown transform {t!r}")
        return "rot90", (deg // 90) % 4
    raise ValueError(f"unknown transform {t!r}")


def _rot_hv_once(hv: np.ndarray) -> np.ndarray:
    """HV maps of an image rotated by ``np.rot90`` once (counter-clockwise)."""
    # an offset (dy, dx) becomes (-dx, dy): new h = old v, new v = -old h
    rot = np.rot90(hv, 1, axes=(0, 1))
    return np.stack([rot[..., 1], -rot[..., 0]], axis=-1)


def apply_transform(out: HoverOutput, t: Transform) -> HoverOutput:
    """Output of the same model seen on a transformed image (the forward direction)."""
    name, k = _parse_transform(t)
    npm, hv, tp = out.np_prob, out.hv, out.tp
    if name == "hflip":
        npm, tp = npm[:, ::-1], tp[:, ::-1]
        hv = hv[:, ::-1] * np.array([-1.0, 1.0])
    elif name == "vflip":
        npm, tp = npm[::-1], tp[::-1]
        hv = hv[::-1] * np.array([1.0, -1.0])
    else:
        npm, tp = np.rot90(npm, k), np.rot90(tp, k, axes=(0, 1))
        for _ in range(k):
            hv = _rot_hv_once(hv)
    return HoverOutput(npm.copy(), np.ascontiguousarray(hv), tp.copy(), out.group)


def invert_transform(out: HoverOutput, t: Transform) -> HoverOutput:
    name, k = _parse_transform(t)
    if name in ("hflip", "vflip"):
        return apply_transform(out, name)
    return apply_transform(out, ("rot90", (4 - k) % 4))


def tta_merge(outs: Sequence[Tuple[HoverOutput, Transform]]) -> HoverOutput:
    """Undo each augmentation and average the outputs pixelwise."""
    if not outs:
        raise ValueError("tta_merge needs at least one output")
    back = [invert_transform(o, t) for o, t in outs]
    group = back[0].group
    shape = back[0].shape
    for b in back[1:]:
        if b.shape != shape or b.group is not group:
            raise ValueError("TTA outputs disagree in shape or group after inversion")
    n = len(back)
    npm = sum(b.np_prob for b in back) / n
    hv = sum(b.hv for b in back) / n
    tp = sum(b.tp for b in back) / n
    tp = tp / tp.sum(axis=-1, keepdims=True)
    return HoverOutput(npm, hv, tp, group)
