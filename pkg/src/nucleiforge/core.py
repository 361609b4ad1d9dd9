"""Class taxonomy, the instance-map container and label conversions."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Mapping, Tuple

import numpy as np


class ClassId(IntEnum):
    """CoNIC class codes. 0 is background."""

    BACKGROUND = 0
    NEUTROPHIL = 1
    EPITHELIAL = 2
    LYMPHOCYTE = 3
    PLASMA = 4
    EOSINOPHIL = 5
    CONNECTIVE = 6


NUM_CLASSES = 6
CLASS_CODES: Tuple[int, ...] = tuple(range(1, NUM_CLASSES + 1))
CLASS_NAMES: Tuple[str, ...] = tuple(ClassId(c).name.lower() for c in CLASS_CODES)


class ClassGroup(Enum):
    """The two class groups each handled by its own segmentation model."""

    EPI_LYM_CON = (ClassId.EPITHELIAL, ClassId.LYMPHOCYTE, ClassId.CONNECTIVE)
    NEU_EOS_PLA = (ClassId.NEUTROPHIL, ClassId.EOSINOPHIL, ClassId.PLASMA)

    @property
    def members(self) -> Tuple[int, ...]:
        """Member class codes in ascending order (this is also the channel order)."""
        return tuple(sorted(int(c) for c in self.value))

    @classmethod
    def of(cls, class_id: int) -> "ClassGroup":
        for group in cls:
            if class_id in group.members:
                return group
        raise ValueError(f"class code {class_id} belongs to no group")


@dataclass(frozen=True)
class InstanceMap:
    """Labelled pixel grid plus the class of every instance.

    ``ids`` holds non-negative instance labels (0 is background) and
    ``classes`` maps each nonzero label to a class code in 1..6.
    """

    ids: np.ndarray
    classes: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ValueError(f"instance map must be 2-D, got shape {ids.shape}")
        if ids.size and ids.min() < 0:
            raise ValueError("instance ids must be non-negative")
        ids = ids.astype(np.int64, copy=False)
        classes = {int(k): int(v) for k, v in self.classes.items()}
        present = set(int(i) for i in np.unique(ids)) - {0}
        if present != set(classes):
            missing = sorted(present - set(classes))
            extra = sorted(set(classes) - present)
            raise ValueError(
                f"classes out of sync with ids: unlabelled ids {missing[:5]}, absent ids {extra[:5]}"
            )
        bad = [c for c in classes.values() if c not in CLASS_CODES]
        if bad:
            raise ValueError(f"class codes must lie in 1..6, got {sorted(set(bad))}")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "classes", classes)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.ids.shape

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def empty(cls, height: int, width: int) -> "InstanceMap":
        return cls(np.zeros((height, width), dtype=np.int64), {})

    def subset(self, keep) -> "InstanceMap":
        """Keep only the instance ids in ``keep``; everything else becomes background."""
        keep = sorted(int(k) for k in keep if int(k) in self.classes)
        mask = np.isin(self.ids, keep)
        return InstanceMap(np.where(mask, self.ids, 0), {k: self.classes[k] for k in keep})

    def relabel(self) -> "InstanceMap":
        return relabel_sequential(self)


def relabel_sequential(m: InstanceMap) -> InstanceMap:
    """Renumber ids contiguously from 1 in raster order of each instance's first pixel."""
    flat = m.ids.ravel()
    uniq, first = np.unique(flat, return_index=True)
    nz = uniq != 0
    uniq, first = uniq[nz], first[nz]
    order = uniq[np.argsort(first, kind="stable")]
    if len(order) == 0:
        return InstanceMap(np.zeros_like(m.ids), {})
    lut = np.zeros(int(m.ids.max()) + 1, dtype=np.int64)
    lut[order] = np.arange(1, len(order) + 1)
    classes = {int(lut[old]): m.classes[int(old)] for old in order}
    return InstanceMap(lut[m.ids], classes)


def split_groups(m: InstanceMap) -> Tuple[InstanceMap, InstanceMap]:
    """Split a six-class map into (EPI_LYM_CON, NEU_EOS_PLA) maps.

    Pixel geometry is untouched; each output is renumbered from 1.
    """
    out = []
    for group in (ClassGroup.EPI_LYM_CON, ClassGroup.NEU_EOS_PLA):
        members = group.members
        keep = [i for i, c in m.classes.items() if c in members]
        out.append(relabel_sequential(m.subset(keep)))
    return out[0], out[1]


@dataclass(frozen=True)
class YoloLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def to_line(self) -> str:
        return f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"


def instance_boxes(m: InstanceMap) -> Dict[int, Tuple[int, int, int, int]]:
    """Inclusive pixel boxes ``(xmin, ymin, xmax, ymax)`` per instance id."""
    from scipy import ndimage

    boxes = {}
    if not m.classes:
        return boxes
    slices = ndimage.find_objects(m.ids)
    for idx, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        ys, xs = sl
        boxes[idx] = (xs.start, ys.start, xs.stop - 1, ys.stop - 1)
    return boxes


def to_yolo_labels(m: InstanceMap) -> List[YoloLabel]:
    """One normalized tight box per instance, ordered by instance id."""
    labels = []
    H, W = m.shape
    for inst_id, (x0, y0, x1, y1) in sorted(instance_boxes(m).items()):
        labels.append(
            YoloLabel(
                class_id=m.classes[inst_id],
                cx=(x0 + x1 + 1) / 2 / W,
                cy=(y0 + y1 + 1) / 2 / H,
                w=(x1 - x0 + 1) / W,
                h=(y1 - y0 + 1) / H,
            )
        )
    return labels


def semantic_map(m: InstanceMap) -> np.ndarray:
    lut = np.zeros(int(m.ids.max()) + 1 if m.ids.size else 1, dtype=np.uint8)
    for inst_id, cls in m.classes.items():
        lut[inst_id] = cls
    return lut[m.ids]


def composition(m: InstanceMap) -> np.ndarray:
    """Per-class instance counts, index 0 holding class code 1."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for cls in m.classes.values():
        counts[cls - 1] += 1
    return counts


def classes_from_mapping(mapping: Mapping) -> Dict[int, int]:
    return {int(k): int(v) for k, v in mapping.items()}
