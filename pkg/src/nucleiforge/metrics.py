"""CoNIC evaluation: dataset-level PQ+ per class, mPQ+ and multi-class r2."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import CLASS_CODES, CLASS_NAMES, NUM_CLASSES, InstanceMap, composition

IOU_THRESHOLD = 0.5


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]]  # (pred id, gt id, iou)
    unmatched_pred: List[int]
    unmatched_gt: List[int]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)

    @property
    def iou_sum(self) -> float:
        return float(sum(p[2] for p in self.pairs))


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def denominator(self) -> float:
        return self.tp + 0.5 * self.fp + 0.5 * self.fn

    @property
    def pq(self) -> Optional[float]:
        d = self.denominator
        return self.iou_sum / d if d > 0 else None


@dataclass
class MetricsReport:
    per_class: Dict[str, ClassStats] = field(default_factory=dict)
    mpq_plus: Optional[float] = None
    pq_excluded: List[str] = field(default_factory=list)
    r2_per_class: Dict[str, Optional[float]] = field(default_factory=dict)
    multi_r2: Optional[float] = None
    r2_excluded: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "per_class": {
                name: {**asdict(s), "pq_plus": s.pq} for name, s in self.per_class.items()
            },
            "mpq_plus": self.mpq_plus,
            "pq_excluded": list(self.pq_excluded),
            "r2_per_class": dict(self.r2_per_class),
            "multi_r2": self.multi_r2,
            "r2_excluded": list(self.r2_excluded),
        }
        return out

    def csv_header(self) -> List[str]:
        cols = ["mpq_plus", "multi_r2"]
        cols += [f"pq_{n}" for n in CLASS_NAMES]
        cols += [f"r2_{n}" for n in CLASS_NAMES]
        return cols

    def csv_row(self) -> List[Optional[float]]:
        row = [self.mpq_plus, self.multi_r2]
        row += [self.per_class[n].pq if n in self.per_class else None for n in CLASS_NAMES]
        row += [self.r2_per_class.get(n) for n in CLASS_NAMES]
        return row


def _class_ids(m: InstanceMap, c: int) -> List[int]:
    return sorted(i for i, k in m.classes.items() if k == c)


def match_instances(pred: InstanceMap, gt: InstanceMap, class_id: int) -> MatchResult:
    """Pair class-``class_id`` instances whose IoU exceeds 0.5.

    Since IoU > 0.5 can hold for at most one partner per instance, no
    assignment step is needed.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    p_ids = _class_ids(pred, class_id)
    g_ids = _class_ids(gt, class_id)
    if not p_ids or not g_ids:
        return MatchResult([], p_ids, g_ids)

    p_area = np.bincount(pred.ids.ravel(), minlength=max(p_ids) + 1)
    g_area = np.bincount(gt.ids.ravel(), minlength=max(g_ids) + 1)
    p_in = np.isin(pred.ids, p_ids)
    g_in = np.isin(gt.ids, g_ids)
    both = p_in & g_in
    pairs_px = np.stack([pred.ids[both], gt.ids[both]], axis=1)
    uniq, inter = np.unique(pairs_px, axis=0, return_counts=True) if len(pairs_px) else (np.empty((0, 2), int), [])

    pairs = []
    for (pid, gid), n in zip(uniq.tolist(), np.asarray(inter).tolist()):
        union = p_area[pid] + g_area[gid] - n
        iou = n / union
        if iou > IOU_THRESHOLD:
            pairs.append((int(pid), int(gid), float(iou)))
    matched_p = {p for p, _, _ in pairs}
    matched_g = {g for _, g, _ in pairs}
    assert len(matched_p) == len(pairs) and len(matched_g) == len(pairs), "IoU > 0.5 match not unique"
    pairs.sort()
    return MatchResult(
        pairs,
        [i for i in p_ids if i not in matched_p],
        [i for i in g_ids if i not in matched_g],
    )


def pq_stats(preds: Sequence[InstanceMap], gts: Sequence[InstanceMap]) -> Dict[int, ClassStats]:
    """Per-class TP/FP/FN/IoU-sum accumulated over the whole corpus."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    stats = {c: ClassStats() for c in CLASS_CODES}
    for pred, gt in zip(preds, gts):
        for c in CLASS_CODES:
            r = match_instances(pred, gt, c)
            s = stats[c]
            s.tp += r.tp
            s.fp += r.fp
            s.fn += r.fn
            s.iou_sum += r.iou_sum
    return stats


def mpq_plus(preds: Sequence[InstanceMap], gts: Sequence[InstanceMap]) -> MetricsReport:
    stats = pq_stats(preds, gts)
    report = MetricsReport()
    included = []
    for c, name in zip(CLASS_CODES, CLASS_NAMES):
        s = stats[c]
        report.per_class[name] = s
        if s.tp + s.fp + s.fn == 0:
            report.pq_excluded.append(name)
        else:
            included.append(s.pq)
    report.mpq_plus = float(np.mean(included)) if included else None
    return report


def multi_r2(
    pred_counts: Sequence[Sequence[int]],
    gt_counts: Sequence[Sequence[int]],
    report: Optional[MetricsReport] = None,
) -> MetricsReport:
    """Per-class coefficient of determination between count vectors, unclamped.

    A class whose ground-truth counts never vary has no defined R2: it scores
    1 when predicted perfectly, otherwise it is left out of the mean (value
    ``None``) with a warning.
    """
    p = np.asarray(pred_counts, dtype=np.float64)
    g = np.asarray(gt_counts, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"count arrays differ in shape: {p.shape} vs {g.shape}")
    if g.ndim != 2 or g.shape[1] != NUM_CLASSES:
        raise ValueError("counts must have shape (n_images, 6)")
    if g.shape[0] < 2:
        raise ValueError("r2 needs at least two images")
    report = report or MetricsReport()
    values = []
    for j, name in enumerate(CLASS_NAMES):
        ss_res = float(np.sum((p[:, j] - g[:, j]) ** 2))
        ss_tot = float(np.sum((g[:, j] - g[:, j].mean()) ** 2))
        if ss_tot > 0:
            r2 = 1.0 - ss_res / ss_tot
        elif ss_res == 0:
            r2 = 1.0
        else:
            warnings.warn(f"r2 undefined for {name}: constant ground-truth counts; excluded")
            report.r2_per_class[name] = None
            report.r2_excluded.append(name)
            continue
        report.r2_per_class[name] = r2
        values.append(r2)
    report.multi_r2 = float(np.mean(values)) if values else None
    return report


def evaluate(preds: Sequence[InstanceMap], gts: Sequence[InstanceMap]) -> MetricsReport:
    """mPQ+ on the maps and multi-class r2 on their compositions."""
    report = mpq_plus(preds, gts)
    if len(gts) >= 2:
        multi_r2([composition(m) for m in preds], [composition(m) for m in gts], report)
    return report
