"""Input validation helpers shared by the estimator wrappers and the CLI."""

from __future__ import annotations

from typing import Mapping, Optional, Tuple

import numpy as np

from .core import ClassGroup, InstanceMap
from .synth import HoverOutput


def check_instance_map(X, classes: Optional[Mapping] = None) -> InstanceMap:
    """Accept an InstanceMap, or an id array plus its class mapping."""
    if isinstance(X, InstanceMap):
        return X
    ids = np.asarray(X)
    if not np.issubdtype(ids.dtype, np.integer):
        if ids.size and not np.all(np.equal(np.mod(ids, 1), 0)):
            raise ValueError("instance ids must be integers")
        ids = ids.astype(np.int64)
    if classes is None:
        raise ValueError("a class mapping is required when passing a bare id array")
    return InstanceMap(ids, dict(classes))


def check_hover_output(X, group: Optional[ClassGroup] = None) -> HoverOutput:
    if isinstance(X, HoverOutput):
        out = X
    elif isinstance(X, Mapping):
        out = HoverOutput(X["np"], X["hv"], X["tp"], group or X.get("group", ClassGroup.EPI_LYM_CON))
    else:
        raise TypeError(f"expected HoverOutput or mapping with np/hv/tp, got {type(X).__name__}")
    if not np.isfinite(out.np_prob).all() or not np.isfinite(out.hv).all() or not np.isfinite(out.tp).all():
        raise ValueError("hover output contains non-finite values")
    if group is not None and out.group is not group:
        raise ValueError(f"hover output is for {out.group.name}, expected {group.name}")
    return out


def check_same_shape(*shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    first = tuple(shapes[0])
    for s in shapes[1:]:
        if tuple(s) != first:
            raise ValueError(f"dimension mismatch: {first} vs {tuple(s)}")
    return first
