"""scikit-learn compatible wrappers.

The functional API does the work; these classes make it usable inside
sklearn tooling (``clone``, ``get_params``/``set_params``, pipelines and
parameter searches).  ``X`` is always a list of per-image inputs.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_hover_output, check_instance_map
from .assemble import FusionParams, PostprocParams, assemble_detections, hover_postproc
from .core import ClassGroup, InstanceMap, composition
from .metrics import mpq_plus
from .pipeline import ImageInputs, run_image
from .sample import DatasetStats, replicated_frequencies, upsample_plan


class HoverPostProcessor(TransformerMixin, BaseEstimator):
    """HoverOutput list -> InstanceMap list via marker-controlled watershed.

    Stateless; ``fit`` only validates the parameters.
    """

    def __init__(self, t_np=0.5, t_mk=0.4, min_size=10):
        self.t_np = t_np
        self.t_mk = t_mk
        self.min_size = min_size

    def fit(self, X=None, y=None):
        self.params_ = PostprocParams(self.t_np, self.t_mk, self.min_size)
        return self

    def transform(self, X) -> List[InstanceMap]:
        check_is_fitted(self, "params_")
        outs = [check_hover_output(x) for x in X]
        return [hover_postproc(o, self.params_) for o in outs]


class DetectionAssembler(TransformerMixin, BaseEstimator):
    """``(detections, (H, W))`` pairs -> InstanceMap list."""

    def __init__(self, mask_threshold=0.5, score_floor=0.05):
        self.mask_threshold = mask_threshold
        self.score_floor = score_floor

    def fit(self, X=None, y=None):
        self.params_ = FusionParams(mask_threshold=self.mask_threshold, score_floor=self.score_floor)
        return self

    def transform(self, X) -> List[InstanceMap]:
        check_is_fitted(self, "params_")
        return [assemble_detections(dets, tuple(shape), self.params_) for dets, shape in X]


class NucleiEnsemble(BaseEstimator):
    """Two group models plus detector, fused into one instance map per image.

    ``predict`` takes a list of :class:`~nucleiforge.pipeline.ImageInputs`;
    ``score`` returns mPQ+ against ground-truth maps.
    """

    def __init__(
        self,
        t_np=0.5,
        t_mk=0.4,
        min_size=10,
        f_miss=0.5,
        mask_threshold=0.5,
        score_floor=0.05,
        use_detections=True,
    ):
        self.t_np = t_np
        self.t_mk = t_mk
        self.min_size = min_size
        self.f_miss = f_miss
        self.mask_threshold = mask_threshold
        self.score_floor = score_floor
        self.use_detections = use_detections

    def fit(self, X=None, y=None):
        self.postproc_ = PostprocParams(self.t_np, self.t_mk, self.min_size)
        self.fusion_ = FusionParams(self.f_miss, self.mask_threshold, self.score_floor)
        return self

    def predict(self, X: Sequence[ImageInputs]) -> List[InstanceMap]:
        check_is_fitted(self, ["postproc_", "fusion_"])
        preds = []
        for item in X:
            if not isinstance(item, ImageInputs):
                item = ImageInputs(*item)
            check_hover_output(item.hover_major, ClassGroup.EPI_LYM_CON)
            check_hover_output(item.hover_rare, ClassGroup.NEU_EOS_PLA)
            preds.append(run_image(item, self.postproc_, self.fusion_, self.use_detections))
        return preds

    def score(self, X, y) -> float:
        report = mpq_plus(self.predict(X), [check_instance_map(m) for m in y])
        return report.mpq_plus if report.mpq_plus is not None else 0.0

    def count(self, X) -> np.ndarray:
        """Per-image class counts, shape (n_images, 6)."""
        return np.array([composition(m) for m in self.predict(X)]).reshape(-1, 6)


class TileUpsampler(BaseEstimator):
    """Learns integer replication factors that balance class frequencies.

    ``fit`` accepts a list of tile InstanceMaps or a DatasetStats;
    ``transform`` replicates a list of tiles by the fitted factors.
    """

    def __init__(self, target=None, tolerance=0.05):
        self.target = target
        self.tolerance = tolerance

    def fit(self, X, y=None):
        stats = X if isinstance(X, DatasetStats) else DatasetStats.from_maps(list(X))
        target = self.target
        if target is None:
            target = (stats.class_counts > 0).astype(float)
        self.factors_ = upsample_plan(stats, target, self.tolerance)
        self.frequencies_ = replicated_frequencies(stats, self.factors_, target)
        self.n_tiles_ = stats.n_tiles
        return self

    def transform(self, X) -> list:
        check_is_fitted(self, "factors_")
        X = list(X)
        if len(X) != self.n_tiles_:
            raise ValueError(f"fitted on {self.n_tiles_} tiles, got {len(X)}")
        return [tile for tile, f in zip(X, self.factors_) for _ in range(int(f))]

    def fit_transform(self, X, y=None):
        X = list(X)
        return self.fit(X).transform(X)
