"""Nuclei instance post-processing, ensemble fusion and CoNIC-style evaluation."""

from .assemble import (
    FusionParams,
    PostprocParams,
    assemble_detections,
    fuse_fill_missing,
    fuse_superposition,
    hover_postproc,
    tta_merge,
)
from .core import ClassGroup, ClassId, InstanceMap, composition, semantic_map, split_groups, to_yolo_labels
from .estimators import DetectionAssembler, HoverPostProcessor, NucleiEnsemble, TileUpsampler
from .metrics import MetricsReport, evaluate, match_instances, mpq_plus, multi_r2
from .synth import Detection, HoverOutput, SynthSpec, gen_instance_map, render_detections, render_hover

__version__ = "0.1.0"
