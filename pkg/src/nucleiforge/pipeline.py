"""The full inference-side chain for one image."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

from .assemble import (
    FusionParams,
    PostprocParams,
    assemble_detections,
    fuse_fill_missing,
    fuse_superposition,
    hover_postproc,
)
from .core import ClassGroup, InstanceMap
from .synth import Detection, HoverOutput


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class ImageInputs:
    hover_major: HoverOutput  # EPI_LYM_CON model
    hover_rare: HoverOutput  # NEU_EOS_PLA model
    detections: Sequence[Detection] = field(default_factory=list)


def run_image(
    inputs: ImageInputs,
    postproc: PostprocParams = PostprocParams(),
    fusion: FusionParams = FusionParams(),
    use_detections: bool = True,
) -> InstanceMap:
    """Post-process both groups, superpose them, then fill in detector-only nuclei."""
    stage = "postproc"
    try:
        a = hover_postproc(inputs.hover_major, postproc, ClassGroup.EPI_LYM_CON)
        b = hover_postproc(inputs.hover_rare, postproc, ClassGroup.NEU_EOS_PLA)
        stage = "superposition"
        fused = fuse_superposition(a, b)
        if not use_detections:
            return fused
        stage = "assemble"
        yolo = assemble_detections(inputs.detections, fused.shape, fusion)
        stage = "fill_missing"
        return fuse_fill_missing(fused, yolo, fusion)
    except Exception as exc:
        raise StageError(stage, exc) from exc
