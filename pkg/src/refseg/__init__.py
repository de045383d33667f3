"""Zero-shot referring image segmentation by fusing visual-text matching scores.

A referring expression is expanded by a multimodal LLM into an attribute
description and a surrounding description; instance proposals are rendered two
ways, encoded, and ranked by a weighted sum of three cosine-similarity scores.
"""

from .masks import BinaryMask, RenderConfig, RleCounts, iou, rle_decode, rle_encode
from .pipeline import Pipeline, PipelineConfig, run_sample, run_split
from .scoring import FusionWeights, ScoreBreakdown, select_mask

__all__ = [
    "BinaryMask",
    "FusionWeights",
    "Pipeline",
    "PipelineConfig",
    "RenderConfig",
    "RleCounts",
    "ScoreBreakdown",
    "iou",
    "rle_decode",
    "rle_encode",
    "run_sample",
    "run_split",
    "select_mask",
]

__version__ = "0.1.0"
