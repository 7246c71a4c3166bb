"""Voxel-wise myocardium segmentation and its evaluation metrics."""
from .architecture import build_segmentation_spec, stream_ladder
from .dense import DenseVoxelClassifier
from .metrics import dice, mad, surface_voxels
from .model import MultiscaleSegmenter
from .patches import PatchExtractor, TriplanarPatchSet, extract_triplanar_patches, normalize_intensity
from .procedure import (
    ProbabilityGrid,
    SegmentationResult,
    classify_sparse_grid,
    refine_surface,
    rough_segmentation,
    segment_volume,
)
from .sampling import VoxelSampler, sample_training_batch

__all__ = [
    "DenseVoxelClassifier",
    "MultiscaleSegmenter",
    "PatchExtractor",
    "ProbabilityGrid",
    "SegmentationResult",
    "TriplanarPatchSet",
    "VoxelSampler",
    "build_segmentation_spec",
    "classify_sparse_grid",
    "dice",
    "extract_triplanar_patches",
    "mad",
    "normalize_intensity",
    "refine_surface",
    "rough_segmentation",
    "sample_training_batch",
    "segment_volume",
    "stream_ladder",
    "surface_voxels",
]
