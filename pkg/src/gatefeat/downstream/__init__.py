"""Task heads and metrics consuming amalgamated features."""

from .correspondence import (
    ConvCorrespondenceHead,
    CorrespondencePair,
    KeypointSet,
    correspond_nn,
    keypoint_contrastive_loss,
    pck,
    pck_named,
    train_correspondence,
)
from .datasets import (
    DDPMSegLayout,
    KeypointPair,
    KeypointPairsFile,
    SegmentationFolder,
    SPairPairs,
    open_pairs,
    open_segmentation,
)
from .metrics import IGNORE_INDEX, SegmentationScores, confusion_matrix, miou
from .segmentation import (
    AblationRow,
    PixelClassifier,
    SegmenterConfig,
    TrainedSegmenter,
    predict_segmentation,
    run_ablation,
    train_segmenter,
)

__all__ = [
    "IGNORE_INDEX",
    "AblationRow",
    "ConvCorrespondenceHead",
    "CorrespondencePair",
    "DDPMSegLayout",
    "KeypointPair",
    "KeypointPairsFile",
    "KeypointSet",
    "PixelClassifier",
    "SPairPairs",
    "SegmentationFolder",
    "SegmentationScores",
    "SegmenterConfig",
    "TrainedSegmenter",
    "confusion_matrix",
    "correspond_nn",
    "keypoint_contrastive_loss",
    "miou",
    "open_pairs",
    "open_segmentation",
    "pck",
    "pck_named",
    "predict_segmentation",
    "run_ablation",
    "train_correspondence",
    "train_segmenter",
]
