"""Semi-supervised SAR-optical template matching with FFT-NCC heatmaps."""

from .backbone import BackboneConfig, FeaturePair, ResNetFPN, build_backbone, extract, extract_pair
from .data import (AlignedPair, DatasetManifest, ImagePair, ManifestEntry, batch_iterator, crop_template,
                   load_manifest, synth_pair, write_synthetic_dataset)
from .enhance import AttentionConfig, EnhancedPair, EnhanceModule, linear_attention
from .fftncc import Heatmap, fuse_heatmaps, ncc_heatmap, ncc_heatmap_naive
from .losses import LossBundle, heatmap_ce, make_gt_heatmaps, make_pseudo_label, mutual_information, pseudo_ce
from .metrics import EvalReport, compute_metrics
from .model import Matcher, ModelConfig, build_matcher
from .train import MatchResult, TrainConfig, evaluate, fit, infer, load_matcher, save_matcher

__version__ = "0.1.0"

__all__ = [
    "AlignedPair", "AttentionConfig", "BackboneConfig", "DatasetManifest", "EnhanceModule", "EnhancedPair",
    "EvalReport", "FeaturePair", "Heatmap", "ImagePair", "LossBundle", "ManifestEntry", "MatchResult", "Matcher",
    "ModelConfig", "ResNetFPN", "TrainConfig", "batch_iterator", "build_backbone", "build_matcher",
    "compute_metrics", "crop_template", "evaluate", "extract", "extract_pair", "fit", "fuse_heatmaps",
    "heatmap_ce", "infer", "linear_attention", "load_manifest", "load_matcher", "make_gt_heatmaps",
    "make_pseudo_label", "mutual_information", "ncc_heatmap", "ncc_heatmap_naive", "pseudo_ce", "save_matcher",
    "synth_pair", "write_synthetic_dataset",
]
