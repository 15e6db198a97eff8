"""Regional competency estimation for image classifiers.

A perception model's competency on an image is the product of a calibrated
class probability and an in-distribution probability. Five methods turn that
score into per-pixel maps of which regions make the model incompetent:
cropping, masking, perturbation, input gradients and feature-space
reconstruction.
"""
from .competency import (CompetencyConfig, CompetencyEstimator, competency_gradient, competency_parts,
                         competency_score, fit_class_gaussians, fit_competency, fit_logistic,
                         mahalanobis_distances)
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import SyntheticSpec, generate_synthetic, load_dataset, write_dataset
from .evaluation import (MetricsRow, PixelConfusion, aggregate, binarize_map, confusion, evaluate_maps,
                         format_table, select_threshold)
from .inpainter import InpainterConfig, InpainterDecoder, reconstruct, train_inpainter
from .perception import LabeledDataset, PerceptionModel, TrainConfig, predict, train_classifier
from .pipeline import StageError, run_pipeline
from .regional import (DependencyMap, FillStrategy, combine_maps, cropping_map, gradient_map, masking_map,
                       normalize, perturbation_map, reconstruction_map)
from .render import render_heatmap
from .segmentation import FelzParams, SegmentMap, felzenszwalb_segment, segment_mask

__version__ = "0.1.0"
