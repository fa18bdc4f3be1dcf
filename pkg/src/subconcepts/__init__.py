"""Sub-concept discovery by prototype clustering over 3D feature fields."""
from .estimator import SubconceptSegmenter
from .eval import (MetricReport, SegmentationResult, classify_points, evaluate,
                   export_confidence, match_clip, match_hungarian, panoptic_quality,
                   segmentation_metrics)
from .exceptions import (FormatError, NumericalError, StructuralError, SubconceptError,
                         UsageError, ValidationError)
from .fieldset import ClassCatalog, FieldSet, Ray, compute_density_weights
from .guidance import LossWeights, Query, QuerySet, total_loss
from .io import load_fieldset, save_fieldset
from .projector import ProjectorParams, project
from .prototypes import PrototypeBank, assign, ema_update
from .synthetic import GeneratorSpec, generate_synthetic_scene
from .trainer import RunConfig, RunResult, load_checkpoint, run, save_checkpoint

__version__ = "0.1.0"
