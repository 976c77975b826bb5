"""Few-shot point cloud semantic segmentation at desk scale.

Synthetic scenes, contrastive self-supervised pretraining with a learnable
augmentor, a multi-resolution attention feature block, center-regularized
multi-prototypes and transductive graph label propagation, wrapped in
scikit-learn style estimators and a reproducible CLI.
"""

from .data import (
    ClassSplit,
    Episode,
    LabeledCloud,
    PointCloud,
    DEFAULT_SPLIT,
    PRIMITIVES,
    generate_dataset,
    generate_scene,
    normalize_cloud,
    sample_episode,
)
from .estimators import ContrastivePretrainer, FewShotSegmenter
from .pipeline import EvalReport, RunConfig, evaluate, run_fewshot_train, run_pretrain

__version__ = "0.1.0"

__all__ = [
    "ClassSplit",
    "ContrastivePretrainer",
    "DEFAULT_SPLIT",
    "Episode",
    "EvalReport",
    "FewShotSegmenter",
    "LabeledCloud",
    "PRIMITIVES",
    "PointCloud",
    "RunConfig",
    "evaluate",
    "generate_dataset",
    "generate_scene",
    "normalize_cloud",
    "run_fewshot_train",
    "run_pretrain",
    "sample_episode",
    "__version__",
]
