"""multiseg3d: one trainable model for six 3D point-cloud segmentation tasks
(panoptic, semantic, instance, interactive, referring, open-vocabulary) on
synthetic scenes, with a minimal tape-based autodiff engine underneath."""

from .config import TrainConfig, load_config, save_config
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (AmbiguityError, ContractError, MultisegError, NumericError,
                     PlacementError, SceneFormatError, ShapeError,
                     UnsupportedVersionError)
from .estimator import SceneSegmenter
from .harness import (ablate_prompts, evaluate_checkpoint, evaluate_model,
                      finetune_trick, selftest, train)
from .metrics import MetricsReport
from .model import Model, forward_scene, init_model
from .scene import PromptSet, PseudoMaskSet, Scene, VocabularySplit, load_scene, save_scene
from .scenegen import (SceneRecipe, compute_superpoints, generate_pseudo_masks,
                       generate_scene, make_text_expression, resolve_expression,
                       sample_vision_prompt)
from .tasks import TaskOutputs

__version__ = "0.1.0"

__all__ = [
    "AmbiguityError", "Checkpoint", "ContractError", "MetricsReport", "Model",
    "MultisegError", "NumericError", "PlacementError", "PromptSet", "PseudoMaskSet",
    "Scene", "SceneFormatError", "SceneRecipe", "SceneSegmenter", "ShapeError",
    "TaskOutputs", "TrainConfig", "UnsupportedVersionError", "VocabularySplit",
    "ablate_prompts", "compute_superpoints", "evaluate_checkpoint", "evaluate_model",
    "finetune_trick", "forward_scene", "generate_pseudo_masks", "generate_scene",
    "init_model", "load_checkpoint", "load_config", "load_scene",
    "make_text_expression", "resolve_expression", "sample_vision_prompt",
    "save_checkpoint", "save_config", "save_scene", "selftest", "train",
]
