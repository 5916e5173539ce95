"""sklearn-style estimator facade over the training harness.

SceneSegmenter exposes fit/predict/score with get_params/set_params, so the
model composes with sklearn tooling (clone, grid search) while the heavy
lifting stays in the harness module.
"""

from __future__ import annotations

from dataclasses import fields

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import Checkpoint, model_from_checkpoint
from .config import TrainConfig
from .harness import ablate_prompts, evaluate_model, finetune_trick, train
from .model import forward_scene
from .scene import Scene
from .tasks import run_all_tasks
from .validation import check_scenes

_CONFIG_FIELDS = tuple(f.name for f in fields(TrainConfig))


class SceneSegmenter(BaseEstimator):
    """One trainable model serving six point-cloud segmentation tasks.

    Parameters mirror TrainConfig; fit() trains on labelled scenes,
    predict() runs the task pipelines, score() returns the Overall metric.
    """

    def __init__(self, lr0=1e-4, weight_decay=0.05, epochs=128, batch_size=2,
                 eval_period=16, seed=0, d_in=32, d_out=256, decoder_layers=6,
                 n_heads=4, inter_weight=0.1, top_k_percent=10.0,
                 m_low_fraction=0.5, query_cap=3500, prompts_per_scene=4,
                 pair_cap=8, n_train_scenes=32, n_val_scenes=8,
                 points_per_scene=2048, superpoint_target=96,
                 binarize_threshold=0.5, score_floor=0.1, min_segment_points=25,
                 use_distill=True, use_contrastive=True, use_rank=True,
                 use_finetune_trick=False, finetune_epochs=40, finetune_scale=1e-3):
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.eval_period = eval_period
        self.seed = seed
        self.d_in = d_in
        self.d_out = d_out
        self.decoder_layers = decoder_layers
        self.n_heads = n_heads
        self.inter_weight = inter_weight
        self.top_k_percent = top_k_percent
        self.m_low_fraction = m_low_fraction
        self.query_cap = query_cap
        self.prompts_per_scene = prompts_per_scene
        self.pair_cap = pair_cap
        self.n_train_scenes = n_train_scenes
        self.n_val_scenes = n_val_scenes
        self.points_per_scene = points_per_scene
        self.superpoint_target = superpoint_target
        self.binarize_threshold = binarize_threshold
        self.score_floor = score_floor
        self.min_segment_points = min_segment_points
        self.use_distill = use_distill
        self.use_contrastive = use_contrastive
        self.use_rank = use_rank
        self.use_finetune_trick = use_finetune_trick
        self.finetune_epochs = finetune_epochs
        self.finetune_scale = finetune_scale

    # -- config plumbing ----------------------------------------------------

    def to_config(self) -> TrainConfig:
        return TrainConfig(**{name: getattr(self, name) for name in _CONFIG_FIELDS})

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("SceneSegmenter: call fit() first")

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y=None, val_scenes=None, base_class_ids=None):
        """Train on a list of Scenes (y is ignored; labels live in the scenes)."""
        scenes = check_scenes(X)
        val = check_scenes(val_scenes) if val_scenes is not None else scenes
        result = train(self.to_config(), scenes, val, base_class_ids=base_class_ids)
        self.checkpoint_ = result.checkpoint
        self.model_ = model_from_checkpoint(result.checkpoint)
        self.loss_history_ = result.loss_history
        return self

    def load(self, checkpoint: Checkpoint):
        """Adopt a trained checkpoint without fitting."""
        self.checkpoint_ = checkpoint
        self.model_ = model_from_checkpoint(checkpoint)
        self.loss_history_ = []
        return self

    def predict(self, X, clicks=None, expressions=None):
        """Task outputs per scene; clicks/expressions are per-scene lists."""
        self._check_fitted()
        single = isinstance(X, Scene)
        scenes = [X] if single else list(X)
        outputs = []
        for i, scene in enumerate(scenes):
            scene_clicks = clicks[i] if clicks else []
            scene_exprs = expressions[i] if expressions else []
            fr = forward_scene(self.model_, scene, training=False, seed=0,
                               clicks=scene_clicks, expressions=scene_exprs)
            outputs.append(run_all_tasks(fr.preds, scene, self.model_.no_object_index))
        return outputs[0] if single else outputs

    def evaluate(self, X, protocol="center", r_d=None, ov_scenes=None):
        self._check_fitted()
        return evaluate_model(self.model_, check_scenes(X), protocol=protocol,
                              r_d=r_d, ov_scenes=ov_scenes)

    def score(self, X, y=None):
        """Overall metric (mean of the six task headliners) on scenes X."""
        return float(self.evaluate(X).overall)

    def finetune(self, X, val_scenes=None, epochs=None):
        self._check_fitted()
        scenes = check_scenes(X)
        val = check_scenes(val_scenes) if val_scenes is not None else scenes
        result = finetune_trick(self.checkpoint_, scenes, val, epochs=epochs)
        self.checkpoint_ = result.checkpoint
        self.model_ = model_from_checkpoint(result.checkpoint)
        return self

    def ablate_prompts(self, X, r_d_values=()):
        self._check_fitted()
        return ablate_prompts(self.model_, check_scenes(X), list(r_d_values))
