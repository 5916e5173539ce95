"""The trainable model bundle and its per-scene forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import (BackboneWeights, extract_point_features, init_backbone,
                       knn_indices, pool_superpoints)
from .config import TrainConfig
from .decoder import (DecoderWeights, PredictionSet, QueryBundle, TaskEmbeddings,
                      assemble_queries, decode, init_decoder, init_task_embeddings,
                      predict, sample_query_count)
from .losses import init_log_tau
from .prompts import (ClassEmbeddings, TextProjection, embed_class_names, embed_text,
                      encode_vision_prompt, init_text_projection, project_text)
from .rng import make_rng
from .scene import Scene


@dataclass
class Model:
    """Weights plus the frozen class-embedding table for the base vocabulary."""

    config: TrainConfig
    backbone: BackboneWeights
    decoder: DecoderWeights
    task_emb: TaskEmbeddings
    text_proj: TextProjection
    log_tau: ad.Tensor
    class_names: list[str]
    stuff_flags: list[bool]
    base_class_ids: list[int]
    e_cls: ClassEmbeddings

    @property
    def no_object_index(self) -> int:
        return self.e_cls.no_object_index

    def named_params(self) -> dict[str, ad.Tensor]:
        out = {}
        out.update(self.backbone.named_params())
        out.update(self.decoder.named_params())
        out.update(self.task_emb.named_params())
        out.update(self.text_proj.named_params())
        out["loss.log_tau"] = self.log_tau
        return out

    def global_class(self, local: int) -> int:
        """Map a class-head column back to the scene class table."""
        return self.base_class_ids[local]


def init_model(config: TrainConfig, class_names: list[str], stuff_flags: list[bool],
               base_class_ids: list[int] | None = None) -> Model:
    config.validate()
    if base_class_ids is None:
        base_class_ids = list(range(len(class_names)))
    rng = make_rng(config.seed, "init")
    base_names = [class_names[i] for i in base_class_ids]
    return Model(
        config=config,
        backbone=init_backbone(rng, config.d_in),
        decoder=init_decoder(rng, config.d_in, config.d_out, config.decoder_layers,
                             config.n_heads),
        task_emb=init_task_embeddings(config.d_in),
        text_proj=init_text_projection(rng, config.d_in),
        log_tau=init_log_tau(),
        class_names=list(class_names),
        stuff_flags=list(stuff_flags),
        base_class_ids=list(base_class_ids),
        e_cls=embed_class_names(base_names, config.d_out, embedder_seed=0),
    )


@dataclass
class ForwardResult:
    preds: PredictionSet
    bundle: QueryBundle
    superpoint_features: ad.Tensor


def forward_scene(model: Model, scene: Scene, *, training: bool, seed: int,
                  clicks: list[int] = (), expressions: list[tuple[str, ...]] = (),
                  knn: np.ndarray | None = None,
                  indices: np.ndarray | None = None) -> ForwardResult:
    """One pass: backbone, pooling, query assembly, decoding, prediction.

    clicks are point indices; expressions are token tuples. The prompt order
    defines the prompt-row order in the PredictionSet.
    """
    feats = extract_point_features(scene, model.backbone, nbr=knn)
    f_sp = pool_superpoints(feats, scene.superpoint_id, scene.n_superpoints)

    vision = [encode_vision_prompt(p, scene, f_sp) for p in clicks]
    text_feats = None
    if expressions:
        frozen = np.stack([embed_text(tok) for tok in expressions])
        text_feats = project_text(frozen, model.text_proj)

    if indices is None:
        m = sample_query_count(scene.n_superpoints, seed, training,
                               model.config.m_low_fraction, model.config.query_cap)
    else:
        m = len(indices)
    bundle = assemble_queries(f_sp, m, model.task_emb, seed, vision, text_feats,
                              indices=indices)
    f_u, f_p = decode(bundle, f_sp, model.decoder)
    preds = predict(f_u, f_p, f_sp, model.e_cls, bundle, model.decoder)
    return ForwardResult(preds=preds, bundle=bundle, superpoint_features=f_sp)


def scene_knn(scene: Scene) -> np.ndarray:
    return knn_indices(scene.points)
