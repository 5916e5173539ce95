"""Six inference pipelines over one shared forward pass.

All pipelines read the same PredictionSet; none re-runs the model. Score
and threshold constants are fixed here (the config carries them so runs
stay reproducible).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import np_sigmoid
from .decoder import PredictionSet, superpoint_to_point
from .metrics import Segment
from .prompts import ClassEmbeddings
from .scene import Scene

BINARIZE = 0.5          # mask probability threshold
SCORE_FLOOR = 0.1       # minimum instance confidence
MIN_SEGMENT_POINTS = 25  # panoptic segments below this are dropped


@dataclass
class TaskOutputs:
    """Everything one forward pass yields across the six tasks."""

    panoptic_segment: np.ndarray = None      # (N,) segment id, -1 = void
    panoptic_class: np.ndarray = None        # (N,) class id, -1 = void
    semantic: np.ndarray = None              # (N,) class id
    instances: list = field(default_factory=list)    # (mask, class_id, score)
    interactive: list = field(default_factory=list)  # (N,) bool per click
    referring: list = field(default_factory=list)    # (N,) bool per expression
    openvocab: list = field(default_factory=list)    # (mask, open class id, score)


def _point_mask_probs(preds: PredictionSet, row: int, scene: Scene) -> np.ndarray:
    logits = superpoint_to_point(preds.mask_logits.data[row], scene.superpoint_id,
                                 preds.sampled, scene.n_superpoints)
    return np_sigmoid(logits)


def _scored_instances(mask_rows: np.ndarray, cls_rows: np.ndarray, scene: Scene,
                      sampled: np.ndarray, no_object_index: int,
                      keep_classes: np.ndarray | None = None) -> list:
    """Shared mask+score extraction for closed- and open-vocabulary instances."""
    out = []
    point_logits = superpoint_to_point(mask_rows, scene.superpoint_id, sampled,
                                       scene.n_superpoints)
    probs = np_sigmoid(point_logits)
    for i in range(mask_rows.shape[0]):
        cls = int(np.argmax(cls_rows[i]))
        if cls == no_object_index:
            continue
        if keep_classes is not None and cls not in keep_classes:
            continue
        mask = probs[i] > BINARIZE
        if not mask.any():
            continue
        score = float(cls_rows[i, cls]) * float(probs[i][mask].mean())
        if score < SCORE_FLOOR:
            continue
        out.append((mask, cls, score, i))
    return out


def infer_instances(preds: PredictionSet, scene: Scene, no_object_index: int) -> list:
    """Closed-vocabulary instances from the unified rows: (mask, class, score).

    Rows whose argmax lands on no-object are dropped; duplicates survive
    (AP treats them as false positives). No NMS: queries already competed
    during Hungarian-supervised training.
    """
    rows = _scored_instances(preds.mask_logits.data[:preds.m],
                             preds.cls_pred.data[:preds.m],
                             scene, preds.sampled, no_object_index)
    return [(mask, cls, score) for mask, cls, score, _ in rows]


def infer_semantic(preds: PredictionSet, scene: Scene, no_object_index: int) -> np.ndarray:
    """Per point: argmax_c sum_i sigmoid(mask_i) * cls_i(c), no-object excluded."""
    sig = np_sigmoid(preds.mask_logits.data[:preds.m])          # (m, m_cols)
    cls = preds.cls_pred.data[:preds.m].copy()                  # (m, C+1)
    cls = np.delete(cls, no_object_index, axis=1)
    scores_sp = sig.T @ cls                                      # (m_cols, C)
    full = np.zeros((scene.n_superpoints, cls.shape[1]))
    full[preds.sampled] = scores_sp
    return np.argmax(full, axis=1)[scene.superpoint_id]


def infer_panoptic(instances: list, semantic: np.ndarray,
                   stuff_flags: list[bool]) -> tuple[np.ndarray, np.ndarray]:
    """Stuff from the semantic map plus instances overlaid by score.

    Instances claim points in descending score (ties: lower query index =
    earlier list position); claims below MIN_SEGMENT_POINTS are dropped and
    their points returned. Unclaimed points keep their stuff label or void.
    """
    n = len(semantic)
    seg = np.full(n, -1, dtype=np.int64)
    cls_map = np.full(n, -1, dtype=np.int64)
    next_id = 0
    order = sorted(range(len(instances)), key=lambda i: (-instances[i][2], i))
    for i in order:
        mask, cls, _score = instances[i]
        claim = mask & (seg < 0)
        if claim.sum() < MIN_SEGMENT_POINTS:
            continue
        seg[claim] = next_id
        cls_map[claim] = cls
        next_id += 1
    for cls, is_stuff in enumerate(stuff_flags):
        if not is_stuff:
            continue
        claim = (semantic == cls) & (seg < 0)
        if not claim.any():
            continue
        seg[claim] = next_id
        cls_map[claim] = cls
        next_id += 1
    return seg, cls_map


def infer_interactive(preds: PredictionSet, scene: Scene) -> list[np.ndarray]:
    """Vision-prompt rows binarized and mapped to points, one mask per click."""
    return [(_point_mask_probs(preds, preds.vision_row(i), scene) > BINARIZE)
            for i in range(preds.k_vision)]


def infer_referring(preds: PredictionSet, scene: Scene) -> list[np.ndarray]:
    """Text-prompt rows binarized and mapped to points, one per expression."""
    return [(_point_mask_probs(preds, preds.text_row(i), scene) > BINARIZE)
            for i in range(preds.k_text)]


def infer_openvocab(preds: PredictionSet, scene: Scene, open_vocab: ClassEmbeddings,
                    novel_class_ids: np.ndarray | None = None) -> list:
    """Instances classified against an arbitrary name-embedding table.

    The class head accepts any vocabulary: logits are F_out x e_cls_open^T.
    When `novel_class_ids` is given, only those classes are kept (the
    open-vocabulary protocol scores the novel split only).
    """
    f_out = preds.f_out.data[:preds.m]
    logits = f_out @ open_vocab.matrix.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    rows = _scored_instances(preds.mask_logits.data[:preds.m], probs, scene,
                             preds.sampled, open_vocab.no_object_index,
                             keep_classes=novel_class_ids)
    return [(mask, cls, score) for mask, cls, score, _ in rows]


def run_all_tasks(preds: PredictionSet, scene: Scene, no_object_index: int,
                  open_vocab: ClassEmbeddings | None = None,
                  novel_class_ids: np.ndarray | None = None) -> TaskOutputs:
    """One PredictionSet in, all six task outputs out (object identity kept)."""
    shared = preds
    out = TaskOutputs()
    out.instances = infer_instances(shared, scene, no_object_index)
    out.semantic = infer_semantic(shared, scene, no_object_index)
    out.panoptic_segment, out.panoptic_class = infer_panoptic(
        out.instances, out.semantic, scene.stuff_flags)
    out.interactive = infer_interactive(shared, scene)
    out.referring = infer_referring(shared, scene)
    if open_vocab is not None:
        out.openvocab = infer_openvocab(shared, scene, open_vocab, novel_class_ids)
    return out


# ---------------------------------------------------------------------------
# segment views for the metrics


def panoptic_segments_from_map(segment_id: np.ndarray, class_id: np.ndarray) -> list[Segment]:
    segs = []
    for sid in np.unique(segment_id):
        if sid < 0:
            continue
        mask = segment_id == sid
        segs.append(Segment(mask=mask, class_id=int(class_id[mask][0])))
    return segs


def gt_panoptic_segments(scene: Scene) -> list[Segment]:
    segs = [Segment(mask=scene.instance_point_mask(i), class_id=scene.instance_class(i))
            for i in scene.thing_instances()]
    for cls, is_stuff in enumerate(scene.stuff_flags):
        if is_stuff:
            mask = scene.stuff_point_mask(cls)
            if mask.any():
                segs.append(Segment(mask=mask, class_id=cls))
    return segs


def export_outputs(outputs: TaskOutputs) -> str:
    """Flat text export of per-point labels and instance lists."""
    lines = ["format = multiseg3d-outputs", "version = 1"]
    lines.append("panoptic_segment = " + " ".join(map(str, outputs.panoptic_segment)))
    lines.append("panoptic_class = " + " ".join(map(str, outputs.panoptic_class)))
    lines.append("semantic = " + " ".join(map(str, outputs.semantic)))
    for name, items in (("instance", outputs.instances), ("openvocab", outputs.openvocab)):
        for mask, cls, score in items:
            idx = " ".join(map(str, np.flatnonzero(mask)))
            lines.append(f"{name} = {cls} {score:.17g} {idx}")
    for name, masks in (("interactive", outputs.interactive),
                        ("referring", outputs.referring)):
        for mask in masks:
            lines.append(f"{name} = " + " ".join(map(str, np.flatnonzero(mask))))
    return "\n".join(lines) + "\n"
