"""Training objectives: base mask/class supervision, ranking-based
contrastive alignment of paired vision/text features, and the two
teacher-student distillations from the click-prompted task.

Teachers are always detached numpy arrays: gradient flows to students only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import np_sigmoid
from .decoder import PredictionSet
from .errors import ContractError
from .matching import MatchResult, Targets

INTER_TASK_WEIGHT = 0.1   # balance weight on the inter-task losses
TOP_K_PERCENT = 10        # distillation region size, percent of mask columns
TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 0.01, 1.0


def init_log_tau() -> ad.Tensor:
    return ad.parameter(np.log(TAU_INIT))


def clamp_log_tau(log_tau: ad.Tensor) -> None:
    """Projected clamp after each optimizer step keeps tau in [0.01, 1]."""
    log_tau.data = np.clip(log_tau.data, np.log(TAU_MIN), np.log(TAU_MAX))


# ---------------------------------------------------------------------------
# base loss


@dataclass
class PromptTargets:
    """Direct supervision for prompt rows: the prompted instances' masks."""

    vision_masks: np.ndarray      # (K_v, m)
    vision_classes: np.ndarray    # (K_v,)
    text_masks: np.ndarray        # (K_t, m)
    text_classes: np.ndarray      # (K_t,)


def _mask_group_term(logits_rows: ad.Tensor, target_masks: np.ndarray) -> ad.Tensor:
    """mean BCE over entries + mean Dice loss over rows for one row group."""
    bce = ad.tmean(ad.bce_logits(logits_rows, target_masks))
    dice = ad.dice_rows(ad.sigmoid(logits_rows), target_masks)
    return ad.add(bce, ad.tmean(ad.add(ad.mul(dice, -1.0), 1.0)))


def base_loss(match: MatchResult, preds: PredictionSet, targets: Targets,
              no_object_index: int, prompt_targets: PromptTargets | None = None,
              pseudo_masks_sp: np.ndarray | None = None) -> ad.Tensor:
    """L_base = mask terms (BCE + Dice) + class cross-entropy.

    Group means keep the parts additive: positives, pseudo pairs and prompt
    rows each contribute an independent mean. Free negatives are pushed to
    the no-object class; pseudo-matched rows get mask supervision only.
    """
    terms: list[ad.Tensor] = []

    if match.positives:
        rows = np.array(match.positives)
        tgt = targets.masks[[match.target_of[i] for i in match.positives]]
        terms.append(_mask_group_term(ad.gather_rows(preds.mask_logits, rows), tgt))

    if match.pseudo_pairs:
        if pseudo_masks_sp is None:
            raise ContractError("base_loss: pseudo pairs present but no pseudo masks given")
        rows = np.array([i for i, _ in match.pseudo_pairs])
        tgt = pseudo_masks_sp[[j for _, j in match.pseudo_pairs]]
        terms.append(_mask_group_term(ad.gather_rows(preds.mask_logits, rows), tgt))

    cls_rows = list(match.positives) + list(match.free_negatives)
    cls_targets = ([targets.classes[match.target_of[i]] for i in match.positives]
                   + [no_object_index] * len(match.free_negatives))
    if cls_rows:
        logits = ad.gather_rows(preds.cls_logits, np.array(cls_rows))
        terms.append(ad.tmean(ad.ce_logits(logits, np.array(cls_targets))))

    if prompt_targets is not None:
        p_masks = np.concatenate([prompt_targets.vision_masks, prompt_targets.text_masks])
        p_classes = np.concatenate([prompt_targets.vision_classes, prompt_targets.text_classes])
        if len(p_masks):
            rows = np.arange(preds.m, preds.m + len(p_masks))
            terms.append(_mask_group_term(ad.gather_rows(preds.mask_logits, rows), p_masks))
            logits = ad.gather_rows(preds.cls_logits, rows)
            terms.append(ad.tmean(ad.ce_logits(logits, p_classes.astype(int))))

    if not terms:
        return ad.Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


# ---------------------------------------------------------------------------
# ranking-based contrastive learning


@dataclass
class SimilarityMatrix:
    """Pairwise similarities of normalized paired features plus temperature."""

    s: ad.Tensor            # (B, B), s[i, j] = e_i^vision . e_j^text
    log_tau: ad.Tensor      # scalar parameter; tau = exp(log_tau)

    @property
    def batch(self) -> int:
        return self.s.shape[0]


def similarity_matrix(f_vision: ad.Tensor, f_text: ad.Tensor,
                      log_tau: ad.Tensor) -> SimilarityMatrix:
    if f_vision.shape != f_text.shape or f_vision.ndim != 2:
        raise ContractError(f"similarity_matrix: {f_vision.shape} vs {f_text.shape}")
    e_v = ad.l2_normalize_rows(f_vision)
    e_t = ad.l2_normalize_rows(f_text)
    return SimilarityMatrix(s=ad.matmul(e_v, ad.transpose(e_t)), log_tau=log_tau)


def contrastive_loss(sim: SimilarityMatrix) -> ad.Tensor:
    """Symmetric InfoNCE over the pair matrix, both directions averaged."""
    b = sim.batch
    if b == 0:
        raise ContractError("contrastive_loss: empty batch")
    inv_tau = ad.texp(ad.mul(sim.log_tau, -1.0))
    scaled = ad.mul(sim.s, inv_tau)
    diag = np.arange(b)
    loss_v = ad.tmean(ad.ce_logits(scaled, diag))
    loss_t = ad.tmean(ad.ce_logits(ad.transpose(scaled), diag))
    return ad.add(loss_v, loss_t)


def ranking_loss(sim: SimilarityMatrix) -> ad.Tensor:
    """(1/B) sum_ij max(0, s_ij - s_ii); zero when diagonals dominate rows."""
    b = sim.batch
    if b == 0:
        raise ContractError("ranking_loss: empty batch")
    diag = ad.take_along_rows(sim.s, np.arange(b)[:, None])   # (B, 1)
    hinge = ad.relu(ad.add(sim.s, ad.mul(diag, -1.0)))
    return ad.mul(ad.tsum(hinge), 1.0 / b)


# ---------------------------------------------------------------------------
# knowledge distillation


@dataclass
class DistillBatch:
    """Detached teacher predictions aligned with their student rows.

    mask rows pair the click-prompted teacher with the unified positive
    matched to the same instance; region holds each teacher row's top-k%
    column indices.
    """

    teacher_masks: np.ndarray       # (K, m) logits, detached
    student_masks: ad.Tensor        # (K, m) logits, on the tape
    region: np.ndarray              # (K, r) column indices
    teacher_cls: np.ndarray         # (B, n_classes + 1) logits, detached
    student_cls: ad.Tensor          # (B, n_classes + 1) logits, on the tape


def top_k_region(teacher_masks: np.ndarray, k_percent: float = TOP_K_PERCENT) -> np.ndarray:
    """Column indices of the top k% teacher scores per row, at least one."""
    n, m = teacher_masks.shape
    if m == 0:
        raise ContractError("top_k_region: no mask columns")
    r = max(1, int(np.floor(k_percent / 100.0 * m)))
    order = np.argsort(-teacher_masks, axis=1, kind="stable")
    return order[:, :r]


def distill_mask_loss(student_masks: ad.Tensor, teacher_masks: np.ndarray,
                      region: np.ndarray) -> ad.Tensor:
    """Soft-target BCE on the teacher's confident region, student side only."""
    if student_masks.shape != teacher_masks.shape:
        raise ContractError("distill_mask_loss: teacher/student shape mismatch")
    student_r = ad.take_along_rows(student_masks, region)
    target = np_sigmoid(np.take_along_axis(teacher_masks, region, axis=1))
    return ad.tmean(ad.bce_logits(student_r, target))


def distill_class_loss(student_cls: ad.Tensor, teacher_cls: np.ndarray) -> ad.Tensor:
    """Sigmoid-matched BCE between paired class logits, teacher detached."""
    if student_cls.shape != teacher_cls.shape:
        raise ContractError("distill_class_loss: teacher/student shape mismatch")
    return ad.tmean(ad.bce_logits(student_cls, np_sigmoid(teacher_cls)))


def distill_v_to_g(batch: DistillBatch) -> ad.Tensor:
    return distill_mask_loss(batch.student_masks, batch.teacher_masks, batch.region)


def distill_v_to_r(batch: DistillBatch) -> ad.Tensor:
    return distill_class_loss(batch.student_cls, batch.teacher_cls)


# ---------------------------------------------------------------------------
# composition


def total_loss(base: ad.Tensor, inter_parts: list[ad.Tensor],
               weight: float = INTER_TASK_WEIGHT) -> ad.Tensor:
    """L = L_base + weight * sum(enabled inter-task parts)."""
    if not inter_parts:
        return base
    inter = inter_parts[0]
    for part in inter_parts[1:]:
        inter = ad.add(inter, part)
    return ad.add(base, ad.mul(inter, weight))
