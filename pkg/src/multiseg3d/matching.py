"""Assignment of unified-query predictions to targets.

Costs combine soft-Dice and class cross-entropy; the solver is an exact
shortest-augmenting-path Hungarian (potentials form). Unmatched predictions
can be re-matched against open-set pseudo masks on Dice alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

LOG_EPS = 1e-12


@dataclass
class Targets:
    """Ground-truth segments over the sampled superpoint columns."""

    masks: np.ndarray            # (n_targets, m) binary
    classes: np.ndarray          # (n_targets,) class indices
    instance_ids: np.ndarray     # (n_targets,) original instance id, -1 for stuff

    def __len__(self) -> int:
        return len(self.classes)


def dice_cost_matrix(probs: np.ndarray, target_masks: np.ndarray) -> np.ndarray:
    """1 - soft Dice for every (prediction, target) pair."""
    if target_masks.shape[0] and np.any(target_masks.sum(axis=1) == 0):
        raise ContractError("dice_cost_matrix: empty target mask")
    inter = probs @ target_masks.T
    denom = probs.sum(axis=1)[:, None] + target_masks.sum(axis=1)[None, :]
    return 1.0 - 2.0 * inter / denom


def assignment_cost(mask_probs: np.ndarray, cls_probs: np.ndarray,
                    targets: Targets, w_dice: float = 1.0, w_ce: float = 1.0) -> np.ndarray:
    """cost(i, j) = w_dice * DiceCost + w_ce * (-log p_i[class_j])."""
    dice = dice_cost_matrix(mask_probs, targets.masks)
    ce = -np.log(np.maximum(cls_probs[:, targets.classes], LOG_EPS))
    cost = w_dice * dice + w_ce * ce
    if not np.all(np.isfinite(cost)):
        raise ContractError("assignment_cost: non-finite cost entry")
    return cost


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment covering every column.

    Requires rows >= cols; use :func:`hungarian_padded` otherwise. Columns
    are assigned in ascending order and minima resolve to the lowest row
    index, so ties break deterministically (lexicographic preference).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError("hungarian: cost must be a matrix")
    if not np.all(np.isfinite(cost)):
        raise ContractError("hungarian: non-finite cost entries")
    n_rows, n_cols = cost.shape
    if n_cols == 0:
        return []
    if n_rows < n_cols:
        raise ContractError(f"hungarian: requires rows >= cols, got {cost.shape}")

    # shortest augmenting path with potentials, one column at a time;
    # internally 1-indexed over "jobs" = columns and "workers" = rows
    INF = np.inf
    u = np.zeros(n_cols + 1)          # column potentials
    v = np.zeros(n_rows + 1)          # row potentials
    way = np.zeros(n_rows + 1, dtype=int)
    match_row = np.zeros(n_rows + 1, dtype=int)  # row -> col (1-indexed, 0 = free)
    for j in range(1, n_cols + 1):
        match_row[0] = j
        i0 = 0
        minv = np.full(n_rows + 1, INF)
        used = np.zeros(n_rows + 1, dtype=bool)
        while True:
            used[i0] = True
            j0 = match_row[i0]
            delta = INF
            i1 = -1
            for i in range(1, n_rows + 1):
                if used[i]:
                    continue
                cur = cost[i - 1, j0 - 1] - u[j0] - v[i]
                if cur < minv[i]:
                    minv[i] = cur
                    way[i] = i0
                if minv[i] < delta:
                    delta = minv[i]
                    i1 = i
            for i in range(n_rows + 1):
                if used[i]:
                    u[match_row[i]] += delta
                    v[i] -= delta
                else:
                    minv[i] -= delta
            i0 = i1
            if match_row[i0] == 0:
                break
        while i0:
            i1 = way[i0]
            match_row[i0] = match_row[i1]
            i0 = i1
    pairs = [(i - 1, match_row[i] - 1) for i in range(1, n_rows + 1) if match_row[i] != 0]
    return sorted(pairs)


def hungarian_padded(cost: np.ndarray) -> list[tuple[int, int]]:
    """Hungarian for any shape: dummy rows absorb the surplus columns."""
    cost = np.asarray(cost, dtype=np.float64)
    n_rows, n_cols = cost.shape
    if n_rows >= n_cols:
        return hungarian(cost)
    pad_value = 2.0 * np.abs(cost).max(initial=0.0) + 1.0
    padded = np.vstack([cost, np.full((n_cols - n_rows, n_cols), pad_value)])
    return [(i, j) for i, j in hungarian(padded) if i < n_rows]


@dataclass
class MatchResult:
    """Hungarian outcome split into positives, pseudo pairs and free negatives."""

    pairs: list[tuple[int, int]]                 # (prediction row, target index)
    positives: list[int] = field(default_factory=list)
    free_negatives: list[int] = field(default_factory=list)
    pseudo_pairs: list[tuple[int, int]] = field(default_factory=list)  # (pred row, pseudo idx)
    target_of: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positives = [i for i, _ in self.pairs]
        self.target_of = {i: j for i, j in self.pairs}


def point_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def admissible_pseudo_masks(pseudo_point_masks: np.ndarray,
                            gt_instance_point_masks: np.ndarray,
                            iou_threshold: float = 0.5) -> list[int]:
    """Pseudo masks that overlap no ground-truth instance at IoU >= 0.5.

    Keeps pseudo supervision from competing with real labels.
    """
    keep = []
    for k, pm in enumerate(pseudo_point_masks):
        if all(point_iou(pm, gm) < iou_threshold for gm in gt_instance_point_masks):
            keep.append(k)
    return keep


def split_and_rematch(assignment: list[tuple[int, int]], mask_probs: np.ndarray,
                      pseudo_masks_sp: np.ndarray,
                      admissible: list[int]) -> MatchResult:
    """Split predictions into positives/negatives; re-match negatives to the
    admissible pseudo masks with a Dice-only cost. Pseudo-matched rows are
    supervised on masks only, never on class."""
    n_preds = mask_probs.shape[0]
    matched = {i for i, _ in assignment}
    negatives = [i for i in range(n_preds) if i not in matched]
    result = MatchResult(pairs=list(assignment))
    result.free_negatives = list(negatives)
    if not negatives or not admissible:
        return result
    adm_masks = pseudo_masks_sp[admissible]
    nonempty = [k for k in range(len(adm_masks)) if adm_masks[k].sum() > 0]
    if not nonempty:
        return result
    cost = dice_cost_matrix(mask_probs[negatives], adm_masks[nonempty])
    pairs = hungarian_padded(cost)
    result.pseudo_pairs = [(negatives[i], admissible[nonempty[j]]) for i, j in pairs]
    pseudo_rows = {i for i, _ in result.pseudo_pairs}
    result.free_negatives = [i for i in negatives if i not in pseudo_rows]
    return result
