"""Trainable point-feature network and superpoint pooling.

A per-point MLP on normalized (x, y, z, r, g, b) followed by two rounds of
8-NN mean aggregation with residual + layer norm; small, smooth and fully
differentiable. k-NN indices are data, not parameters, so callers may
precompute and reuse them per scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import ContractError
from .scene import Scene

KNN_K = 8


@dataclass
class BackboneWeights:
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    ln_gamma1: ad.Tensor
    ln_beta1: ad.Tensor
    ln_gamma2: ad.Tensor
    ln_beta2: ad.Tensor

    def named_params(self, prefix: str = "backbone") -> dict[str, ad.Tensor]:
        return {
            f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
            f"{prefix}.ln_gamma1": self.ln_gamma1, f"{prefix}.ln_beta1": self.ln_beta1,
            f"{prefix}.ln_gamma2": self.ln_gamma2, f"{prefix}.ln_beta2": self.ln_beta2,
        }


def init_backbone(rng: np.random.Generator, d_in: int) -> BackboneWeights:
    return BackboneWeights(
        w1=ad.parameter((6, d_in), rng), b1=ad.parameter(np.zeros(d_in)),
        w2=ad.parameter((d_in, d_in), rng), b2=ad.parameter(np.zeros(d_in)),
        ln_gamma1=ad.parameter(np.ones(d_in)), ln_beta1=ad.parameter(np.zeros(d_in)),
        ln_gamma2=ad.parameter(np.ones(d_in)), ln_beta2=ad.parameter(np.zeros(d_in)),
    )


def knn_indices(points: np.ndarray, k: int = KNN_K) -> np.ndarray:
    """Indices of the k nearest distinct points (self column removed)."""
    if len(points) < k + 1:
        raise ContractError(f"knn_indices: need at least {k + 1} points, got {len(points)}")
    _, nbr = cKDTree(points).query(points, k=k + 1)
    return nbr[:, 1:]


def extract_point_features(scene: Scene, weights: BackboneWeights,
                           nbr: np.ndarray | None = None) -> ad.Tensor:
    """Per-point features (N, d_in); permutation-equivariant by construction."""
    pts = scene.points
    if len(pts) < KNN_K + 1:
        raise ContractError("extract_point_features: scene too small for 8-NN")
    if nbr is None:
        nbr = knn_indices(pts)
    lo = pts.min(axis=0)
    span = np.maximum(pts.max(axis=0) - lo, 1e-12)
    inputs = ad.Tensor(np.hstack([(pts - lo) / span, scene.colors]))
    h = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(inputs, weights.w1), weights.b1)),
                         weights.w2), weights.b2)
    h = ad.layer_norm(ad.add(h, ad.neighbor_mean(h, nbr)),
                      weights.ln_gamma1, weights.ln_beta1)
    h = ad.layer_norm(ad.add(h, ad.neighbor_mean(h, nbr)),
                      weights.ln_gamma2, weights.ln_beta2)
    return h


def pool_superpoints(features: ad.Tensor, superpoint_id: np.ndarray,
                     n_superpoints: int) -> ad.Tensor:
    """Arithmetic mean of point features per superpoint -> (M, d_in)."""
    return ad.segment_mean(features, superpoint_id, n_superpoints)
