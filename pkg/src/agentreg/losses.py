"""Circle loss over descriptor distances and the combined training objective.

Distances are cosine distances of L2-normalized descriptors, so they live
in [0, 2]. Each positive pair is weighted by how far it still is above the
positive margin and each negative by how far it still is below the
negative margin (clamped linear weights); both weights are functions of
the distance itself, and the analytic gradients below include that
dependence, which is what the finite-difference suite checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import Stage
from .errors import ConfigurationError, ContractViolationError

_NORM_FLOOR = 1e-12
_DIST_SLACK = 1e-9


@dataclass
class LossParams:
    gamma: float = 10.0
    delta_p: float = 0.1
    delta_n: float = 1.4
    lambda1: float = 1.0
    lambda2: float = 1.0
    pos_radius: float = 0.05   # 3D distance bound for positive mining
    neg_radius: float = 0.15   # safe radius beyond which pairs are negatives

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")
        if not 0 < self.delta_p < self.delta_n:
            raise ConfigurationError("require 0 < delta_p < delta_n")


@dataclass
class CircleLossResult:
    loss: float
    grad_positives: np.ndarray
    grad_negatives: np.ndarray


def circle_loss(positive_distances, negative_distances,
                params: LossParams) -> CircleLossResult:
    """Log-sum-exp circle loss for one anchor.

    Empty positive or negative sets give loss 0 by convention. Distances
    must lie in [0, 2] up to slack 1e-9.
    """
    pos = np.asarray(positive_distances, dtype=np.float64).reshape(-1)
    neg = np.asarray(negative_distances, dtype=np.float64).reshape(-1)
    for d in (pos, neg):
        if d.size and (d.min() < -_DIST_SLACK or d.max() > 2.0 + _DIST_SLACK):
            raise ContractViolationError(
                f"cosine distances must lie in [0, 2], got range "
                f"[{d.min():.3g}, {d.max():.3g}]")
    if pos.size == 0 or neg.size == 0:
        return CircleLossResult(0.0, np.zeros_like(pos), np.zeros_like(neg))

    g = params.gamma
    wp = np.maximum(0.0, pos - params.delta_p)       # clamped positive weight
    wn = np.maximum(0.0, params.delta_n - neg)       # clamped negative weight
    ep = np.exp(g * wp * wp)
    en = np.exp(g * wn * wn)
    sp = ep.sum()
    sn = en.sum()
    loss = float(np.log1p(sp * sn) / g)
    denom = 1.0 + sp * sn
    grad_pos = sn * ep * 2.0 * wp / denom
    grad_neg = -sp * en * 2.0 * wn / denom
    return CircleLossResult(loss, grad_pos, grad_neg)


def total_loss(l_t: float, l_full: float, params: LossParams,
               stage: Stage) -> float:
    """Training objective: the task loss plus, on rewards-guided epochs,
    the weighted selection objective."""
    if stage is Stage.REWARDS_GUIDED:
        return params.lambda1 * l_t + params.lambda2 * l_full
    return params.lambda1 * l_t


# --- descriptor-space distances with gradients -------------------------------

def cosine_distance_matrix(a: np.ndarray, b: np.ndarray):
    """All-pairs cosine distance 1 - cos for row vectors, with a cache."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.maximum(np.linalg.norm(a, axis=1), _NORM_FLOOR)
    nb = np.maximum(np.linalg.norm(b, axis=1), _NORM_FLOOR)
    ah = a / na[:, None]
    bh = b / nb[:, None]
    sim = ah @ bh.T
    cache = {"ah": ah, "bh": bh, "na": na, "nb": nb, "sim": sim}
    return 1.0 - sim, cache


def cosine_distance_backward(cache: dict, d_dist: np.ndarray):
    """Push a gradient on the distance matrix back to both feature sets."""
    ds = -np.asarray(d_dist, dtype=np.float64)
    ah, bh, sim = cache["ah"], cache["bh"], cache["sim"]
    row = (ds * sim).sum(axis=1, keepdims=True)
    col = (ds * sim).sum(axis=0)[:, None]
    da = (ds @ bh - row * ah) / cache["na"][:, None]
    db = (ds.T @ ah - col * bh) / cache["nb"][:, None]
    return da, db


def mine_pair_masks(patch_xyz_cam: np.ndarray, patch_occupied: np.ndarray,
                    superpoint_positions: np.ndarray, t_gt,
                    params: LossParams):
    """Positive/negative masks over (patch, superpoint) from 3D distances.

    A pair is positive within pos_radius of the ground-truth alignment,
    negative beyond neg_radius, and ignored in between.
    """
    sp_cam = t_gt.apply(superpoint_positions)
    d = np.linalg.norm(patch_xyz_cam[:, None, :] - sp_cam[None, :, :], axis=2)
    occ = np.asarray(patch_occupied, dtype=bool)[:, None]
    positive = (d <= params.pos_radius) & occ
    negative = (d >= params.neg_radius) & occ
    return positive, negative


@dataclass
class MatchingLossResult:
    loss: float
    d_features_a: np.ndarray
    d_features_b: np.ndarray
    n_anchors: int


def matching_circle_loss(features_a: np.ndarray, features_b: np.ndarray,
                         positive_mask: np.ndarray, negative_mask: np.ndarray,
                         params: LossParams) -> MatchingLossResult:
    """Mean per-anchor circle loss over rows of a cosine-distance matrix.

    Anchors (rows of `features_a`) participate when they own at least one
    positive and one negative; gradients flow back into both feature sets.
    """
    dist, cache = cosine_distance_matrix(features_a, features_b)
    d_dist = np.zeros_like(dist)
    losses = []
    for i in range(dist.shape[0]):
        pos_idx = np.flatnonzero(positive_mask[i])
        neg_idx = np.flatnonzero(negative_mask[i])
        if pos_idx.size == 0 or neg_idx.size == 0:
            continue
        res = circle_loss(dist[i, pos_idx], dist[i, neg_idx], params)
        losses.append(res.loss)
        d_dist[i, pos_idx] += res.grad_positives
        d_dist[i, neg_idx] += res.grad_negatives
    if not losses:
        zero_a = np.zeros_like(np.asarray(features_a, dtype=np.float64))
        zero_b = np.zeros_like(np.asarray(features_b, dtype=np.float64))
        return MatchingLossResult(0.0, zero_a, zero_b, 0)
    n = len(losses)
    da, db = cosine_distance_backward(cache, d_dist / n)
    return MatchingLossResult(float(np.mean(losses)), da, db, n)
