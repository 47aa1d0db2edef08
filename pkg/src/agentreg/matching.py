"""Coarse patch-to-superpoint matching and fine pixel-to-point refinement.

Coarse pairs are mutual top-k under cosine similarity with a floor; fine
pairs are mutual nearest neighbors inside each matched patch/superpoint
block, deduplicated greedily by descending similarity. Everything is
deterministic: sorting uses explicit (similarity, index) keys and argmax
ties resolve to the lower index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

_NORM_FLOOR = 1e-12


@dataclass
class FeatureGrid:
    features: np.ndarray       # (P_i, C), row-major patches
    patch_centers: np.ndarray  # (P_i, 2) pixel coordinates
    patch_size: int


@dataclass
class PointFeatures:
    features: np.ndarray       # (P_p, C)
    positions: np.ndarray      # (P_p, 3) cloud frame
    members: list              # per-superpoint fine point index arrays


@dataclass
class CoarseMatch:
    patch: int
    superpoint: int
    similarity: float


@dataclass
class FineMatches:
    uv: np.ndarray     # (K, 2)
    xyz: np.ndarray    # (K, 3)
    similarity: np.ndarray  # (K,)

    @classmethod
    def empty(cls) -> "FineMatches":
        return cls(uv=np.zeros((0, 2)), xyz=np.zeros((0, 3)),
                   similarity=np.zeros(0))

    def __len__(self) -> int:
        return self.uv.shape[0]


@dataclass
class CorrespondenceSet:
    coarse: list[CoarseMatch] = field(default_factory=list)
    fine: FineMatches = field(default_factory=FineMatches.empty)


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), _NORM_FLOOR)
    nb = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), _NORM_FLOOR)
    return (a / na) @ (b / nb).T


def _topk_rank(sim: np.ndarray, axis: int) -> np.ndarray:
    """rank[i, j]: position of entry (i, j) in its slice sorted descending."""
    order = np.argsort(-sim, axis=axis, kind="stable")
    rank = np.empty_like(order)
    idx = np.arange(sim.shape[axis])
    if axis == 1:
        for i in range(sim.shape[0]):
            rank[i, order[i]] = idx
    else:
        for j in range(sim.shape[1]):
            rank[order[:, j], j] = idx
    return rank


def coarse_match(grid: FeatureGrid, points: PointFeatures, top_c: int = 3,
                 s_min: float = 0.0) -> list[CoarseMatch]:
    """Mutual top-`top_c` pairs with similarity >= s_min, best first."""
    if top_c < 1:
        raise ConfigurationError("top_c must be at least 1")
    if grid.features.shape[0] == 0 or points.features.shape[0] == 0:
        return []
    sim = cosine_similarity_matrix(grid.features, points.features)
    row_rank = _topk_rank(sim, axis=1)
    col_rank = _topk_rank(sim, axis=0)
    mutual = (row_rank < top_c) & (col_rank < top_c) & (sim >= s_min)
    pairs = [CoarseMatch(patch=int(i), superpoint=int(j),
                         similarity=float(sim[i, j]))
             for i, j in zip(*np.nonzero(mutual))]
    pairs.sort(key=lambda m: (-m.similarity, m.patch, m.superpoint))
    return pairs


def fine_match(coarse: list[CoarseMatch], pixel_groups: dict,
               point_groups: dict, s_fine: float = 0.0) -> FineMatches:
    """Mutual nearest neighbors inside each coarse pair's fine block.

    `pixel_groups[patch]` is (uv, features) for that patch's pixels and
    `point_groups[superpoint]` is (xyz, features) for the superpoint's
    member points. Duplicate pixels/points across blocks keep only their
    highest-similarity match.
    """
    candidates = []
    for match in coarse:
        if match.patch not in pixel_groups or match.superpoint not in point_groups:
            continue
        uv, pix_feats = pixel_groups[match.patch]
        xyz, pt_feats = point_groups[match.superpoint]
        if uv.shape[0] == 0 or xyz.shape[0] == 0:
            continue
        sim = cosine_similarity_matrix(pix_feats, pt_feats)
        best_col = np.argmax(sim, axis=1)
        best_row = np.argmax(sim, axis=0)
        for r in range(sim.shape[0]):
            c = best_col[r]
            if best_row[c] == r and sim[r, c] >= s_fine:
                candidates.append((float(sim[r, c]), tuple(uv[r]),
                                   tuple(xyz[c])))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_pixels: set = set()
    used_points: set = set()
    kept_uv, kept_xyz, kept_sim = [], [], []
    for sim_value, pix, pt in candidates:
        if pix in used_pixels or pt in used_points:
            continue
        used_pixels.add(pix)
        used_points.add(pt)
        kept_uv.append(pix)
        kept_xyz.append(pt)
        kept_sim.append(sim_value)
    if not kept_uv:
        return FineMatches.empty()
    return FineMatches(uv=np.array(kept_uv), xyz=np.array(kept_xyz),
                       similarity=np.array(kept_sim))


def write_correspondences_csv(path, corr: CorrespondenceSet,
                              grid: FeatureGrid | None = None,
                              points: PointFeatures | None = None) -> None:
    """Dump with columns u,v,x,y,z,similarity,level; coarse rows use the
    patch center and superpoint position as their coordinates."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["u", "v", "x", "y", "z", "similarity", "level"])
            if grid is not None and points is not None:
                for m in corr.coarse:
                    u, v = grid.patch_centers[m.patch]
                    x, y, z = points.positions[m.superpoint]
                    writer.writerow([f"{u:.17g}", f"{v:.17g}", f"{x:.17g}",
                                     f"{y:.17g}", f"{z:.17g}",
                                     f"{m.similarity:.17g}", "coarse"])
            for i in range(len(corr.fine)):
                u, v = corr.fine.uv[i]
                x, y, z = corr.fine.xyz[i]
                writer.writerow([f"{u:.17g}", f"{v:.17g}", f"{x:.17g}",
                                 f"{y:.17g}", f"{z:.17g}",
                                 f"{corr.fine.similarity[i]:.17g}", "fine"])
    except OSError as exc:
        raise DataError(f"cannot write correspondence dump {path}: {exc}") from exc
