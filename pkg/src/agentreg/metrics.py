"""Registration quality metrics: IR, FMR, RR, and PIR.

Boundary rules follow the definitions strictly: feature matching recall
counts pairs with inlier ratio strictly above the threshold, registration
recall counts pairs with RMSE strictly below its threshold. Metrics over
empty inputs are 0 and carry an `empty` flag.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .matching import CoarseMatch, FeatureGrid, FineMatches, PointFeatures
from .pose import CameraIntrinsics, RigidTransform, project


@dataclass
class MetricOutcome:
    value: float
    empty: bool = False


@dataclass
class MetricReport:
    ir: float
    fmr: float
    rr: float
    pir: float
    per_pair: list[dict] = field(default_factory=list)


def inlier_ratio(fine: FineMatches, pixel_xyz_cam: dict, t_gt: RigidTransform,
                 threshold_m: float = 0.05) -> MetricOutcome:
    """Fraction of fine matches whose transformed point lies within
    `threshold_m` of the matched pixel's ground-truth 3D location."""
    if len(fine) == 0:
        return MetricOutcome(0.0, empty=True)
    transformed = t_gt.apply(fine.xyz)
    hits = 0
    for i in range(len(fine)):
        key = (float(fine.uv[i, 0]), float(fine.uv[i, 1]))
        if key not in pixel_xyz_cam:
            raise DataError(f"pixel {key} has no ground-truth 3D location")
        if np.linalg.norm(transformed[i] - pixel_xyz_cam[key]) < threshold_m:
            hits += 1
    return MetricOutcome(hits / len(fine))


def feature_matching_recall(per_pair_ir, tau: float = 0.10) -> MetricOutcome:
    """Fraction of pairs with inlier ratio strictly above tau."""
    values = list(per_pair_ir)
    if not values:
        return MetricOutcome(0.0, empty=True)
    return MetricOutcome(sum(1 for v in values if v > tau) / len(values))


def pair_rmse(t_est: RigidTransform, t_gt: RigidTransform,
              cloud: np.ndarray) -> float:
    d = t_est.apply(cloud) - t_gt.apply(cloud)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def registration_recall(estimates, ground_truths, clouds,
                        rmse_threshold: float = 0.10) -> tuple[MetricOutcome, list]:
    """Fraction of pairs with RMSE strictly below the threshold.

    A failed estimate (None) counts as not recalled. Returns the recall
    and the per-pair RMSE list (None where estimation failed).
    """
    if not ground_truths:
        return MetricOutcome(0.0, empty=True), []
    rmses = []
    recalled = 0
    for t_est, t_gt, cloud in zip(estimates, ground_truths, clouds):
        if t_est is None:
            rmses.append(None)
            continue
        value = pair_rmse(t_est, t_gt, cloud)
        rmses.append(value)
        if value < rmse_threshold:
            recalled += 1
    return MetricOutcome(recalled / len(ground_truths)), rmses


def patch_inlier_ratio(coarse: list[CoarseMatch], grid: FeatureGrid,
                       points: PointFeatures, fine_xyz_cloud: np.ndarray,
                       t_gt: RigidTransform, k: CameraIntrinsics,
                       overlap_threshold: float = 0.3) -> MetricOutcome:
    """Fraction of coarse pairs whose superpoint members project (under the
    ground-truth transform) inside the matched patch at a sufficient rate."""
    if not coarse:
        return MetricOutcome(0.0, empty=True)
    half = grid.patch_size / 2.0
    hits = 0
    for m in coarse:
        member_idx = points.members[m.superpoint]
        if len(member_idx) == 0:
            continue
        uv, valid = project(fine_xyz_cloud[member_idx], t_gt, k)
        cu, cv = grid.patch_centers[m.patch]
        inside = valid & (uv[:, 0] >= cu - half) & (uv[:, 0] < cu + half) & \
            (uv[:, 1] >= cv - half) & (uv[:, 1] < cv + half)
        if inside.sum() / len(member_idx) >= overlap_threshold:
            hits += 1
    return MetricOutcome(hits / len(coarse))


def write_metric_report(directory, per_pair: list[dict], summary: dict,
                        scene: str = "synthetic") -> None:
    """Emit report.csv (one row per pair plus a summary row) and a JSON
    summary keyed by scene."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        columns = ["pair", "ir", "rmse", "recalled", "pir",
                   "n_coarse", "n_fine", "pose_failed"]
        with (directory / "report.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in per_pair:
                writer.writerow([row.get(c, "") for c in columns])
            writer.writerow(["summary", summary["ir"], "", summary["rr"],
                             summary["pir"], "", "", ""])
        payload = {"scenes": {scene: summary}, "mean": summary}
        (directory / "summary.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write metric report in {directory}: {exc}") from exc
