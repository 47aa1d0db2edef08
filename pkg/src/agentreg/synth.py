"""Synthetic scenes with exact ground truth, plus the planted-query task.

A scene couples an image patch grid with a point cloud through shared
per-patch latents split into two parts: a *structure* latent that both
modalities' coarse features read (through partially aligned mixing
matrices), and a 3-channel *texture* level that only the point features
and the rendered image carry; the image shows each patch as its texture
levels over a shared high-frequency pattern. Repetition clones the
structure latent across patches while leaving their textures distinct, so
cloned patches are indistinguishable to the plain feature pathway but
separable through image content, which is exactly what the phase pathway
can recover. Masking empties patches (non-overlapping content) and
independent Gaussian noise degrades both feature sides. The mixing
matrices are a deterministic function of the scene seed, so every pair in
a dataset lives in the same feature "world" and matching is learnable.

Ground truth is exact by construction: fine correspondences reproject with
zero pixel error under the generated cloud-to-camera transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, GenerationError
from .pose import CameraIntrinsics, RigidTransform, random_rotation
from .rng import Rng
from .tensorio import load_tensor, save_tensor


@dataclass
class SceneSpec:
    n_points: int = 256
    grid_h: int = 8
    grid_w: int = 8
    patch_size: int = 4
    fx: float = 40.0
    fy: float = 40.0
    cx: float = 16.0
    cy: float = 16.0
    z_near: float = 1.0
    z_far: float = 2.5
    max_rotation_deg: float = 45.0
    max_translation: float = 1.0
    feature_dim: int = 32
    fine_dim: int = 8
    latent_dim: int = 16
    sigma_feat: float = 0.1
    repetition: float = 0.0
    masked_fraction: float = 0.0
    outlier_fraction: float = 0.0
    modality_alignment: float = 0.75  # shared fraction of the two feature mixers
    texture_gain: float = 1.2        # weight of texture levels in coarse features
    voxel_size: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("repetition", "masked_fraction", "outlier_fraction",
                     "modality_alignment"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must be a fraction, got {value}")
        if self.n_points < self.patch_count:
            raise ConfigurationError("need at least one point per patch")
        if self.z_near <= 0 or self.z_far <= self.z_near:
            raise ConfigurationError("require 0 < z_near < z_far")

    @property
    def patch_count(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.grid_h * self.patch_size, self.grid_w * self.patch_size

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy)


@dataclass
class SyntheticPair:
    """One image/point-cloud pair with full ground truth."""

    spec: SceneSpec
    image: np.ndarray                 # (H, W, 3)
    base_features: np.ndarray         # (grid_h, grid_w, C)
    patch_centers: np.ndarray         # (P_i, 2) pixel centers, row-major patches
    patch_xyz_cam: np.ndarray         # (P_i, 3) cluster centroid, camera frame
    patch_occupied: np.ndarray        # (P_i,) bool
    points_cloud: np.ndarray          # (N, 3) cloud frame
    point_patch: np.ndarray           # (N,) owning patch index
    fine_pixel_uv: np.ndarray         # (N, 2) exact projections under t_gt
    fine_pixel_features: np.ndarray   # (N, fine_dim) image side
    fine_point_features: np.ndarray   # (N, fine_dim) cloud side
    superpoint_positions: np.ndarray  # (P_p, 3) cloud frame
    superpoint_features: np.ndarray   # (P_p, C)
    superpoint_members: list          # P_p arrays of point indices
    gt_coarse: np.ndarray             # (n_gt, 2) (patch_idx, superpoint_idx)
    t_gt: RigidTransform              # cloud -> camera

    @property
    def points_cam(self) -> np.ndarray:
        return self.t_gt.apply(self.points_cloud)

    def pixel_xyz_cam(self) -> dict:
        """Camera-frame ground-truth 3D location keyed by exact pixel uv."""
        cam = self.points_cam
        return {(float(u), float(v)): cam[i]
                for i, (u, v) in enumerate(self.fine_pixel_uv)}


def _mixers(spec: SceneSpec) -> dict:
    rng = Rng(spec.seed).derive(0xA11)
    ps = spec.patch_size
    rho = spec.modality_alignment
    w_base = rng.normal(0.0, 1.0, (spec.feature_dim, spec.latent_dim))
    w_indep = rng.normal(0.0, 1.0, (spec.feature_dim, spec.latent_dim))
    w_point = rho * w_base + (1 - rho) * w_indep
    w_base_t = rng.normal(0.0, 1.0, (spec.feature_dim, 3))
    w_indep_t = rng.normal(0.0, 1.0, (spec.feature_dim, 3))
    w_point_t = rho * w_base_t + (1 - rho) * w_indep_t
    w_fine = rng.normal(0.0, 1.0, (spec.fine_dim, spec.fine_dim))
    pattern = rng.normal(0.0, 1.0, (ps, ps, 3))
    scale = 1.0 / np.sqrt(spec.latent_dim)
    t_scale = spec.texture_gain / np.sqrt(3.0)
    return {"base": w_base * scale, "point": w_point * scale,
            "base_t": w_base_t * t_scale, "point_t": w_point_t * t_scale,
            "fine": w_fine / np.sqrt(spec.fine_dim),
            "pattern": pattern}


def _voxel_superpoints(points: np.ndarray, voxel: float):
    keys = np.floor(points / voxel).astype(np.int64)
    uniq, first_index = np.unique(keys, axis=0, return_index=True)
    # order voxels by first point appearance so the layout is deterministic
    order = np.argsort(first_index)
    centroids = []
    for row in uniq[order]:
        inside = np.all(keys == row, axis=1)
        centroids.append(points[inside].mean(axis=0))
    centroids = np.array(centroids)
    d = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    assign = np.argmin(d, axis=1)
    members = [np.flatnonzero(assign == s) for s in range(len(centroids))]
    return centroids, members


def generate_pair(spec: SceneSpec, rng: Rng) -> SyntheticPair:
    """Sample one pair; identical (spec, rng) streams replay identically."""
    mix = _mixers(spec)
    ps = spec.patch_size
    gh, gw = spec.grid_h, spec.grid_w
    n_patches = spec.patch_count
    k = spec.intrinsics

    n_masked = round(spec.masked_fraction * n_patches)
    occupied = np.ones(n_patches, dtype=bool)
    if n_masked:
        occupied[rng.choice(n_patches, size=n_masked)] = False
    occ_idx = np.flatnonzero(occupied)
    if occ_idx.size == 0:
        raise GenerationError("every patch is masked; nothing to generate")

    latents = rng.normal(0.0, 1.0, (n_patches, spec.latent_dim))
    textures = rng.normal(0.0, 1.0, (n_patches, 3))
    # repetition clones the structure latent only: cloned patches look alike
    # to the coarse feature pathway but keep their own image texture
    n_clone = round(spec.repetition * occ_idx.size)
    if n_clone and occ_idx.size >= 2:
        targets = occ_idx[rng.choice(occ_idx.size, size=n_clone)]
        for tgt in targets:
            donor = tgt
            while donor == tgt:
                donor = occ_idx[int(rng.integers(0, occ_idx.size))]
            latents[tgt] = latents[donor]

    # points per occupied patch, remainder spread from the front
    per_patch = np.full(occ_idx.size, spec.n_points // occ_idx.size)
    per_patch[: spec.n_points % occ_idx.size] += 1
    if per_patch.max() > ps * ps:
        raise GenerationError(
            f"{per_patch.max()} points per patch exceeds the {ps * ps} "
            "distinct pixels available")

    uv_list, cam_list, patch_of_point = [], [], []
    patch_xyz = np.zeros((n_patches, 3))
    for slot, g in enumerate(occ_idx):
        row, col = divmod(int(g), gw)
        n_g = int(per_patch[slot])
        cells = rng.choice(ps * ps, size=n_g)
        du, dv = cells % ps, cells // ps
        u = col * ps + du + 0.5
        v = row * ps + dv + 0.5
        z_patch = rng.uniform(spec.z_near + 0.05, spec.z_far - 0.05)
        z = z_patch + rng.uniform(-0.05, 0.05, n_g)
        x = (u - k.cx) * z / k.fx
        y = (v - k.cy) * z / k.fy
        cam = np.stack([x, y, z], axis=1)
        uv_list.append(np.stack([u, v], axis=1))
        cam_list.append(cam)
        patch_of_point.extend([int(g)] * n_g)
        patch_xyz[g] = cam.mean(axis=0)

    uv = np.vstack(uv_list)
    points_cam = np.vstack(cam_list)
    point_patch = np.array(patch_of_point, dtype=np.int64)

    rot = random_rotation(np.deg2rad(spec.max_rotation_deg), rng)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t_gt = RigidTransform(rotation=rot,
                          translation=rng.uniform(0.0, spec.max_translation) * direction)
    points_cloud = t_gt.inverse().apply(points_cam)

    sp_pos, sp_members = _voxel_superpoints(points_cloud, spec.voxel_size)

    # modality features from the shared latents
    noise = rng.derive(1)
    base = (latents @ mix["base"].T + textures @ mix["base_t"].T)
    base = base.reshape(gh, gw, spec.feature_dim)
    base = base + spec.sigma_feat * noise.normal(size=base.shape)

    sp_feats = np.zeros((len(sp_pos), spec.feature_dim))
    gt_pairs = []
    for s, members in enumerate(sp_members):
        if members.size == 0:
            continue  # reassignment emptied this voxel; no feature, no pair
        owners = point_patch[members]
        counts = np.bincount(owners, minlength=n_patches)
        majority = int(np.argmax(counts))
        sp_feats[s] = mix["point"] @ latents[majority] + \
            mix["point_t"] @ textures[majority]
        gt_pairs.append((majority, s))
    sp_feats = sp_feats + spec.sigma_feat * noise.normal(size=sp_feats.shape)

    fine_latents = rng.derive(2).normal(size=(uv.shape[0], spec.fine_dim))
    fine_noise = rng.derive(3)
    fine_pix = fine_latents @ mix["fine"].T
    fine_pix = fine_pix + 0.5 * spec.sigma_feat * fine_noise.normal(size=fine_pix.shape)
    fine_pt = fine_latents @ mix["fine"].T
    fine_pt = fine_pt + 0.5 * spec.sigma_feat * fine_noise.normal(size=fine_pt.shape)

    image = np.zeros((gh * ps, gw * ps, 3))
    for g in range(n_patches):
        row, col = divmod(g, gw)
        block = textures[g][None, None, :] + 0.3 * mix["pattern"]
        image[row * ps:(row + 1) * ps, col * ps:(col + 1) * ps] = block
    image += 2.0  # keep channels away from the all-zero degenerate case

    centers = np.array([[(g % gw) * ps + ps / 2.0, (g // gw) * ps + ps / 2.0]
                        for g in range(n_patches)])

    return SyntheticPair(
        spec=spec, image=image, base_features=base, patch_centers=centers,
        patch_xyz_cam=patch_xyz, patch_occupied=occupied,
        points_cloud=points_cloud, point_patch=point_patch,
        fine_pixel_uv=uv, fine_pixel_features=fine_pix,
        fine_point_features=fine_pt, superpoint_positions=sp_pos,
        superpoint_features=sp_feats, superpoint_members=sp_members,
        gt_coarse=np.array(gt_pairs, dtype=np.int64).reshape(-1, 2), t_gt=t_gt)


def corrupt_correspondences(uv: np.ndarray, xyz: np.ndarray, fraction: float,
                            rng: Rng):
    """Replace exactly round(fraction * n) point targets with wrong points.

    Returns (uv, corrupted xyz, outlier mask).
    """
    n = uv.shape[0]
    n_out = round(fraction * n)
    out = np.zeros(n, dtype=bool)
    pristine = np.asarray(xyz)
    xyz = pristine.copy()
    if n_out:
        victims = rng.choice(n, size=n_out)
        for v in victims:
            other = v
            while other == v:
                other = int(rng.integers(0, n))
            xyz[v] = pristine[other]
        out[victims] = True
    return uv, xyz, out


# --- planted-query selection task -------------------------------------------

@dataclass
class PlantedQueryTask:
    queries: np.ndarray          # (M, C)
    f_i_pooled: np.ndarray       # (C,)
    f_p_pooled: np.ndarray       # (C,)
    planted: np.ndarray          # (k,) informative query indices


def generate_planted_query_task(m: int, k: int, c: int, rng: Rng,
                                max_tilt_deg: float = 20.0) -> PlantedQueryTask:
    """Pool of M query directions of which k are informative.

    The pooled modality features share a k-dimensional subspace; the k
    planted queries sit within `max_tilt_deg` of the bisector of the two
    features inside that subspace, which pins their local reward above 0.8
    by construction. The remaining queries are isotropic noise, whose
    expected reward magnitude is O(1/sqrt(C)).
    """
    if k > m:
        raise ConfigurationError(f"cannot plant {k} queries in a pool of {m}")

    def unit(v):
        return v / np.linalg.norm(v)

    basis, _ = np.linalg.qr(rng.normal(size=(c, k)))
    anchor = unit(rng.normal(size=k))
    f_i = basis @ unit(anchor + 0.15 * unit(rng.normal(size=k)))
    f_p = basis @ unit(anchor + 0.15 * unit(rng.normal(size=k)))
    mid = unit(unit(f_i) + unit(f_p))

    planted = np.sort(rng.choice(m, size=k))
    queries = rng.normal(size=(m, c))
    for j in planted:
        theta = rng.uniform(0.0, np.deg2rad(max_tilt_deg))
        tangent = basis @ rng.normal(size=k)
        tangent = unit(tangent - (tangent @ mid) * mid)
        queries[j] = np.cos(theta) * mid + np.sin(theta) * tangent
    return PlantedQueryTask(queries=queries, f_i_pooled=f_i, f_p_pooled=f_p,
                            planted=planted)


# --- on-disk dataset layout --------------------------------------------------

_SPEC_FIELDS = [f for f in SceneSpec.__dataclass_fields__]


def save_pair(directory, pair: SyntheticPair) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create pair directory {directory}: {exc}") from exc
    save_tensor(directory / "image.a2si", pair.image)
    save_tensor(directory / "base_features.a2si", pair.base_features)
    save_tensor(directory / "patch_xyz.a2si", pair.patch_xyz_cam)
    save_tensor(directory / "patch_occupied.a2si", pair.patch_occupied.astype(float))
    save_tensor(directory / "point_patch.a2si", pair.point_patch.astype(float))
    save_tensor(directory / "fine_pixel_uv.a2si", pair.fine_pixel_uv)
    save_tensor(directory / "fine_pixel_features.a2si", pair.fine_pixel_features)
    save_tensor(directory / "fine_point_features.a2si", pair.fine_point_features)
    save_tensor(directory / "superpoint_positions.a2si", pair.superpoint_positions)
    save_tensor(directory / "superpoint_features.a2si", pair.superpoint_features)
    (directory / "points.xyz").write_text(
        "".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pair.points_cloud))
    (directory / "gt.traj").write_text(pair.t_gt.as_line() + "\n")
    (directory / "members.txt").write_text(
        "".join(" ".join(str(i) for i in m) + "\n" for m in pair.superpoint_members))
    (directory / "gt_coarse.txt").write_text(
        "".join(f"{p} {s}\n" for p, s in pair.gt_coarse))
    manifest = [f"{name} {getattr(pair.spec, name)}" for name in _SPEC_FIELDS]
    (directory / "manifest.txt").write_text("\n".join(manifest) + "\n")


def _parse_spec(text: str) -> SceneSpec:
    kwargs = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        name, value = line.split(" ", 1)
        if name not in _SPEC_FIELDS:
            raise DataError(f"unknown scene manifest key {name!r}")
        target = SceneSpec.__dataclass_fields__[name].type
        kwargs[name] = int(value) if target == "int" else float(value)
    return SceneSpec(**kwargs)


def load_pair(directory) -> SyntheticPair:
    directory = Path(directory)
    try:
        spec = _parse_spec((directory / "manifest.txt").read_text())
        points = np.array([[float(t) for t in line.split()]
                           for line in (directory / "points.xyz").read_text().splitlines()
                           if line.strip()])
        t_gt = RigidTransform.from_line((directory / "gt.traj").read_text().strip())
        members = [np.array([int(t) for t in line.split()], dtype=np.int64)
                   for line in (directory / "members.txt").read_text().splitlines()]
        gt_coarse = np.array([[int(t) for t in line.split()]
                              for line in (directory / "gt_coarse.txt").read_text().splitlines()],
                             dtype=np.int64).reshape(-1, 2)
    except OSError as exc:
        raise DataError(f"cannot read pair directory {directory}: {exc}") from exc

    ps = spec.patch_size
    gw = spec.grid_w
    centers = np.array([[(g % gw) * ps + ps / 2.0, (g // gw) * ps + ps / 2.0]
                        for g in range(spec.patch_count)])
    return SyntheticPair(
        spec=spec,
        image=load_tensor(directory / "image.a2si"),
        base_features=load_tensor(directory / "base_features.a2si"),
        patch_centers=centers,
        patch_xyz_cam=load_tensor(directory / "patch_xyz.a2si"),
        patch_occupied=load_tensor(directory / "patch_occupied.a2si") > 0.5,
        points_cloud=points,
        point_patch=load_tensor(directory / "point_patch.a2si").astype(np.int64),
        fine_pixel_uv=load_tensor(directory / "fine_pixel_uv.a2si"),
        fine_pixel_features=load_tensor(directory / "fine_pixel_features.a2si"),
        fine_point_features=load_tensor(directory / "fine_point_features.a2si"),
        superpoint_positions=load_tensor(directory / "superpoint_positions.a2si"),
        superpoint_features=load_tensor(directory / "superpoint_features.a2si"),
        superpoint_members=members,
        gt_coarse=gt_coarse,
        t_gt=t_gt)
