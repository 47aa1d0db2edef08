import numpy as np
import pytest

from agentreg.agents import local_reward
from agentreg.errors import ConfigurationError, GenerationError
from agentreg.rng import Rng
from agentreg.synth import (
    SceneSpec, corrupt_correspondences, generate_pair,
    generate_planted_query_task, load_pair, save_pair,
)


def default_spec(**overrides):
    return SceneSpec(**overrides)


class TestGeneratePair:
    def test_ground_truth_reprojects_exactly(self):
        pair = generate_pair(default_spec(), Rng(0))
        from agentreg.pose import project
        uv, valid = project(pair.points_cloud, pair.t_gt, pair.spec.intrinsics)
        assert valid.all()
        np.testing.assert_allclose(uv, pair.fine_pixel_uv, atol=1e-9)

    def test_points_land_in_their_patch(self):
        pair = generate_pair(default_spec(), Rng(1))
        ps, gw = pair.spec.patch_size, pair.spec.grid_w
        for i, (u, v) in enumerate(pair.fine_pixel_uv):
            col = int(u // ps)
            row = int(v // ps)
            assert row * gw + col == pair.point_patch[i]

    def test_deterministic_given_seed(self, tmp_path):
        p1 = generate_pair(default_spec(), Rng(5))
        p2 = generate_pair(default_spec(), Rng(5))
        save_pair(tmp_path / "a", p1)
        save_pair(tmp_path / "b", p2)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_member_lists_partition_points(self):
        pair = generate_pair(default_spec(), Rng(2))
        seen = np.concatenate(pair.superpoint_members)
        assert len(seen) == pair.points_cloud.shape[0]
        assert len(np.unique(seen)) == len(seen)

    def test_noiseless_features_match_exactly_on_gt_pairs(self):
        pair = generate_pair(default_spec(sigma_feat=0.0), Rng(3))
        flat = pair.base_features.reshape(-1, pair.spec.feature_dim)
        sims = flat @ pair.superpoint_features.T
        norms = np.linalg.norm(flat, axis=1)[:, None] * \
            np.linalg.norm(pair.superpoint_features, axis=1)[None, :]
        sims = sims / np.where(norms == 0, 1.0, norms)
        # every gt coarse pair must be its superpoint's best patch
        for g, s in pair.gt_coarse:
            assert np.argmax(sims[:, s]) == g

    def test_repetition_degrades_raw_matching(self):
        # cloned patches differ only in their texture levels, so under
        # feature noise the matcher has less to work with
        def top1_accuracy(rep, seed):
            pair = generate_pair(default_spec(repetition=rep), Rng(seed))
            flat = pair.base_features.reshape(-1, pair.spec.feature_dim)
            sims = flat @ pair.superpoint_features.T
            hits = sum(int(np.argmax(sims[:, s]) == g) for g, s in pair.gt_coarse)
            return hits / len(pair.gt_coarse)

        clean = np.mean([top1_accuracy(0.0, s) for s in range(20)])
        cloned = np.mean([top1_accuracy(0.5, s) for s in range(20)])
        assert cloned < clean

    def test_masking_removes_patches(self):
        pair = generate_pair(default_spec(masked_fraction=0.25), Rng(4))
        assert pair.patch_occupied.sum() == 48
        assert not np.isin(pair.point_patch,
                           np.flatnonzero(~pair.patch_occupied)).any()

    def test_too_many_points_rejected(self):
        with pytest.raises(GenerationError):
            generate_pair(default_spec(n_points=64 * 17), Rng(0))

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            SceneSpec(repetition=1.5)
        with pytest.raises(ConfigurationError):
            SceneSpec(n_points=10)


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        pair = generate_pair(default_spec(masked_fraction=0.1), Rng(7))
        save_pair(tmp_path / "p", pair)
        back = load_pair(tmp_path / "p")
        np.testing.assert_array_equal(back.image, pair.image)
        np.testing.assert_array_equal(back.base_features, pair.base_features)
        np.testing.assert_array_equal(back.points_cloud, pair.points_cloud)
        np.testing.assert_array_equal(back.fine_pixel_uv, pair.fine_pixel_uv)
        np.testing.assert_array_equal(back.gt_coarse, pair.gt_coarse)
        np.testing.assert_array_equal(back.patch_occupied, pair.patch_occupied)
        np.testing.assert_allclose(back.t_gt.rotation, pair.t_gt.rotation)
        assert back.spec == pair.spec
        for a, b in zip(back.superpoint_members, pair.superpoint_members):
            np.testing.assert_array_equal(a, b)


class TestCorruption:
    def test_exact_outlier_count(self):
        pair = generate_pair(default_spec(), Rng(8))
        for frac in (0.0, 0.1, 0.3, 0.5):
            _, xyz, mask = corrupt_correspondences(
                pair.fine_pixel_uv, pair.points_cloud, frac, Rng(1))
            assert mask.sum() == round(frac * pair.points_cloud.shape[0])
            changed = np.any(xyz != pair.points_cloud, axis=1)
            np.testing.assert_array_equal(changed, mask)


class TestPlantedTask:
    def test_planted_rewards_high_noise_low(self):
        task = generate_planted_query_task(32, 12, 32, Rng(0))
        rewards = np.array([local_reward(q, task.f_i_pooled, task.f_p_pooled)
                            for q in task.queries])
        assert np.all(rewards[task.planted] >= 0.8)
        noise_idx = np.setdiff1d(np.arange(32), task.planted)
        assert np.mean(np.abs(rewards[noise_idx])) <= 0.2

    def test_all_planted_when_k_equals_m(self):
        task = generate_planted_query_task(8, 8, 16, Rng(1))
        np.testing.assert_array_equal(task.planted, np.arange(8))

    def test_reproducible(self):
        a = generate_planted_query_task(16, 4, 8, Rng(9))
        b = generate_planted_query_task(16, 4, 8, Rng(9))
        np.testing.assert_array_equal(a.queries, b.queries)
        np.testing.assert_array_equal(a.planted, b.planted)
