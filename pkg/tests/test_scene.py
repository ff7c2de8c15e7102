"""Synthetic-scene oracle: determinism, visibility, noise statistics."""

import numpy as np
import pytest

from semidense.errors import VisibilityError
from semidense.geometry import triangulate
from semidense.scene import (
    FINE_WINDOW_HALF,
    GRID_STRIDE,
    NoiseModel,
    SyntheticScene,
    generate_scene,
    grid_cell_center,
    oracle_fine_location,
    render_observations,
)

ZERO = NoiseModel()


class TestGenerateScene:
    def test_bit_exact_determinism(self):
        a = generate_scene(1, 100, 10, ZERO)
        b = generate_scene(1, 100, 10, ZERO)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.desc_coarse, b.desc_coarse)
        assert np.array_equal(a.desc_fine, b.desc_fine)
        for (pa, _), (pb, _) in zip(a.views, b.views):
            assert np.array_equal(pa.rotation, pb.rotation)
            assert np.array_equal(pa.translation, pb.translation)

    def test_different_seeds_differ(self):
        a = generate_scene(1, 100, 10, ZERO)
        b = generate_scene(2, 100, 10, ZERO)
        assert not np.array_equal(a.points, b.points)

    def test_points_inside_unit_box(self):
        scene = generate_scene(3, 500, 5, ZERO)
        assert np.abs(scene.points).max() <= 0.5 + 1e-12

    def test_descriptors_unit_norm(self):
        scene = generate_scene(4, 64, 4, ZERO)
        np.testing.assert_allclose(np.linalg.norm(scene.desc_coarse, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(scene.desc_fine, axis=1), 1.0, atol=1e-6)

    def test_every_point_visible_twice(self):
        scene = generate_scene(5, 200, 8, ZERO)
        counts = np.zeros(scene.n_points, dtype=int)
        for v in range(scene.n_views):
            counts += render_observations(scene, v).visible_mask
        assert counts.min() >= 2

    def test_camera_distance_range(self):
        dists = []
        for seed in range(100):
            scene = generate_scene(seed, 8, 4, ZERO)
            dists.extend(
                np.linalg.norm(pose.camera_center) for pose, _ in scene.views
            )
        dists = np.array(dists)
        assert dists.min() >= 3.0 - 1e-9 and dists.max() <= 5.0 + 1e-9
        assert 3.0 < dists.mean() < 5.0

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            generate_scene(1, 4, 10, ZERO)
        with pytest.raises(ValueError):
            generate_scene(1, 100, 1, ZERO)
        with pytest.raises(ValueError):
            NoiseModel(dropout_rate=1.0)
        with pytest.raises(ValueError):
            NoiseModel(fine_noise_sigma=-0.1)


class TestRenderObservations:
    def test_zero_noise_descriptors_exact(self):
        scene = generate_scene(7, 120, 6, ZERO)
        obs = render_observations(scene, 0)
        np.testing.assert_array_equal(obs.desc_coarse, scene.desc_coarse[obs.point_ids])
        np.testing.assert_array_equal(obs.desc_fine, scene.desc_fine[obs.point_ids])

    def test_determinism(self):
        scene = generate_scene(8, 100, 5, NoiseModel(descriptor_noise_sigma=0.2, dropout_rate=0.1))
        a = render_observations(scene, 2)
        b = render_observations(scene, 2)
        assert np.array_equal(a.point_ids, b.point_ids)
        assert np.array_equal(a.desc_coarse, b.desc_coarse)

    def test_pixels_inside_bounds(self):
        scene = generate_scene(9, 300, 8, ZERO)
        for v in range(scene.n_views):
            obs = render_observations(scene, v)
            _, intr = scene.views[v]
            assert np.all(obs.pixels >= 0)
            assert np.all(obs.pixels[:, 0] < intr.width)
            assert np.all(obs.pixels[:, 1] < intr.height)

    def test_cells_are_quantized_pixels(self):
        scene = generate_scene(10, 150, 4, ZERO)
        obs = render_observations(scene, 1)
        np.testing.assert_array_equal(obs.cells, grid_cell_center(obs.pixels))
        # cell centers are congruent to stride/2 mod stride
        assert np.all(np.mod(obs.cells, GRID_STRIDE) == GRID_STRIDE / 2.0)

    def test_dropout_rate_monte_carlo(self):
        fractions = []
        for seed in range(100):
            noisy = generate_scene(seed, 1000, 2, NoiseModel(dropout_rate=0.3))
            clean = generate_scene(seed, 1000, 2, ZERO)
            n_vis = render_observations(noisy, 0).visible_mask.sum()
            n_frustum = render_observations(clean, 0).visible_mask.sum()
            fractions.append(n_vis / n_frustum)
        assert abs(np.mean(fractions) - 0.7) < 0.02

    def test_cell_winner_unique_and_front_most(self):
        scene = generate_scene(11, 400, 4, ZERO)
        obs = render_observations(scene, 0)
        pose, _ = scene.views[0]
        depths = pose.transform(scene.points[obs.point_ids])[:, 2]
        seen = {}
        for row in np.flatnonzero(obs.cell_winner):
            key = (obs.cells[row, 0], obs.cells[row, 1])
            assert key not in seen
            seen[key] = row
        # every observation's cell has exactly one winner, and none is nearer
        for row in range(len(obs.point_ids)):
            key = (obs.cells[row, 0], obs.cells[row, 1])
            w = seen[key]
            assert depths[w] <= depths[row]


class TestOracleFineLocation:
    def test_zero_noise_is_exact_projection(self):
        scene = generate_scene(12, 50, 4, ZERO)
        obs = render_observations(scene, 0)
        pid = int(obs.point_ids[0])
        loc = oracle_fine_location(scene, 0, pid)
        np.testing.assert_allclose(loc, obs.pixels[0], atol=1e-12)

    def test_repeated_calls_identical(self):
        scene = generate_scene(13, 50, 4, NoiseModel(fine_noise_sigma=0.5))
        obs = render_observations(scene, 1)
        pid = int(obs.point_ids[3])
        a = oracle_fine_location(scene, 1, pid)
        b = oracle_fine_location(scene, 1, pid)
        assert np.array_equal(a, b)

    def test_invisible_point_raises(self):
        # narrow field of view so parts of the object leave some frames
        scene = generate_scene(14, 64, 8, ZERO, focal=1200.0)
        for v in range(scene.n_views):
            vis = render_observations(scene, v).visible_mask
            hidden = np.flatnonzero(~vis)
            if hidden.size:
                with pytest.raises(VisibilityError):
                    oracle_fine_location(scene, v, int(hidden[0]))
                return
        raise AssertionError("expected at least one culled point with f=1200")

    def test_noise_std_monte_carlo(self):
        scene = generate_scene(15, 1000, 10, NoiseModel(fine_noise_sigma=0.5))
        errs = []
        for v in range(scene.n_views):
            obs = render_observations(scene, v)
            for row, pid in enumerate(obs.point_ids):
                loc = oracle_fine_location(scene, v, int(pid))
                errs.append(loc - obs.pixels[row])
        errs = np.array(errs)
        assert errs.shape[0] >= 10_000
        for axis in range(2):
            assert 0.45 <= errs[:, axis].std() <= 0.55

    def test_clamped_to_window(self):
        scene = generate_scene(16, 200, 4, NoiseModel(fine_noise_sigma=3.0))
        obs = render_observations(scene, 0)
        for row, pid in enumerate(obs.point_ids[:100]):
            loc = oracle_fine_location(scene, 0, int(pid))
            assert np.max(np.abs(loc - obs.cells[row])) <= FINE_WINDOW_HALF + 1e-12


class TestZeroNoiseComposition:
    def _tracks_by_point(self, scene: SyntheticScene):
        per_point = {}
        for v in range(scene.n_views):
            obs = render_observations(scene, v)
            for row, pid in enumerate(obs.point_ids):
                per_point.setdefault(int(pid), []).append((v, row, obs))
        return per_point

    def test_quantized_triangulation_within_grid_bound(self):
        scene = generate_scene(17, 100, 8, ZERO)
        for pid, nodes in self._tracks_by_point(scene).items():
            if len(nodes) < 2:
                continue
            obs_list = [
                (scene.views[v][0], scene.views[v][1], obs.cells[row])
                for v, row, obs in nodes
            ]
            point = triangulate(obs_list)
            depth = max(
                scene.views[v][0].transform(scene.points[pid])[2] for v, _, _ in nodes
            )
            bound = GRID_STRIDE / scene.views[0][1].fx * depth * np.sqrt(2.0)
            assert np.linalg.norm(point - scene.points[pid]) <= bound

    def test_oracle_fine_triangulation_recovers_exactly(self):
        scene = generate_scene(18, 60, 6, ZERO)
        for pid, nodes in self._tracks_by_point(scene).items():
            if len(nodes) < 2:
                continue
            obs_list = [
                (
                    scene.views[v][0],
                    scene.views[v][1],
                    oracle_fine_location(scene, v, pid),
                )
                for v, _, _ in nodes
            ]
            point = triangulate(obs_list)
            assert np.linalg.norm(point - scene.points[pid]) < 1e-9
