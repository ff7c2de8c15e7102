"""Deterministic synthetic-scene oracle standing in for real images and a learned matcher.

Generates ground-truth 3D points on a blobby surface, cameras on a viewing
hemisphere, per-point unit descriptors shared across views, and noisy
per-view observations quantized to the stride-8 coarse grid.

All randomness is keyed through numpy SeedSequence lists
(seed, stream, view_id[, point_id]) so every quantity is reproducible
bit-exactly and independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import VisibilityError
from .geometry import (
    MIN_DEPTH,
    CameraIntrinsics,
    SE3Pose,
    project_with_depth,
    rotation_from_axis_angle,
)

# Coarse-level grid stride in pixels (1/8 resolution matching level).
GRID_STRIDE = 8
# Half-extent of the 9x9 sub-pixel refinement window around a grid-cell center.
FINE_WINDOW_HALF = 4

# RNG stream tags
_STREAM_POINTS = 1
_STREAM_CAMERAS = 2
_STREAM_DESC_COARSE = 3
_STREAM_DESC_FINE = 4
_STREAM_DROPOUT = 10
_STREAM_DESC_NOISE = 11
_STREAM_FINE_NOISE = 12


def grid_cell_center(pixels: np.ndarray) -> np.ndarray:
    """Center of the stride-8 grid cell containing each pixel."""
    p = np.asarray(pixels, dtype=float)
    return np.floor(p / GRID_STRIDE) * GRID_STRIDE + GRID_STRIDE / 2.0


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


@dataclass(frozen=True)
class NoiseModel:
    """Observation noise: sub-pixel jitter, descriptor noise, dropout, outliers."""

    fine_noise_sigma: float = 0.0
    descriptor_noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    outlier_rate: float = 0.0

    def __post_init__(self):
        if self.fine_noise_sigma < 0 or self.descriptor_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not (0 <= self.dropout_rate < 1):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not (0 <= self.outlier_rate < 1):
            raise ValueError(f"outlier_rate must be in [0, 1), got {self.outlier_rate}")

    def to_dict(self) -> dict:
        return {
            "fine_noise_sigma": self.fine_noise_sigma,
            "descriptor_noise_sigma": self.descriptor_noise_sigma,
            "dropout_rate": self.dropout_rate,
            "outlier_rate": self.outlier_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """Ground-truth points, descriptors, cameras, and the noise model."""

    points: np.ndarray            # (N, 3), inside the unit-diameter box
    desc_coarse: np.ndarray       # (N, C_c) unit rows
    desc_fine: np.ndarray         # (N, C_f) unit rows
    views: list[tuple[SE3Pose, CameraIntrinsics]]
    noise: NoiseModel
    seed: int
    diameter: float = 1.0

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)


@dataclass(frozen=True, eq=False)
class ViewObservations:
    """Everything one view sees: true pixels, grid cells, noisy descriptors.

    Rows cover visible points in ascending point-id order. `cell_winner`
    marks the front-most point of each occupied grid cell: only winners are
    observable at the coarse level (one descriptor patch per cell).
    """

    view_id: int
    point_ids: np.ndarray         # (M,) int
    pixels: np.ndarray            # (M, 2) true sub-pixel projections
    cells: np.ndarray             # (M, 2) stride-8 cell centers
    desc_coarse: np.ndarray       # (M, C_c) noisy unit rows
    desc_fine: np.ndarray         # (M, C_f)
    cell_winner: np.ndarray       # (M,) bool
    visible_mask: np.ndarray      # (N,) bool over all scene points
    _cell_to_row: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        lookup = {}
        for row in np.flatnonzero(self.cell_winner):
            key = (int(self.cells[row, 0]), int(self.cells[row, 1]))
            lookup[key] = int(row)
        object.__setattr__(self, "_cell_to_row", lookup)

    def winner_row_for_cell(self, cell) -> int | None:
        """Row index of the cell-winning observation, or None for empty cells."""
        return self._cell_to_row.get((int(cell[0]), int(cell[1])))

    def winner_point_for_cell(self, cell) -> int | None:
        row = self.winner_row_for_cell(cell)
        return None if row is None else int(self.point_ids[row])


def _sample_blob_points(rng: np.random.Generator, n_points: int) -> np.ndarray:
    """Union of 3 random ellipsoid shells, scaled into the unit-diameter box."""
    centers = rng.uniform(-0.12, 0.12, size=(3, 3))
    semi_axes = rng.uniform(0.08, 0.28, size=(3, 3))
    rotations = []
    for _ in range(3):
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        q = q @ np.diag(np.sign(np.diag(r)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        rotations.append(q)

    which = rng.integers(0, 3, size=n_points)
    dirs = _unit_rows(rng.standard_normal((n_points, 3)))
    pts = np.empty((n_points, 3))
    for e in range(3):
        m = which == e
        pts[m] = centers[e] + (dirs[m] * semi_axes[e]) @ rotations[e].T

    # scale so the surface touches the unit-diameter sphere exactly
    pts *= 0.5 / np.linalg.norm(pts, axis=1).max()
    return pts


def _hemisphere_camera(
    rng: np.random.Generator,
    distance_range: tuple[float, float],
    jitter_deg: float,
) -> SE3Pose:
    """One camera on the viewing hemisphere, looking at the origin with jitter."""
    z = rng.uniform(0.1, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    r_xy = np.sqrt(1.0 - z * z)
    direction = np.array([r_xy * np.cos(phi), r_xy * np.sin(phi), z])
    dist = rng.uniform(*distance_range)
    pos = direction * dist

    fwd = -direction  # toward the origin
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, fwd)
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd])

    axis = _unit_rows(rng.standard_normal(3)[None])[0]
    angle = np.radians(rng.uniform(0.0, jitter_deg))
    R = rotation_from_axis_angle(axis, angle) @ R
    return SE3Pose(R, -R @ pos)


def generate_scene(
    seed: int,
    n_points: int,
    n_views: int,
    noise: NoiseModel,
    *,
    coarse_dim: int = 32,
    fine_dim: int = 32,
    image_size: int = 512,
    focal: float = 640.0,
    distance_range: tuple[float, float] = (3.0, 5.0),
    jitter_deg: float = 10.0,
) -> SyntheticScene:
    """Deterministically build a scene; bit-identical for identical arguments.

    Cameras sit on a hemisphere at 3-5 object diameters (configurable) and
    look at the object center with bounded jitter. Raises if any point ends
    up geometrically visible in fewer than 2 views.
    """
    if n_points < 8:
        raise ValueError(f"need at least 8 points, got {n_points}")
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")

    points = _sample_blob_points(np.random.default_rng([seed, _STREAM_POINTS]), n_points)

    intr = CameraIntrinsics(
        fx=focal, fy=focal, cx=image_size / 2.0, cy=image_size / 2.0,
        width=image_size, height=image_size,
    )
    cam_rng = np.random.default_rng([seed, _STREAM_CAMERAS])
    views = [(_hemisphere_camera(cam_rng, distance_range, jitter_deg), intr) for _ in range(n_views)]

    desc_coarse = _unit_rows(
        np.random.default_rng([seed, _STREAM_DESC_COARSE]).standard_normal((n_points, coarse_dim))
    )
    desc_fine = _unit_rows(
        np.random.default_rng([seed, _STREAM_DESC_FINE]).standard_normal((n_points, fine_dim))
    )

    scene = SyntheticScene(
        points=points,
        desc_coarse=desc_coarse,
        desc_fine=desc_fine,
        views=views,
        noise=noise,
        seed=seed,
    )

    visible_counts = np.zeros(n_points, dtype=int)
    for pose, k in views:
        pix, z = project_with_depth(pose, k, points)
        ok = (z > MIN_DEPTH) & np.all(np.isfinite(pix), axis=1)
        ok[ok] &= k.contains(pix[ok])
        visible_counts += ok
    if visible_counts.min() < 2:
        raise ValueError(
            "scene has points visible in fewer than 2 views; "
            "widen the field of view or reduce jitter"
        )
    return scene


def render_observations(scene: SyntheticScene, view_id: int) -> ViewObservations:
    """Project all points into one view with frustum culling, dropout, and noise."""
    if not 0 <= view_id < scene.n_views:
        raise ValueError(f"view_id {view_id} out of range")
    pose, intr = scene.views[view_id]
    pix, z = project_with_depth(pose, intr, scene.points)
    in_frustum = (z > MIN_DEPTH) & np.all(np.isfinite(pix), axis=1)
    in_frustum[in_frustum] &= intr.contains(pix[in_frustum])

    drop_rng = np.random.default_rng([scene.seed, _STREAM_DROPOUT, view_id])
    dropped = drop_rng.uniform(size=scene.n_points) < scene.noise.dropout_rate
    visible = in_frustum & ~dropped

    sigma = scene.noise.descriptor_noise_sigma
    if sigma > 0:
        noise_rng = np.random.default_rng([scene.seed, _STREAM_DESC_NOISE, view_id])
        nc = noise_rng.standard_normal(scene.desc_coarse.shape)
        nf = noise_rng.standard_normal(scene.desc_fine.shape)
        obs_coarse = _unit_rows(scene.desc_coarse + sigma * nc)
        obs_fine = _unit_rows(scene.desc_fine + sigma * nf)
    else:
        obs_coarse = scene.desc_coarse
        obs_fine = scene.desc_fine

    ids = np.flatnonzero(visible)
    pixels = pix[ids]
    cells = grid_cell_center(pixels)
    depths = z[ids]

    # front-most point wins each occupied cell; losers are not coarse-observable
    winner = np.zeros(len(ids), dtype=bool)
    best: dict[tuple[int, int], int] = {}
    for row in range(len(ids)):
        key = (int(cells[row, 0]), int(cells[row, 1]))
        prev = best.get(key)
        if prev is None or depths[row] < depths[prev]:
            best[key] = row
    for row in best.values():
        winner[row] = True

    return ViewObservations(
        view_id=view_id,
        point_ids=ids,
        pixels=pixels,
        cells=cells,
        desc_coarse=obs_coarse[ids],
        desc_fine=obs_fine[ids],
        cell_winner=winner,
        visible_mask=visible,
    )


def oracle_fine_location(
    scene: SyntheticScene,
    view_id: int,
    point_id: int,
    *,
    window_half: int = FINE_WINDOW_HALF,
) -> np.ndarray:
    """True projection plus clamped Gaussian sub-pixel noise (ground truth u-hat).

    The draw is keyed on (seed, view, point): repeated calls return the same
    location. The result is clamped to +-window_half px of the grid-cell
    center so it stays inside the refinement window.
    """
    pose, intr = scene.views[view_id]
    pix, z = project_with_depth(pose, intr, scene.points[point_id][None])
    pix = pix[0]
    if not (z[0] > MIN_DEPTH and np.all(np.isfinite(pix)) and intr.contains(pix)):
        raise VisibilityError(f"point {point_id} not visible in view {view_id}")

    rng = np.random.default_rng([scene.seed, _STREAM_FINE_NOISE, view_id, point_id])
    noisy = pix + scene.noise.fine_noise_sigma * rng.standard_normal(2)
    center = grid_cell_center(pix)
    return np.clip(noisy, center - window_half, center + window_half)
