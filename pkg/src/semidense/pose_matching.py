"""Sparse-to-dense 2D-3D matching between a point-cloud model and a query image.

Coarse stage: positional encoding, interleaved self/cross linear attention,
dual-softmax matching probabilities, and mutual-nearest-neighbor selection
above a confidence threshold. Fine stage: a w x w window cropped from the
half-resolution feature map around each coarse match is correlated with the
point's fine descriptor; the sub-pixel location is the probability-weighted
expectation over the window.

Query feature maps are synthesized from the scene oracle by splatting
observed point descriptors over a random noise floor; the map container is
the seam where a learned image backbone would plug in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionStack, positional_encode
from .geometry import MIN_DEPTH, CameraIntrinsics, project_with_depth
from .refine import PointCloudModel
from .scene import GRID_STRIDE, SyntheticScene, render_observations

FINE_STRIDE = 2

_STREAM_QUERY_MAPS = 40

DEFAULT_TAU = 0.08
DEFAULT_THETA = 0.4
DEFAULT_FINE_WINDOW = 5


@dataclass(frozen=True, eq=False)
class QueryFeatureMaps:
    """Coarse (1/8) and fine (1/2) descriptor grids of one query image."""

    coarse: np.ndarray  # (H/8, W/8, C_c) unit rows
    fine: np.ndarray    # (H/2, W/2, C_f) unit rows
    intrinsics: CameraIntrinsics

    def coarse_cell_pixels(self) -> np.ndarray:
        """Pixel centers of the flattened (row-major) coarse grid."""
        h, w, _ = self.coarse.shape
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        u = cols * GRID_STRIDE + GRID_STRIDE / 2.0
        v = rows * GRID_STRIDE + GRID_STRIDE / 2.0
        return np.stack([u.ravel(), v.ravel()], axis=1)


@dataclass
class CorrespondenceSet:
    """Coarse and fine 2D-3D matches with confidences."""

    coarse_points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    coarse_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    coarse_conf: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fine_points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    fine_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    fine_conf: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fine_clamped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_points)

    @property
    def n_fine(self) -> int:
        return len(self.fine_points)


# Spatial footprint of a point's fine descriptor in the synthesized map (px).
FINE_SPLAT_SIGMA_PX = 1.0
_FINE_SPLAT_RADIUS_CELLS = 3


def synthesize_query_maps(scene: SyntheticScene, view_id: int) -> QueryFeatureMaps:
    """Splat observed descriptors onto coarse/fine grids over a noise floor.

    Coarse cells take their winning point's observed descriptor. On the fine
    map each point spreads a Gaussian-shaped descriptor peak (a real feature
    map is smooth, so correlation decays with distance from the feature);
    nearer points are blended over farther ones. Unoccupied cells keep
    random unit vectors, and every cell is renormalized.
    """
    pose, intr = scene.views[view_id]
    obs = render_observations(scene, view_id)
    hc, wc = intr.height // GRID_STRIDE, intr.width // GRID_STRIDE
    hf, wf = intr.height // FINE_STRIDE, intr.width // FINE_STRIDE
    cc = scene.desc_coarse.shape[1]
    cf = scene.desc_fine.shape[1]

    rng = np.random.default_rng([scene.seed, _STREAM_QUERY_MAPS, view_id])
    coarse = rng.standard_normal((hc, wc, cc))
    coarse /= np.linalg.norm(coarse, axis=2, keepdims=True)
    fine = rng.standard_normal((hf, wf, cf))
    fine /= np.linalg.norm(fine, axis=2, keepdims=True)

    for row in np.flatnonzero(obs.cell_winner):
        c = int(obs.cells[row, 0] // GRID_STRIDE)
        r = int(obs.cells[row, 1] // GRID_STRIDE)
        coarse[r, c] = obs.desc_coarse[row]

    depths = pose.transform(scene.points[obs.point_ids])[:, 2]
    order = np.argsort(-depths)  # far first; nearer points blend over them
    rad = _FINE_SPLAT_RADIUS_CELLS
    for row in order:
        u, v = obs.pixels[row]
        c0 = int(np.rint(u / FINE_STRIDE))
        r0 = int(np.rint(v / FINE_STRIDE))
        cs = np.arange(max(c0 - rad, 0), min(c0 + rad + 1, wf))
        rs = np.arange(max(r0 - rad, 0), min(r0 + rad + 1, hf))
        if not len(cs) or not len(rs):
            continue
        du = cs * FINE_STRIDE - u
        dv = rs * FINE_STRIDE - v
        d2 = dv[:, None] ** 2 + du[None, :] ** 2
        g = np.exp(-d2 / (2.0 * FINE_SPLAT_SIGMA_PX**2))[:, :, None]
        block = fine[np.ix_(rs, cs)]
        fine[np.ix_(rs, cs)] = g * obs.desc_fine[row] + (1.0 - g) * block
    fine /= np.linalg.norm(fine, axis=2, keepdims=True)

    return QueryFeatureMaps(coarse=coarse, fine=fine, intrinsics=intr)


def dual_softmax(scores: np.ndarray) -> np.ndarray:
    """Entrywise product of row-wise and column-wise softmax."""
    s = scores - scores.max(axis=1, keepdims=True)
    rows = np.exp(s)
    rows /= rows.sum(axis=1, keepdims=True)
    s = scores - scores.max(axis=0, keepdims=True)
    cols = np.exp(s)
    cols /= cols.sum(axis=0, keepdims=True)
    return rows * cols


def mutual_nearest_neighbors(prob: np.ndarray, threshold: float) -> np.ndarray:
    """(j, q) index pairs that are each other's argmax with prob >= threshold."""
    if prob.size == 0:
        return np.zeros((0, 2), dtype=int)
    row_best = prob.argmax(axis=1)
    col_best = prob.argmax(axis=0)
    j = np.arange(prob.shape[0])
    mutual = col_best[row_best[j]] == j
    keep = mutual & (prob[j, row_best[j]] >= threshold)
    return np.stack([j[keep], row_best[j[keep]]], axis=1)


def coarse_match_2d3d(
    model: PointCloudModel,
    query: QueryFeatureMaps,
    stack: AttentionStack,
    tau: float = DEFAULT_TAU,
    theta: float = DEFAULT_THETA,
) -> tuple[np.ndarray, np.ndarray, CorrespondenceSet]:
    """Dual-softmax coarse matching; returns (scores, probabilities, matches).

    With a zero-layer stack the raw descriptors are compared directly
    (attention bypass; positional encoding is skipped too so the purely
    geometric pipeline works without trained weights). An empty model gives
    empty correspondences, not an error.
    """
    n = model.n_points
    n_cells = query.coarse.shape[0] * query.coarse.shape[1]
    if n == 0:
        return (
            np.zeros((0, n_cells)),
            np.zeros((0, n_cells)),
            CorrespondenceSet(),
        )

    f3 = model.coarse_features
    f2 = query.coarse.reshape(-1, query.coarse.shape[2])
    if not (np.all(np.isfinite(f3)) and np.all(np.isfinite(f2))):
        raise ValueError("non-finite features")

    if stack.n_layers > 0:
        box_min, box_max = model.bbox
        f3 = positional_encode(f3, model.points, box_min=box_min, box_extent=box_max - box_min)
        f2 = positional_encode(f2, query.coarse_cell_pixels())
        f3, f2 = stack.transform(f3, f2)
        f3 = f3 / np.maximum(np.linalg.norm(f3, axis=1, keepdims=True), 1e-12)
        f2 = f2 / np.maximum(np.linalg.norm(f2, axis=1, keepdims=True), 1e-12)

    scores = (f3 @ f2.T) / tau
    prob = dual_softmax(scores)
    pairs = mutual_nearest_neighbors(prob, theta)

    cell_pixels = query.coarse_cell_pixels()
    corr = CorrespondenceSet(
        coarse_points=pairs[:, 0].copy(),
        coarse_pixels=cell_pixels[pairs[:, 1]],
        coarse_conf=prob[pairs[:, 0], pairs[:, 1]],
    )
    return scores, prob, corr


def window_expectation(probabilities: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Probability-weighted mean position over a cropped window."""
    p = np.asarray(probabilities, dtype=float)
    return p @ np.asarray(positions, dtype=float)


def fine_match_2d3d(
    model: PointCloudModel,
    query: QueryFeatureMaps,
    corr: CorrespondenceSet,
    stack: AttentionStack,
    window: int = DEFAULT_FINE_WINDOW,
    fine_tau: float = DEFAULT_TAU,
) -> CorrespondenceSet:
    """Refine each coarse match to sub-pixel by windowed softmax expectation.

    The w x w crop is centered on the coarse cell in the half-resolution
    map (shifted and flagged at borders). Correlations are scaled by
    1/fine_tau: the surrogate descriptors are unit-norm, so an unscaled
    softmax would flatten the expectation toward the window center.
    """
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    half = window // 2
    hf, wf, _ = query.fine.shape
    out = CorrespondenceSet(
        coarse_points=corr.coarse_points.copy(),
        coarse_pixels=corr.coarse_pixels.copy(),
        coarse_conf=corr.coarse_conf.copy(),
    )
    if corr.n_coarse == 0:
        return out

    points, pixels, confs, clamped = [], [], [], []
    offsets = np.arange(window)
    for j, cell in zip(corr.coarse_points, corr.coarse_pixels):
        cf = int(cell[0] // FINE_STRIDE)
        rf = int(cell[1] // FINE_STRIDE)
        c0 = int(np.clip(cf - half, 0, wf - window))
        r0 = int(np.clip(rf - half, 0, hf - window))
        was_clamped = (c0 != cf - half) or (r0 != rf - half)

        crop = query.fine[r0 : r0 + window, c0 : c0 + window].reshape(-1, query.fine.shape[2])
        pos_u = (c0 + offsets) * FINE_STRIDE
        pos_v = (r0 + offsets) * FINE_STRIDE
        positions = np.stack(
            [np.tile(pos_u, window), np.repeat(pos_v, window)], axis=1
        ).astype(float)

        f3 = model.fine_features[j][None, :]
        f2 = crop
        if stack.n_layers > 0:
            f3, f2 = stack.transform(f3, f2)
            f3 = f3 / np.maximum(np.linalg.norm(f3, axis=1, keepdims=True), 1e-12)
            f2 = f2 / np.maximum(np.linalg.norm(f2, axis=1, keepdims=True), 1e-12)

        logits = (f2 @ f3[0]) / fine_tau
        logits -= logits.max()
        p = np.exp(logits)
        p /= p.sum()

        points.append(j)
        pixels.append(window_expectation(p, positions))
        confs.append(float(p.max()))
        clamped.append(was_clamped)

    out.fine_points = np.array(points, dtype=int)
    out.fine_pixels = np.array(pixels)
    out.fine_conf = np.array(confs)
    out.fine_clamped = np.array(clamped, dtype=bool)
    return out


def ground_truth_matches(
    model: PointCloudModel,
    pose,
    intrinsics: CameraIntrinsics,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project model points; return (observable mask, cell indices, pixels).

    Cell indices address the flattened row-major coarse grid; observability
    means positive depth and in-bounds projection. Used for supervision.
    """
    pix, z = project_with_depth(pose, intrinsics, model.points)
    ok = (z > MIN_DEPTH) & np.all(np.isfinite(pix), axis=1)
    ok[ok] &= intrinsics.contains(pix[ok])
    wc = intrinsics.width // GRID_STRIDE
    cols = np.clip((pix[:, 0] // GRID_STRIDE).astype(int), 0, wc - 1)
    rows = np.clip(
        (pix[:, 1] // GRID_STRIDE).astype(int), 0, intrinsics.height // GRID_STRIDE - 1
    )
    cells = rows * wc + cols
    cells[~ok] = -1
    return ok, cells, pix


def sample_or_pad(model: PointCloudModel, n: int, seed: int = 0) -> PointCloudModel:
    """Random subsample (without replacement) or pad (with replacement) to n points.

    Training-path utility; the test path always uses all reconstructed points.
    """
    m = model.n_points
    if m == 0:
        raise ValueError("cannot sample from an empty model")
    rng = np.random.default_rng([seed, 41])
    if m >= n:
        idx = np.sort(rng.choice(m, size=n, replace=False))
    else:
        pad = rng.choice(m, size=n - m, replace=True)
        idx = np.concatenate([np.arange(m), np.sort(pad)])
    return PointCloudModel(
        points=model.points[idx],
        coarse_features=model.coarse_features[idx],
        fine_features=model.fine_features[idx],
        track_ids=model.track_ids[idx],
    )
