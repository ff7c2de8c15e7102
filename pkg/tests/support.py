"""Shared helpers for the test suite: random poses, camera rings, reference math.

Reference implementations here are deliberately written from scratch
(plain matrix arithmetic, exhaustive searches) so they stay independent
of the library code they are used to check.
"""

import numpy as np

from semidense.geometry import CameraIntrinsics, SE3Pose


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a QR decomposition."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> SE3Pose:
    return SE3Pose(random_rotation(rng), rng.standard_normal(3) * t_scale)


def look_at_pose(camera_pos: np.ndarray, target: np.ndarray) -> SE3Pose:
    """World-to-camera pose with +z pointing from camera_pos to target."""
    camera_pos = np.asarray(camera_pos, dtype=float)
    z = np.asarray(target, dtype=float) - camera_pos
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return SE3Pose(R, -R @ camera_pos)


def camera_ring(n: int, radius: float, intr: CameraIntrinsics, *, height: float = 1.0):
    """n cameras on a circle of given radius, all looking at the origin."""
    views = []
    for k in range(n):
        a = 2.0 * np.pi * k / n
        pos = np.array([radius * np.cos(a), radius * np.sin(a), height])
        views.append((look_at_pose(pos, np.zeros(3)), intr))
    return views


def default_intrinsics(width: int = 512, height: int = 512, f: float = 640.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def pixel_of(pose: SE3Pose, intr: CameraIntrinsics, point: np.ndarray) -> np.ndarray:
    """Reference pinhole projection written out longhand."""
    p = pose.rotation @ np.asarray(point, dtype=float) + pose.translation
    return np.array(
        [intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy]
    )


def total_reprojection_cost(point: np.ndarray, observations) -> float:
    """Sum of squared pixel errors over all observations (reference math)."""
    cost = 0.0
    for pose, intr, pixel in observations:
        d = pixel_of(pose, intr, point) - np.asarray(pixel, dtype=float)
        cost += float(d @ d)
    return cost


def grid_search_point(observations, center: np.ndarray, radius: float,
                      rounds: int = 18, n: int = 7) -> np.ndarray:
    """Brute-force coarse-to-fine grid search minimizing total reprojection cost.

    Searches an axis-aligned box around `center`, shrinking it each round
    around the best grid node. Independent oracle for triangulation.
    """
    best = np.asarray(center, dtype=float).copy()
    r = float(radius)
    for _ in range(rounds):
        axes = [np.linspace(best[i] - r, best[i] + r, n) for i in range(3)]
        best_cost = np.inf
        best_node = best
        for x in axes[0]:
            for y in axes[1]:
                for z in axes[2]:
                    p = np.array([x, y, z])
                    c = total_reprojection_cost(p, observations)
                    if c < best_cost:
                        best_cost = c
                        best_node = p
        best = best_node
        r *= 0.45
    return best


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def random_rotation_perturbation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    from semidense.geometry import rotation_from_axis_angle

    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return rotation_from_axis_angle(axis, np.radians(rng.uniform(0.0, max_deg)))


def golden_section_minimize(f, lo: float, hi: float, tol: float) -> float:
    """1-D golden-section search; reference oracle for scalar optimizers."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def random_refined_track(rng: np.random.Generator, n_sources: int = 8,
                         pixel_noise: float = 0.5, intr: CameraIntrinsics | None = None):
    """A RefinedTrack with known ground truth for depth-optimizer tests.

    The reference ray passes exactly through the true point; source pixels
    carry Gaussian noise. Returns (track, poses, intrinsics, true_depth).
    """
    from semidense.refine import RefinedTrack, SourceNode
    from semidense.scene import grid_cell_center

    intr = intr or default_intrinsics()
    point = rng.uniform(-0.35, 0.35, size=3)

    poses = []
    while len(poses) < n_sources + 1:
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        pos = direction * rng.uniform(3.0, 5.0)
        pose = look_at_pose(pos, np.zeros(3))
        pix = pixel_of(pose, intr, point)
        if 20 < pix[0] < intr.width - 20 and 20 < pix[1] < intr.height - 20:
            poses.append(pose)

    u_ref = pixel_of(poses[0], intr, point)
    sources = []
    for k in range(1, n_sources + 1):
        pix = pixel_of(poses[k], intr, point) + rng.normal(0.0, pixel_noise, size=2)
        sources.append(
            SourceNode(
                view_id=k,
                cell=tuple(grid_cell_center(pix)),
                pixel=pix,
                confidence=1.0,
            )
        )
    true_depth = float(poses[0].transform(point)[2])
    track = RefinedTrack(
        track_id=0,
        ref_view=0,
        ref_cell=tuple(grid_cell_center(u_ref)),
        u_ref=u_ref,
        sources=sources,
        point_init=point * rng.uniform(0.95, 1.05),
    )
    return track, poses, [intr] * (n_sources + 1), true_depth
