"""Perspective-n-Point pose recovery: EPnP candidates inside adaptive RANSAC.

The minimal solver is a control-point (EPnP-style) solve for n >= 4 with a
homography-decomposition fallback for (near-)coplanar point sets. RANSAC
hypothesizes on random 4-subsets, verifies by reprojection error with a
cheirality gate, adapts its iteration count from the best inlier ratio,
then re-solves on all inliers and polishes with Levenberg-Marquardt on the
6-DoF reprojection error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError
from .geometry import (
    MIN_DEPTH,
    CameraIntrinsics,
    SE3Pose,
    rotation_from_rotvec,
)

DEFAULT_INLIER_PX = 3.0
DEFAULT_MAX_ITERS = 10000
DEFAULT_CONFIDENCE = 0.99
REFERENCE_IMAGE_WIDTH = 512.0

_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


@dataclass
class PnPResult:
    pose: SE3Pose | None
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    mean_error: float = np.inf
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.pose is not None


def reprojection_errors(
    pose: SE3Pose, intr: CameraIntrinsics, points: np.ndarray, pixels: np.ndarray
) -> np.ndarray:
    """Pixel errors per correspondence; infinite behind the camera."""
    p_cam = points @ pose.rotation.T + pose.translation
    z = p_cam[:, 2]
    errs = np.full(len(points), np.inf)
    ok = z > MIN_DEPTH
    u = intr.fx * p_cam[ok, 0] / z[ok] + intr.cx
    v = intr.fy * p_cam[ok, 1] / z[ok] + intr.cy
    errs[ok] = np.hypot(u - pixels[ok, 0], v - pixels[ok, 1])
    return errs


def _umeyama_rigid(src: np.ndarray, dst: np.ndarray) -> SE3Pose:
    """Least-squares rigid transform mapping src onto dst (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    return SE3Pose(R, mu_d - R @ mu_s)


def _control_points(points: np.ndarray) -> np.ndarray:
    """Centroid plus principal directions scaled by the data spread."""
    c0 = points.mean(axis=0)
    centered = points - c0
    cov = centered.T @ centered / len(points)
    eigval, eigvec = np.linalg.eigh(cov)
    ctrl = [c0]
    for k in range(3):
        ctrl.append(c0 + np.sqrt(max(eigval[2 - k], 1e-12)) * eigvec[:, 2 - k])
    return np.array(ctrl)


def _barycentric(points: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    basis = (ctrl[1:] - ctrl[0]).T  # 3x3
    beta = np.linalg.solve(basis, (points - ctrl[0]).T).T
    alpha0 = 1.0 - beta.sum(axis=1)
    return np.column_stack([alpha0, beta])


def _epnp_m_matrix(alpha, pixels, intr):
    n = len(pixels)
    M = np.zeros((2 * n, 12))
    for j in range(4):
        M[0::2, 3 * j + 0] = alpha[:, j] * intr.fx
        M[0::2, 3 * j + 2] = alpha[:, j] * (intr.cx - pixels[:, 0])
        M[1::2, 3 * j + 1] = alpha[:, j] * intr.fy
        M[1::2, 3 * j + 2] = alpha[:, j] * (intr.cy - pixels[:, 1])
    return M


def _beta_gauss_newton(betas, G, rho, iters=12):
    """Refine kernel coefficients on control-point distance consistency.

    G is the (6, 4, 4) quadratic form with the pairwise residuals
    f_p = beta^T G_p beta - rho_p; the Jacobian is 2 G_p beta.
    """
    b = betas.astype(float).copy()
    ridge = 1e-12 * np.eye(4)
    for _ in range(iters):
        Gb = G @ b                      # (6, 4)
        f = (Gb * b).sum(axis=1) - rho
        J = 2.0 * Gb
        try:
            step = np.linalg.solve(J.T @ J + ridge, -(J.T @ f))
        except np.linalg.LinAlgError:
            break
        b += step
        if step @ step < 1e-28 * (1.0 + b @ b):
            break
    return b


def _epnp(
    points: np.ndarray, pixels: np.ndarray, intr: CameraIntrinsics, thorough: bool = True
) -> list[SE3Pose]:
    ctrl_w = _control_points(points)
    alpha = _barycentric(points, ctrl_w)
    M = _epnp_m_matrix(alpha, pixels, intr)
    _, _, vt = np.linalg.svd(M.T @ M)
    kernel = vt[::-1][:4]  # rows: eigenvectors for the 4 smallest eigenvalues
    V = kernel.reshape(4, 4, 3)  # (kernel idx, ctrl idx, xyz)

    dv = np.stack([[V[k, a] - V[k, b] for a, b in _PAIRS] for k in range(4)])  # (4, 6, 3)
    rho = np.array([np.sum((ctrl_w[a] - ctrl_w[b]) ** 2) for a, b in _PAIRS])
    G = np.einsum("kpc,lpc->pkl", dv, dv)  # (6, 4, 4) pairwise quadratic forms

    # case-N approximate betas, each refined by Gauss-Newton on the full 4-vector
    inits = []
    single = (0, 1) if thorough else (0,)
    for k in single:  # single-vector scale fits; v2 matters when the kernel mixes
        denom = float(np.sum(G[:, k, k]))
        if denom > 1e-18:
            beta = np.zeros(4)
            beta[k] = float(np.sqrt(G[:, k, k]) @ np.sqrt(rho)) / denom
            inits.append(beta)

    for n_kernel in (2, 3):
        combos = [(a, b) for a in range(n_kernel) for b in range(a, n_kernel)]
        L = np.stack(
            [G[:, a, b] if a == b else 2.0 * G[:, a, b] for a, b in combos], axis=1
        )
        sol, *_ = np.linalg.lstsq(L, rho, rcond=None)
        beta = np.zeros(4)
        b11 = sol[combos.index((0, 0))]
        beta[0] = np.sqrt(abs(b11))
        for k in range(1, n_kernel):
            b1k = sol[combos.index((0, k))]
            beta[k] = (b1k / beta[0]) * np.sign(b11) if beta[0] > 1e-12 else 0.0
        inits.append(beta)
        if thorough:
            flipped = beta.copy()
            flipped[1:] = -flipped[1:]
            inits.append(flipped)

    if thorough:
        # relinearization over all four kernel vectors: fit the products, then
        # extract betas as the dominant eigen-direction of the rank-1 estimate
        combos4 = [(a, b) for a in range(4) for b in range(a, 4)]
        L4 = np.stack(
            [G[:, a, b] if a == b else 2.0 * G[:, a, b] for a, b in combos4], axis=1
        )
        sol4, *_ = np.linalg.lstsq(L4, rho, rcond=None)
        B = np.zeros((4, 4))
        for col, (a, b) in enumerate(combos4):
            B[a, b] = B[b, a] = sol4[col]
        w, vecs = np.linalg.eigh(B)
        if w[-1] > 0:
            inits.append(np.sqrt(w[-1]) * vecs[:, -1])

    candidates: list[SE3Pose] = []
    for beta0 in inits:
        beta = _beta_gauss_newton(beta0, G, rho)
        ctrl_c = np.einsum("k,kcx->cx", beta, V)
        pts_cam = alpha @ ctrl_c
        if np.mean(pts_cam[:, 2]) < 0:
            pts_cam = -pts_cam
        if np.any(pts_cam[:, 2] <= MIN_DEPTH):
            continue
        try:
            pose = _umeyama_rigid(points, pts_cam)
        except ValueError:
            continue
        candidates.append(pose)
    return candidates


def _homography_pose(points: np.ndarray, pixels: np.ndarray, intr: CameraIntrinsics) -> list[SE3Pose]:
    """Pose for coplanar points via a normalized-DLT homography decomposition."""
    c0 = points.mean(axis=0)
    centered = points - c0
    _, _, vt = np.linalg.svd(centered)
    E = vt.T  # columns: in-plane e1, e2, normal e3
    if np.linalg.det(E) < 0:
        E = E.copy()
        E[:, 2] = -E[:, 2]  # keep a right-handed plane frame
    plane_xy = centered @ E[:, :2]

    norm_img = np.array(
        [(pixels[:, 0] - intr.cx) / intr.fx, (pixels[:, 1] - intr.cy) / intr.fy]
    ).T

    def hartley(pts2d):
        mu = pts2d.mean(axis=0)
        rms = np.sqrt(np.mean(np.sum((pts2d - mu) ** 2, axis=1)))
        s = np.sqrt(2.0) / max(rms, 1e-12)
        T = np.array([[s, 0, -s * mu[0]], [0, s, -s * mu[1]], [0, 0, 1.0]])
        return T

    Ts, Td = hartley(plane_xy), hartley(norm_img)
    src = np.column_stack([plane_xy, np.ones(len(points))]) @ Ts.T
    dst = np.column_stack([norm_img, np.ones(len(points))]) @ Td.T

    A = []
    for (x, y, _), (u, v, _) in zip(src, dst):
        A.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        A.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt_h = np.linalg.svd(np.array(A))
    H = np.linalg.inv(Td) @ vt_h[-1].reshape(3, 3) @ Ts

    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / max(np.linalg.norm(h1) + np.linalg.norm(h2), 1e-12)

    candidates = []
    for sign in (1.0, -1.0):
        r1, r2 = sign * lam * h1, sign * lam * h2
        R_raw = np.column_stack([r1, r2, np.cross(r1, r2)])
        U, _, Vt = np.linalg.svd(R_raw)
        R_p = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
        t_p = sign * lam * h3
        R_w = R_p @ E.T
        t_w = t_p - R_w @ c0
        try:
            pose = SE3Pose(R_w, t_w)
        except ValueError:
            continue
        z = points @ pose.rotation[2] + pose.translation[2]
        if np.all(z > MIN_DEPTH):
            candidates.append(pose)
    return candidates


def pnp_minimal(
    points: np.ndarray, pixels: np.ndarray, intr: CameraIntrinsics, polish: bool = True
) -> list[SE3Pose]:
    """Candidate poses from n >= 4 correspondences, cheirality-filtered.

    Raises DegenerateGeometryError for collinear point sets; switches to the
    homography route when the set is (near-)coplanar. `polish=False` skips
    the per-candidate LM refinement (used by the RANSAC hypothesis loop,
    where raw candidates are cheap and good enough for inlier scoring).
    """
    points = np.asarray(points, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    if len(points) < 4:
        raise ValueError(f"PnP needs at least 4 correspondences, got {len(points)}")

    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-8 * s[0]:
        raise DegenerateGeometryError("correspondences are collinear")
    planar = s[2] <= 1e-3 * s[0]

    candidates = (
        _homography_pose(points, pixels, intr)
        if planar
        else _epnp(points, pixels, intr, thorough=polish)
    )
    if not candidates:
        raise DegenerateGeometryError("no cheirality-consistent pose candidate")

    scored = []
    for pose in candidates:
        if polish:
            pose = lm_pose_polish(pose, points, pixels, intr)
        err = reprojection_errors(pose, intr, points, pixels)
        if not np.all(np.isfinite(err)):
            continue
        scored.append((float(np.mean(err)), pose))
    if not scored:
        raise DegenerateGeometryError("no cheirality-consistent pose candidate")
    scored.sort(key=lambda kv: kv[0])

    unique: list[SE3Pose] = []
    for _, pose in scored:
        if not any(
            np.allclose(pose.matrix, u.matrix, atol=1e-9) for u in unique
        ):
            unique.append(pose)
    return unique[:4]


def lm_pose_polish(
    pose: SE3Pose,
    points: np.ndarray,
    pixels: np.ndarray,
    intr: CameraIntrinsics,
    max_iters: int = 20,
) -> SE3Pose:
    """Levenberg-Marquardt on reprojection error over (rotation, translation).

    Left-multiplicative rotation update; only cost-decreasing steps are
    accepted, so the polished pose never reprojects worse than the input.
    """
    R, t = pose.rotation.copy(), pose.translation.copy()

    def residuals(Rc, tc):
        p = points @ Rc.T + tc
        z = p[:, 2]
        if np.any(z <= MIN_DEPTH):
            return None, None
        u = intr.fx * p[:, 0] / z + intr.cx
        v = intr.fy * p[:, 1] / z + intr.cy
        return np.column_stack([u - pixels[:, 0], v - pixels[:, 1]]), p

    r, p_cam = residuals(R, t)
    if r is None:
        return pose
    cost = float(np.sum(r * r))
    lam = 1e-3

    for _ in range(max_iters):
        n = len(points)
        z = p_cam[:, 2]
        Jproj = np.zeros((n, 2, 3))
        Jproj[:, 0, 0] = intr.fx / z
        Jproj[:, 0, 2] = -intr.fx * p_cam[:, 0] / (z * z)
        Jproj[:, 1, 1] = intr.fy / z
        Jproj[:, 1, 2] = -intr.fy * p_cam[:, 1] / (z * z)

        rp = points @ R.T  # rotated points (camera frame minus t)
        skew = np.zeros((n, 3, 3))
        skew[:, 0, 1] = -rp[:, 2]
        skew[:, 0, 2] = rp[:, 1]
        skew[:, 1, 0] = rp[:, 2]
        skew[:, 1, 2] = -rp[:, 0]
        skew[:, 2, 0] = -rp[:, 1]
        skew[:, 2, 1] = rp[:, 0]

        J = np.zeros((2 * n, 6))
        J[:, :3] = (-Jproj @ skew).reshape(2 * n, 3)   # d/d(rotation vector)
        J[:, 3:] = Jproj.reshape(2 * n, 3)             # d/d(translation)

        g = J.T @ r.ravel()
        H = J.T @ J
        try:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            break
        R_new = rotation_from_rotvec(step[:3]) @ R
        t_new = t + step[3:]
        r_new, p_new = residuals(R_new, t_new)
        if r_new is not None and float(np.sum(r_new * r_new)) < cost:
            decrease = cost - float(np.sum(r_new * r_new))
            R, t, r, p_cam = R_new, t_new, r_new, p_new
            cost = float(np.sum(r * r))
            lam = max(lam / 10.0, 1e-12)
            if decrease <= 1e-12 * cost + 1e-24:
                break
        else:
            lam *= 10.0
            if lam > 1e10:
                break
    return SE3Pose(R, t)


def ransac_pnp(
    points: np.ndarray,
    pixels: np.ndarray,
    intr: CameraIntrinsics,
    *,
    inlier_px: float = DEFAULT_INLIER_PX,
    max_iters: int = DEFAULT_MAX_ITERS,
    confidence: float = DEFAULT_CONFIDENCE,
    seed: int = 0,
) -> PnPResult:
    """Hypothesize-and-verify EPnP with adaptive termination and LM polish.

    Deterministic given the seed. Returns a failure result (pose=None)
    when no hypothesis reaches 4 inliers. The returned inlier set is
    recomputed under the final polished pose, so every reported inlier
    reprojects within inlier_px.
    """
    points = np.asarray(points, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    n = len(points)
    if n < 4:
        return PnPResult(pose=None)

    rng = np.random.default_rng(seed)
    best_pose: SE3Pose | None = None
    best_count = 0
    best_err = np.inf
    needed = max_iters
    i = 0
    while i < needed:
        i += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            candidates = pnp_minimal(points[idx], pixels[idx], intr, polish=False)
        except (DegenerateGeometryError, ValueError):
            continue
        for pose in candidates:
            errs = reprojection_errors(pose, intr, points, pixels)
            mask = errs <= inlier_px
            count = int(mask.sum())
            if count > best_count or (count == best_count and count > 0 and float(np.mean(errs[mask])) < best_err):
                best_pose = pose
                best_count = count
                best_err = float(np.mean(errs[mask])) if count else np.inf
                if count == n:
                    needed = i
                elif count > 4:
                    w = count / n
                    est = np.log(max(1.0 - confidence, 1e-12)) / np.log(1.0 - w**4)
                    needed = min(max_iters, int(np.ceil(est)))

    if best_pose is None or best_count < 4:
        return PnPResult(pose=None, iterations=i)

    inliers = np.flatnonzero(reprojection_errors(best_pose, intr, points, pixels) <= inlier_px)
    pose = best_pose
    try:
        refit = pnp_minimal(points[inliers], pixels[inliers], intr)
        refit_errs = reprojection_errors(refit[0], intr, points[inliers], pixels[inliers])
        base_errs = reprojection_errors(pose, intr, points[inliers], pixels[inliers])
        if np.mean(refit_errs) < np.mean(base_errs):
            pose = refit[0]
    except (DegenerateGeometryError, ValueError):
        pass

    pose = lm_pose_polish(pose, points[inliers], pixels[inliers], intr)

    # second pass on a tightened inlier set: reduces the pull of the
    # within-threshold error tail once the gross outliers are gone
    errs = reprojection_errors(pose, intr, points, pixels)
    core = errs <= inlier_px
    if core.sum() >= 8:
        tight = min(inlier_px, max(3.0 * float(np.median(errs[core])), 0.25 * inlier_px))
        tight_set = np.flatnonzero(errs <= tight)
        if len(tight_set) >= max(8, 0.5 * core.sum()):
            pose = lm_pose_polish(pose, points[tight_set], pixels[tight_set], intr)

    final_errs = reprojection_errors(pose, intr, points, pixels)
    final_inliers = np.flatnonzero(final_errs <= inlier_px)
    if len(final_inliers) < 4:
        final_inliers = inliers
    mean_err = float(np.mean(final_errs[final_inliers]))
    return PnPResult(pose=pose, inliers=final_inliers, mean_error=mean_err, iterations=i)
