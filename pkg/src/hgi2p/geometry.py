"""Pinhole camera model, rigid transforms, RANSAC PnP, and pose-error metrics.

All functions are pure; randomness enters only through an explicitly seeded
generator carried by RansacConfig.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, InsufficientCorrespondences

Z_MIN = 1e-6  # near-plane: points with camera-frame depth <= Z_MIN are invisible

GN_MAX_ITERS = 50
GN_STEP_TOL = 1e-10


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray  # (3,3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (...,3) world points into the camera frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self @ other).apply(x) == self.apply(other.apply(x))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class PoseError:
    rte: float  # meters
    rre: float  # degrees


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    threshold_px: float = 4.0
    min_consensus: int = 6
    seed: int = 0
    confidence: float = 0.999  # adaptive early-stop; iterations stays the hard cap


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n == 0:
        return np.eye(3)
    a = a / n
    k = _skew(a)
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _exp_so3(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    return rotation_about_axis(w, theta)


def project_raw(point: np.ndarray, pose: Pose, k: Intrinsics):
    """Unbounded pinhole map. Returns (pixel (2,), depth) or (None, depth) if
    the point is at or behind the near plane. No image-bounds check."""
    pc = pose.apply(np.asarray(point, dtype=float).reshape(3))
    z = pc[2]
    if z <= Z_MIN:
        return None, z
    return np.array([k.fx * pc[0] / z + k.cx, k.fy * pc[1] / z + k.cy]), z


def project(point: np.ndarray, pose: Pose, k: Intrinsics):
    """Project a world point to a pixel, or None when invisible.

    Invisible means depth <= Z_MIN or the continuous pixel falls outside
    [0, width) x [0, height).
    """
    uv, _ = project_raw(point, pose, k)
    if uv is None:
        return None
    if not (0.0 <= uv[0] < k.width and 0.0 <= uv[1] < k.height):
        return None
    return uv


def project_many(points: np.ndarray, pose: Pose, k: Intrinsics):
    """Vectorized projection of (n,3) points.

    Returns (pixels (n,2), visible (n,) bool). Pixel rows for invisible
    points are undefined.
    """
    pc = pose.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    ok = z > Z_MIN
    uv = np.empty((len(pc), 2))
    zsafe = np.where(ok, z, 1.0)
    uv[:, 0] = k.fx * pc[:, 0] / zsafe + k.cx
    uv[:, 1] = k.fy * pc[:, 1] / zsafe + k.cy
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    return uv, ok


def pose_error(est: Pose, gt: Pose) -> PoseError:
    """RTE = translation L2 (meters); RRE = geodesic rotation angle (degrees)."""
    rte = float(np.linalg.norm(est.translation - gt.translation))
    c = (np.trace(gt.rotation.T @ est.rotation) - 1.0) / 2.0
    rre = float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return PoseError(rte=rte, rre=rre)


def _reproj_residuals(r: np.ndarray, t: np.ndarray, pts: np.ndarray, px: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Per-pair pixel residual norms (n,). Behind-camera pairs get +inf."""
    pc = pts @ r.T + t
    z = pc[:, 2]
    bad = z <= Z_MIN
    zs = np.where(bad, 1.0, z)
    u = k.fx * pc[:, 0] / zs + k.cx
    v = k.fy * pc[:, 1] / zs + k.cy
    res = np.hypot(u - px[:, 0], v - px[:, 1])
    res[bad] = np.inf
    return res


def _dlt_pose(pts: np.ndarray, px: np.ndarray, k: Intrinsics):
    """Direct linear transform over >=6 pairs; returns (R, t) or None.

    Works on normalized image coordinates; the projective solution is
    snapped to SE(3) by polar decomposition and rescaled.
    """
    n = len(pts)
    xn = (px[:, 0] - k.cx) / k.fx
    yn = (px[:, 1] - k.cy) / k.fy
    xh = np.hstack([pts, np.ones((n, 1))])
    a = np.zeros((2 * n, 12))
    a[0::2, 4:8] = -xh
    a[0::2, 8:12] = yn[:, None] * xh
    a[1::2, 0:4] = xh
    a[1::2, 8:12] = -xn[:, None] * xh
    try:
        _, s, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    # rank-deficient systems (coplanar-degenerate samples) give a useless P
    if s[-2] < 1e-10 * s[0]:
        return None
    p = vt[-1].reshape(3, 4)
    m = p[:, :3]
    u, _, vt2 = np.linalg.svd(m)
    r = u @ vt2
    if np.linalg.det(r) < 0:
        r = -r
        p = -p
    scale = np.trace(r.T @ m) / 3.0
    if abs(scale) < 1e-12:
        return None
    if scale < 0:
        # points behind the camera under this sign choice; flip whole P
        p = -p
        m = p[:, :3]
        u, _, vt2 = np.linalg.svd(m)
        r = u @ vt2
        if np.linalg.det(r) < 0:
            return None
        scale = np.trace(r.T @ m) / 3.0
        if scale <= 0:
            return None
    t = p[:, 3] / scale
    return r, t


def _gauss_newton(r: np.ndarray, t: np.ndarray, pts: np.ndarray, px: np.ndarray, k: Intrinsics):
    """Refine (R, t) by Gauss-Newton on the axis-angle left perturbation."""
    r = r.copy()
    t = t.copy()
    for _ in range(GN_MAX_ITERS):
        pc = pts @ r.T + t
        z = pc[:, 2]
        if np.any(z <= Z_MIN):
            break
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
        res = np.stack([u - px[:, 0], v - px[:, 1]], axis=1).reshape(-1)
        n = len(pts)
        # d(pixel)/d(camera point)
        duv = np.zeros((n, 2, 3))
        duv[:, 0, 0] = k.fx / z
        duv[:, 0, 2] = -k.fx * pc[:, 0] / z**2
        duv[:, 1, 1] = k.fy / z
        duv[:, 1, 2] = -k.fy * pc[:, 1] / z**2
        # camera point wrt (dw, dt): exp(dw) @ pc + t + dt, so d/dw = -[pc]x
        dpdw = np.zeros((n, 3, 3))
        dpdw[:, 0, 1] = pc[:, 2]
        dpdw[:, 0, 2] = -pc[:, 1]
        dpdw[:, 1, 0] = -pc[:, 2]
        dpdw[:, 1, 2] = pc[:, 0]
        dpdw[:, 2, 0] = pc[:, 1]
        dpdw[:, 2, 1] = -pc[:, 0]
        jw = np.einsum("nij,njk->nik", duv, dpdw)
        jt = duv
        jac = np.concatenate([jw, jt], axis=2).reshape(-1, 6)
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        if not np.all(np.isfinite(step)):
            break
        r = _exp_so3(step[:3]) @ r
        t = t + step[3:]
        if np.linalg.norm(step) < GN_STEP_TOL:
            break
    # re-orthonormalize against accumulated drift
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = -r
    return r, t


def solve_pnp(corrs, k: Intrinsics, ransac: RansacConfig = RansacConfig()):
    """Estimate a pose from 2D-3D pairs with RANSAC + Gauss-Newton.

    corrs: sequence of (pixel (2,), point (3,)) pairs.
    Returns (Pose, inlier mask (n,) bool); the mask marks pairs whose
    reprojection residual under the returned pose is <= threshold_px.

    Raises InsufficientCorrespondences below 4 pairs and
    DegenerateConfiguration when no sampled minimal set reaches
    min_consensus within the iteration budget.
    """
    n = len(corrs)
    if n < 4:
        raise InsufficientCorrespondences(f"need at least 4 correspondences, got {n}")
    px = np.asarray([c[0] for c in corrs], dtype=float).reshape(n, 2)
    pts = np.asarray([c[1] for c in corrs], dtype=float).reshape(n, 3)

    if n < 6:
        # too few pairs to sample a DLT minimal set: refine from identity,
        # which is adequate under the near-identity pose prior
        r, t = _gauss_newton(np.eye(3), np.zeros(3), pts, px, k)
        res = _reproj_residuals(r, t, pts, px, k)
        return Pose(r, t), res <= ransac.threshold_px

    rng = np.random.default_rng(ransac.seed)
    best_count = -1
    best_rms = np.inf
    best_rt = None
    needed = ransac.iterations
    it = 0
    while it < min(needed, ransac.iterations):
        it += 1
        idx = rng.choice(n, size=6, replace=False)
        sol = _dlt_pose(pts[idx], px[idx], k)
        if sol is None:
            continue
        res = _reproj_residuals(sol[0], sol[1], pts, px, k)
        inl = res <= ransac.threshold_px
        count = int(inl.sum())
        if count == 0:
            continue
        rms = float(np.sqrt(np.mean(res[inl] ** 2)))
        if count > best_count or (count == best_count and rms < best_rms):
            best_count = count
            best_rms = rms
            best_rt = sol
            if count == n:
                break
            w = count / n
            denom = np.log(max(1e-12, 1.0 - w**6))
            if denom < 0:
                needed = int(np.ceil(np.log(1.0 - ransac.confidence) / denom))
    if best_rt is None or best_count < ransac.min_consensus:
        raise DegenerateConfiguration(
            f"no consensus of {ransac.min_consensus} within {ransac.iterations} iterations"
        )

    res = _reproj_residuals(best_rt[0], best_rt[1], pts, px, k)
    consensus = res <= ransac.threshold_px
    r, t = _gauss_newton(best_rt[0], best_rt[1], pts[consensus], px[consensus], k)
    res = _reproj_residuals(r, t, pts, px, k)
    return Pose(r, t), res <= ransac.threshold_px
