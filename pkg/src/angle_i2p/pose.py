"""PnP with RANSAC, ground-truth labelling and registration metrics."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .geometry import CameraIntrinsics, CorrespondenceSet, GeometryError, Pose, back_project

MIN_POINTS = 6
# points drawn per RANSAC hypothesis for each minimal solver
SAMPLE_SIZE = {"sqpnp": 5, "epnp": 5, "p3p": 3, "dlt6": 6}


class PnPResult(NamedTuple):
    pose: Optional[Pose]
    inliers: np.ndarray
    success: bool


def rotation_error(R_est, R_gt) -> float:
    """Geodesic angle in degrees between two rotations.

    Computed with atan2 on the relative rotation, which agrees with the
    arccos-of-trace form but stays accurate near zero.
    """
    R = np.asarray(R_est, dtype=np.float64).T @ np.asarray(R_gt, dtype=np.float64)
    cos_part = (np.trace(R) - 1.0) / 2.0
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_part = np.linalg.norm(w) / 2.0
    return math.degrees(math.atan2(sin_part, cos_part))


def translation_error(t_est, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def _normalise_3d(X: np.ndarray):
    # X: (..., n, 3) -> homogeneous normalised points and the 4x4 transform
    c = X.mean(axis=-2, keepdims=True)
    d = np.sqrt(((X - c) ** 2).sum(-1)).mean(-1)
    s = np.sqrt(3.0) / np.maximum(d, 1e-12)
    T = np.zeros(X.shape[:-2] + (4, 4))
    T[..., 0, 0] = T[..., 1, 1] = T[..., 2, 2] = s
    T[..., :3, 3] = -s[..., None] * c[..., 0, :]
    T[..., 3, 3] = 1.0
    Xn = (X - c) * s[..., None, None]
    ones = np.ones(Xn.shape[:-1] + (1,))
    return np.concatenate([Xn, ones], axis=-1), T


def dlt_projection(rays: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Projective 3x4 matrix (up to scale) in normalised image coordinates, batched."""
    Xh, T = _normalise_3d(X)
    x, y = rays[..., 0:1], rays[..., 1:2]
    zeros = np.zeros_like(Xh)
    row1 = np.concatenate([Xh, zeros, -x * Xh], axis=-1)
    row2 = np.concatenate([zeros, Xh, -y * Xh], axis=-1)
    A = np.concatenate([row1, row2], axis=-2)
    _, _, Vt = np.linalg.svd(A)
    return Vt[..., -1, :].reshape(A.shape[:-2] + (3, 4)) @ T


def projection_to_pose(P: np.ndarray):
    """Nearest rotation and matching translation for projective matrices P (..., 3, 4)."""
    M = P[..., :, :3]
    U, S, Wt = np.linalg.svd(M)
    R = U @ Wt
    sign = np.atleast_1d(np.sign(np.linalg.det(R)))
    sign = np.where(sign == 0, 1.0, sign).reshape(R.shape[:-2])
    R = R * sign[..., None, None]
    lam = sign * S.mean(-1)
    lam = np.where(np.abs(lam) < 1e-300, 1e-300, lam)
    t = P[..., :, 3] / lam[..., None]
    return R, t


def dlt_pnp(rays: np.ndarray, X: np.ndarray):
    """Linear pose from normalised image coordinates ``rays`` (..., n, 2) and points X (..., n, 3).

    Batched over leading dimensions. Returns rotation (..., 3, 3) and
    translation (..., 3); the rotation is the closest orthonormal matrix to
    the recovered 3x3 block.
    """
    return projection_to_pose(dlt_projection(rays, X))


def projective_errors(P: np.ndarray, X: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Pixel reprojection error of raw projective hypotheses (B, 3, 4); depth sign taken from the majority."""
    Xh = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    x = np.einsum("bij,nj->bni", P, Xh)
    sign = np.sign(np.median(x[..., 2], axis=-1))
    z = x[..., 2] * sign[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * x[..., 0] / x[..., 2] + K.cx
        v = K.fy * x[..., 1] / x[..., 2] + K.cy
        err = np.sqrt((u - pixels[:, 0]) ** 2 + (v - pixels[:, 1]) ** 2)
    return np.where((z > 1e-12) & np.isfinite(err), err, np.inf)


def kabsch(A: np.ndarray, B: np.ndarray):
    """Rotation and translation with B ~ R A + t, batched over leading dims of (..., n, 3)."""
    ca = A.mean(axis=-2, keepdims=True)
    cb = B.mean(axis=-2, keepdims=True)
    H = np.swapaxes(A - ca, -1, -2) @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    D = np.zeros(H.shape)
    D[..., 0, 0] = D[..., 1, 1] = 1.0
    D[..., 2, 2] = np.where(d == 0, 1.0, d)
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = cb[..., 0, :] - np.einsum("...ij,...j->...i", R, ca[..., 0, :])
    return R, t


def p3p_grunert(bearings: np.ndarray, X: np.ndarray):
    """Grunert's three-point solution, batched.

    Args:
        bearings: (B, 3, 3) unit viewing rays of the three pixels.
        X: (B, 3, 3) matching world points.

    Returns:
        R (B, 4, 3, 3), t (B, 4, 3) and a (B, 4) validity mask; each sample
        has up to four real solutions.
    """
    f1, f2, f3 = bearings[:, 0], bearings[:, 1], bearings[:, 2]
    a2 = ((X[:, 1] - X[:, 2]) ** 2).sum(-1)
    b2 = ((X[:, 0] - X[:, 2]) ** 2).sum(-1)
    c2 = ((X[:, 0] - X[:, 1]) ** 2).sum(-1)
    ca = (f2 * f3).sum(-1)
    cb = (f1 * f3).sum(-1)
    cg = (f1 * f2).sum(-1)
    with np.errstate(all="ignore"):
        q = (a2 - c2) / b2
        p_ = (a2 + c2) / b2
        A4 = (q - 1) ** 2 - 4 * c2 / b2 * ca ** 2
        A3 = 4 * (q * (1 - q) * cb - (1 - p_) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb)
        A2 = 2 * (q ** 2 - 1 + 2 * q ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
                  - 4 * p_ * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2)
        A1 = 4 * (-q * (1 + q) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - p_) * ca * cg)
        A0 = (1 + q) ** 2 - 4 * a2 / b2 * cg ** 2
        B = len(X)
        comp = np.zeros((B, 4, 4))
        comp[:, 0, :] = -np.stack([A3, A2, A1, A0], axis=1) / A4[:, None]
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        finite = np.all(np.isfinite(comp.reshape(B, -1)), axis=1)
        comp[~finite] = 0.0
        roots = np.linalg.eigvals(comp)
        real = (np.abs(roots.imag) < 1e-8 * np.maximum(1.0, np.abs(roots.real))) & finite[:, None]
        v = roots.real
        u = (((-1 + q)[:, None] * v ** 2 - 2 * (q * cb)[:, None] * v + (1 + q)[:, None])
             / (2 * (cg[:, None] - v * ca[:, None])))
        s1 = np.sqrt(b2[:, None] / (1 + v ** 2 - 2 * v * cb[:, None]))
        s2, s3 = u * s1, v * s1
        valid = real & np.isfinite(s1) & np.isfinite(s2) & (s2 > 0) & (s3 > 0) & (v > 0)
        cam = np.stack([s1[..., None] * f1[:, None], s2[..., None] * f2[:, None],
                        s3[..., None] * f3[:, None]], axis=2)
        cam = np.where(valid[..., None, None], cam, 0.0)
        Xw = np.broadcast_to(X[:, None], cam.shape)
        R, t = kabsch(Xw, cam)
    valid &= np.all(np.isfinite(R), axis=(-1, -2)) & np.all(np.isfinite(t), axis=-1)
    return R, t, valid


def _bearings(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    b = np.stack([(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy,
                  np.ones(pixels.shape[:-1])], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def reprojection_errors(R, t, X, pixels, K: CameraIntrinsics) -> np.ndarray:
    """Pixel reprojection error; points behind the camera get +inf. Batched over hypotheses."""
    Xc = np.einsum("...ij,nj->...ni", R, X) + t[..., None, :]
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[..., 0] / z + K.cx
        v = K.fy * Xc[..., 1] / z + K.cy
        err = np.sqrt((u - pixels[:, 0]) ** 2 + (v - pixels[:, 1]) ** 2)
    err = np.where((z > 1e-9) & np.isfinite(err), err, np.inf)
    return err


def opencv_pnp_batch(X: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics, method: str = "sqpnp"):
    """One OpenCV PnP solve per sample; (B, n, 3) points and (B, n, 2) pixels.

    ``method`` is ``"sqpnp"`` (n >= 3, exact on planar samples) or ``"epnp"``
    (n >= 4, degenerates when the sample is planar).
    Returns R (B, 3, 3), t (B, 3) and a validity mask.
    """
    import cv2

    flag = {"sqpnp": cv2.SOLVEPNP_SQPNP, "epnp": cv2.SOLVEPNP_EPNP}[method]

    B = len(X)
    R = np.full((B, 3, 3), np.nan)
    t = np.full((B, 3), np.nan)
    valid = np.zeros(B, dtype=bool)
    Km = K.matrix
    for b in range(B):
        try:
            ok, rvec, tvec = cv2.solvePnP(X[b], pixels[b], Km, None, flags=flag)
        except cv2.error:
            continue
        if ok and np.all(np.isfinite(rvec)) and np.all(np.isfinite(tvec)):
            R[b] = cv2.Rodrigues(rvec)[0]
            t[b] = tvec.reshape(3)
            valid[b] = True
    return R, t, valid


def _normalised_rays(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    return np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy], axis=-1)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    k = _skew(w / theta)
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * k @ k


def refine_pose(R, t, X, pixels, K: CameraIntrinsics, iterations: int = 10):
    """Levenberg-Marquardt on pixel reprojection error for one pose."""
    R = np.array(R, dtype=np.float64)
    t = np.array(t, dtype=np.float64)

    def residual(R, t):
        Xc = X @ R.T + t
        if np.any(Xc[:, 2] <= 1e-9):
            return None, Xc
        u = K.fx * Xc[:, 0] / Xc[:, 2] + K.cx
        v = K.fy * Xc[:, 1] / Xc[:, 2] + K.cy
        return np.concatenate([u - pixels[:, 0], v - pixels[:, 1]]), Xc

    r, Xc = residual(R, t)
    if r is None:
        return R, t
    cost = r @ r
    lam = 1e-3
    for _ in range(iterations):
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        n = len(X)
        du = np.zeros((n, 3))
        dv = np.zeros((n, 3))
        du[:, 0] = K.fx / z
        du[:, 2] = -K.fx * x / z ** 2
        dv[:, 1] = K.fy / z
        dv[:, 2] = -K.fy * y / z ** 2
        RX = X @ R.T
        # d(Xc)/d(omega) = -[RX]_x for a left perturbation R <- exp(omega) R
        dXdw = np.zeros((n, 3, 3))
        dXdw[:, 0, 1], dXdw[:, 0, 2] = RX[:, 2], -RX[:, 1]
        dXdw[:, 1, 0], dXdw[:, 1, 2] = -RX[:, 2], RX[:, 0]
        dXdw[:, 2, 0], dXdw[:, 2, 1] = RX[:, 1], -RX[:, 0]
        J = np.concatenate([
            np.concatenate([np.einsum("ni,nij->nj", du, dXdw), du], axis=1),
            np.concatenate([np.einsum("ni,nij->nj", dv, dXdw), dv], axis=1),
        ])
        H = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(8):
            try:
                step = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            except np.linalg.LinAlgError:
                break
            R_new = _so3_exp(step[:3]) @ R
            t_new = t + step[3:]
            r_new, Xc_new = residual(R_new, t_new)
            if r_new is not None and r_new @ r_new < cost:
                R, t, r, Xc, cost = R_new, t_new, r_new, Xc_new, r_new @ r_new
                lam = max(lam / 10, 1e-9)
                improved = True
                break
            lam *= 10
        if not improved or np.linalg.norm(step) < 1e-12:
            break
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt, t


def _fit_consensus(R, t, rays, X, pix, K, threshold, rounds, mask=None):
    """Alternate linear refit, reprojection refinement and re-scoring on the consensus set."""
    if mask is None:
        mask = reprojection_errors(R, t, X, pix, K) < threshold
    for _ in range(rounds):
        if mask.sum() < MIN_POINTS:
            break
        with np.errstate(all="ignore"):
            R_new, t_new = dlt_pnp(rays[mask], X[mask])
        if not (np.all(np.isfinite(R_new)) and np.all(np.isfinite(t_new))):
            R_new, t_new = R, t
        R_new, t_new = refine_pose(R_new, t_new, X[mask], pix[mask], K)
        new_mask = reprojection_errors(R_new, t_new, X, pix, K) < threshold
        if new_mask.sum() < mask.sum():
            break
        done = np.array_equal(new_mask, mask)
        R, t, mask = R_new, t_new, new_mask
        if done:
            break
    return R, t, mask


def solve_pnp_ransac(corrs: CorrespondenceSet, K: Optional[CameraIntrinsics] = None, iterations: int = 1000,
                     reproj_threshold_px: float = 3.0, seed: int = 0, refit_rounds: int = 4,
                     local_optimisation: int = 3, minimal_solver: str = "sqpnp") -> PnPResult:
    """RANSAC over pixel <-> point matches.

    ``minimal_solver`` picks the hypothesis generator: ``"sqpnp"`` (SQPnP on
    five-point samples, exact on planar ones), ``"epnp"`` (EPnP on five
    points), ``"p3p"`` (three points, up to four poses each) or ``"dlt6"``
    (six-point linear solve, scored on its raw projective fit since
    orthonormalising a noisy 6-point DLT throws most of its consensus away).
    Hypotheses rank by inlier count, ties by lower summed inlier error; the ``local_optimisation`` best of
    every batch are refit on their consensus sets (linear solve, then
    reprojection refinement) before the final choice. At least six
    correspondences and a six-point consensus are required either way.
    """
    K = corrs.intrinsics if K is None else K
    n = len(corrs)
    fail = PnPResult(None, np.zeros(n, dtype=bool), False)
    if n < MIN_POINTS or iterations < 1:
        return fail
    if minimal_solver not in SAMPLE_SIZE:
        raise ValueError(f"unknown minimal solver {minimal_solver!r}")
    X = corrs.points
    pix = corrs.pixels
    rays = _normalised_rays(pix, K)
    rng = np.random.default_rng(seed)
    size = SAMPLE_SIZE[minimal_solver]
    samples = np.stack([rng.choice(n, size, replace=False) for _ in range(iterations)])

    def score(R, t):
        err = reprojection_errors(R, t, X, pix, K)
        inl = err < reproj_threshold_px
        return int(inl.sum()), float(err[inl].sum())

    best = None
    chunk = 256
    bear = _bearings(pix, K) if minimal_solver == "p3p" else None
    for start in range(0, iterations, chunk):
        s = samples[start:start + chunk]
        with np.errstate(all="ignore"):
            if minimal_solver == "p3p":
                R, t, valid = p3p_grunert(bear[s], X[s])
                R, t, valid = R.reshape(-1, 3, 3), t.reshape(-1, 3), valid.reshape(-1)
                err = reprojection_errors(R, t, X, pix, K)
                err[~valid] = np.inf
            elif minimal_solver in ("sqpnp", "epnp"):
                R, t, valid = opencv_pnp_batch(X[s], pix[s], K, minimal_solver)
                err = reprojection_errors(R, t, X, pix, K)
                err[~valid] = np.inf
            else:
                P = dlt_projection(rays[s], X[s])
                R, t = projection_to_pose(P)
                err = projective_errors(P, X, pix, K)
        inl = err < reproj_threshold_px
        count = inl.sum(-1)
        total = np.where(inl, err, 0.0).sum(-1)
        order = np.lexsort((np.arange(len(count)), total, -count))
        for j in order[:max(1, local_optimisation)]:
            cands = [(*score(R[j], t[j]), R[j], t[j])] if np.all(np.isfinite(R[j])) else []
            if local_optimisation and count[j] >= MIN_POINTS:
                R_lo, t_lo, _ = _fit_consensus(R[j], t[j], rays, X, pix, K, reproj_threshold_px,
                                               refit_rounds, mask=inl[j])
                cands.append((*score(R_lo, t_lo), R_lo, t_lo))
            for cand in cands:
                if best is None or (cand[0], -cand[1]) > (best[0], -best[1]):
                    best = cand

    if best is None or best[0] < MIN_POINTS:
        return fail
    R, t, mask = _fit_consensus(best[2], best[3], rays, X, pix, K, reproj_threshold_px, refit_rounds)
    if mask.sum() < MIN_POINTS:
        return fail
    return PnPResult(Pose(R, t, check=False), mask, True)


def correspondence_distances(corrs: CorrespondenceSet, gt_pose: Optional[Pose] = None) -> np.ndarray:
    """3D discrepancy of each match under the true pose.

    The pixel is lifted with its ground-truth depth when the set carries one;
    otherwise with the depth of the mapped point, which measures only the
    offset perpendicular to the viewing ray.
    """
    gt_pose = corrs.gt_pose if gt_pose is None else gt_pose
    if gt_pose is None:
        raise GeometryError("labelling needs a ground-truth pose")
    Xc = gt_pose.apply(corrs.points)
    depth = corrs.gt_depth if corrs.gt_depth is not None else Xc[:, 2]
    dist = np.full(len(corrs), np.inf)
    ok = depth > 0
    if ok.any():
        lifted = back_project(corrs.pixels[ok], depth[ok], corrs.intrinsics)
        dist[ok] = np.linalg.norm(lifted - Xc[ok], axis=1)
    return dist


def label_inliers(corrs: CorrespondenceSet, gt_pose: Optional[Pose] = None, dist_threshold: float = 0.05) -> np.ndarray:
    return correspondence_distances(corrs, gt_pose) < dist_threshold


@dataclass
class MetricsReport:
    inlier_ratio: float
    mean_rotation_error: float
    mean_translation_error: float
    registration_recall: float
    ir_threshold: float = 0.05
    rr_threshold: float = 0.1
    n_correspondences: int = 0
    pnp_success: bool = True
    rr_point_ratio: float = float("nan")
    scene: str = ""


def evaluate(corrs_filtered: CorrespondenceSet, gt_pose: Optional[Pose] = None, K: Optional[CameraIntrinsics] = None,
             minimal_solver: str = "sqpnp",
             ir_threshold: float = 0.05, rr_threshold: float = 0.1, ransac_iterations: int = 1000,
             reproj_threshold_px: float = 3.0, seed: int = 0,
             reference_points: Optional[np.ndarray] = None, scene: str = "") -> MetricsReport:
    """Single-scene metrics.

    The scene registers when the median distance between reference points
    mapped by the estimated and the true pose is below ``rr_threshold``.
    ``reference_points`` defaults to the points of the (filtered) set; pass
    the unfiltered points to compare filters on equal footing.
    """
    gt_pose = corrs_filtered.gt_pose if gt_pose is None else gt_pose
    if gt_pose is None:
        raise GeometryError("evaluation needs a ground-truth pose")
    n = len(corrs_filtered)
    ir = float(label_inliers(corrs_filtered, gt_pose, ir_threshold).mean()) if n else 0.0
    result = solve_pnp_ransac(corrs_filtered, K, ransac_iterations, reproj_threshold_px, seed,
                              minimal_solver=minimal_solver) \
        if n >= MIN_POINTS else PnPResult(None, np.zeros(n, dtype=bool), False)
    if not result.success:
        return MetricsReport(ir, float("nan"), float("nan"), 0.0, ir_threshold, rr_threshold, n, False, 0.0, scene)
    est = result.pose
    ref = corrs_filtered.points if reference_points is None else np.asarray(reference_points, dtype=np.float64)
    d = np.linalg.norm(est.apply(ref) - gt_pose.apply(ref), axis=1)
    passed = bool(np.median(d) < rr_threshold)
    return MetricsReport(
        ir, rotation_error(est.rotation, gt_pose.rotation),
        translation_error(est.translation, gt_pose.translation),
        1.0 if passed else 0.0, ir_threshold, rr_threshold, n, True, float(np.mean(d < rr_threshold)), scene,
    )


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Dataset-level IR / MRE / MTE / RR; pose errors average over solved scenes."""
    if not reports:
        raise ValueError("no reports to aggregate")
    solved = [r for r in reports if r.pnp_success]
    return {
        "scenes": len(reports),
        "inlier_ratio": float(np.mean([r.inlier_ratio for r in reports])),
        "mean_rotation_error": float(np.mean([r.mean_rotation_error for r in solved])) if solved else float("nan"),
        "mean_translation_error": (float(np.mean([r.mean_translation_error for r in solved]))
                                   if solved else float("nan")),
        "registration_recall": float(np.mean([r.registration_recall for r in reports])),
        "pnp_failures": len(reports) - len(solved),
        "ir_threshold": reports[0].ir_threshold,
        "rr_threshold": reports[0].rr_threshold,
    }


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    buf.write("scene,ir,mre_deg,mte_m,rr_pass\n")
    for i, r in enumerate(reports):
        name = r.scene or str(i)
        buf.write(f"{name},{r.inlier_ratio:.17g},{r.mean_rotation_error:.17g},"
                  f"{r.mean_translation_error:.17g},{int(r.registration_recall > 0)}\n")
    return buf.getvalue()


def summary_text(summary: dict) -> str:
    return "".join(f"{k}: {v:.17g}\n" if isinstance(v, float) else f"{k}: {v}\n" for k, v in summary.items())
