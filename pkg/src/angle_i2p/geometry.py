"""Camera model, correspondence containers and the scale-free consistency measures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

EPS = 1e-9


class GeometryError(ValueError):
    """Raised for inputs outside an operation's domain."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


class Pose:
    """Rigid transform mapping world coordinates into the camera frame: x_c = R x_w + t."""

    def __init__(self, rotation, translation, check: bool = True):
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)
        if check:
            R = self.rotation
            if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
                raise GeometryError("rotation must be orthonormal with det +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Return self ∘ other (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation, check=False)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, check=False)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


class Correspondence(NamedTuple):
    pixel: np.ndarray
    point: np.ndarray
    est_depth: float
    est_point: np.ndarray


@dataclass
class CorrespondenceSet:
    """Putative pixel <-> point matches with their back-projected estimated points.

    Arrays are stored column-wise: ``pixels`` (N, 2), ``points`` (N, 3) on the
    point-cloud side, ``est_depth`` (N,) and ``est_points`` (N, 3) in the
    camera frame. ``gt_depth`` is the true depth of each pixel when the
    generator knows it; it is not part of the text format.
    """

    pixels: np.ndarray
    points: np.ndarray
    est_depth: np.ndarray
    est_points: np.ndarray
    intrinsics: CameraIntrinsics
    gt_pose: Optional[Pose] = None
    gt_labels: Optional[np.ndarray] = None
    gt_depth: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        n = len(self.pixels)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(n, 3)
        self.est_depth = np.asarray(self.est_depth, dtype=np.float64).reshape(n)
        self.est_points = np.asarray(self.est_points, dtype=np.float64).reshape(n, 3)
        if np.any(self.est_depth <= 0):
            raise GeometryError("estimated depths must be positive")
        if self.gt_labels is not None:
            self.gt_labels = np.asarray(self.gt_labels, dtype=bool).reshape(-1)
            if len(self.gt_labels) != n:
                raise GeometryError("gt_labels length does not match correspondences")
        if self.gt_depth is not None:
            self.gt_depth = np.asarray(self.gt_depth, dtype=np.float64).reshape(n)

    @classmethod
    def from_depths(cls, pixels, points, est_depth, intrinsics, **kwargs) -> "CorrespondenceSet":
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        est_depth = np.asarray(est_depth, dtype=np.float64).reshape(-1)
        return cls(pixels, points, est_depth, back_project(pixels, est_depth, intrinsics),
                   intrinsics, **kwargs)

    def __len__(self):
        return len(self.pixels)

    def __getitem__(self, i) -> Correspondence:
        return Correspondence(self.pixels[i], self.points[i], float(self.est_depth[i]), self.est_points[i])

    def subset(self, index) -> "CorrespondenceSet":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        pick = lambda a: None if a is None else a[index]
        return CorrespondenceSet(
            self.pixels[index], self.points[index], self.est_depth[index], self.est_points[index],
            self.intrinsics, gt_pose=self.gt_pose, gt_labels=pick(self.gt_labels),
            gt_depth=pick(self.gt_depth),
        )

    def with_est_points(self, est_points) -> "CorrespondenceSet":
        out = self.subset(np.arange(len(self)))
        out.est_points = np.asarray(est_points, dtype=np.float64).reshape(-1, 3)
        return out


def back_project(pixel, depth, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) with metric depth through the inverse pinhole model.

    Accepts a single pixel ``(u, v)`` with a scalar depth, or arrays of shape
    (N, 2) and (N,).
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise GeometryError("depth must be positive")
    u, v = pixel[..., 0], pixel[..., 1]
    x = (u - K.cx) * depth / K.fx
    y = (v - K.cy) * depth / K.fy
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def project(points, K: CameraIntrinsics) -> np.ndarray:
    """Forward pinhole projection of camera-frame points."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([K.fx * points[..., 0] / z + K.cx, K.fy * points[..., 1] / z + K.cy], axis=-1)


def _fsum_mean(points: np.ndarray) -> np.ndarray:
    # correctly rounded sums keep loop and vectorised consumers bit-identical
    n = len(points)
    return np.array([math.fsum(points[:, c]) / n for c in range(points.shape[1])])


def centroid_and_center(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise GeometryError("centroid of an empty point list is undefined")
    c = _fsum_mean(points)
    return c, points - c


def angle_consistency_pair(oi, oj, pi, pj, sigma_d: float, signed_cosine: bool = False) -> float:
    """Consistency of one pair from centred vectors on both sides.

    Returns 0 when any vector is (numerically) at its centroid.
    """
    if sigma_d <= 0:
        raise GeometryError("sigma_d must be positive")
    vecs = [np.asarray(x, dtype=np.float64) for x in (oi, oj, pi, pj)]
    norms = [math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) for v in vecs]
    if min(norms) <= EPS:
        return 0.0
    a, b, c, d = vecs
    cos_o = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (norms[0] * norms[1])
    cos_p = (c[0] * d[0] + c[1] * d[1] + c[2] * d[2]) / (norms[2] * norms[3])
    if signed_cosine:
        delta = abs(cos_o - cos_p)
    else:
        delta = abs(abs(cos_o) - abs(cos_p))
    return max(0.0, 1.0 - delta * delta / (sigma_d * sigma_d))


def _pair_cosines(v: np.ndarray):
    # elementwise in the same order as the scalar path
    n = np.sqrt(v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1] + v[:, 2] * v[:, 2])
    dot = (v[:, None, 0] * v[None, :, 0] + v[:, None, 1] * v[None, :, 1]
           + v[:, None, 2] * v[None, :, 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = dot / (n[:, None] * n[None, :])
    return cos, n


def _pair_distances(v: np.ndarray) -> np.ndarray:
    dx = v[:, None, 0] - v[None, :, 0]
    dy = v[:, None, 1] - v[None, :, 1]
    dz = v[:, None, 2] - v[None, :, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def consistency_matrix(corrs: CorrespondenceSet, index_group, sigma_d: float = 0.1,
                       mode: str = "angle", signed_cosine: bool = False,
                       return_degenerate: bool = False, centered=None):
    """Pairwise consistency scores over one group of correspondences.

    In angle mode vectors are centred on the centroids of the *whole* set,
    not the group. Pass ``centered=(o_hat, p_hat)`` to reuse a centring
    across many groups.

    Returns:
        (K, K) symmetric matrix with unit diagonal and entries in [0, 1];
        with ``return_degenerate`` also a boolean (K, K) mask of pairs that
        had no angular evidence.
    """
    idx = np.asarray(index_group, dtype=np.int64).reshape(-1)
    if len(idx) < 2:
        raise GeometryError("consistency needs a group of at least two correspondences")
    if np.any(idx < 0) or np.any(idx >= len(corrs)):
        raise GeometryError("group index out of range")
    if sigma_d <= 0:
        raise GeometryError("sigma_d must be positive")
    k = len(idx)
    degenerate = np.zeros((k, k), dtype=bool)
    if mode == "angle":
        if centered is None:
            centered = (centroid_and_center(corrs.est_points)[1], centroid_and_center(corrs.points)[1])
        o_hat, p_hat = centered
        cos_o, n_o = _pair_cosines(o_hat[idx])
        cos_p, n_p = _pair_cosines(p_hat[idx])
        if signed_cosine:
            delta = np.abs(cos_o - cos_p)
        else:
            delta = np.abs(np.abs(cos_o) - np.abs(cos_p))
        bad = (n_o <= EPS) | (n_p <= EPS)
        degenerate = bad[:, None] | bad[None, :]
    elif mode == "distance":
        delta = _pair_distances(corrs.est_points[idx]) - _pair_distances(corrs.points[idx])
    else:
        raise GeometryError(f"unknown consistency mode {mode!r}")
    with np.errstate(invalid="ignore"):
        theta = np.maximum(0.0, 1.0 - delta * delta / (sigma_d * sigma_d))
    theta[degenerate] = 0.0
    np.fill_diagonal(theta, 1.0)
    np.fill_diagonal(degenerate, False)
    if return_degenerate:
        return theta, degenerate
    return theta


def consistency_block(corrs: CorrespondenceSet, rows, cols, sigma_d: float = 0.1, mode: str = "angle",
                      signed_cosine: bool = False, centered=None) -> np.ndarray:
    """Rectangular (len(rows), len(cols)) consistency scores between two index groups.

    Same scoring as :func:`consistency_matrix`; pairs with a repeated index score 1.
    """
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    if sigma_d <= 0:
        raise GeometryError("sigma_d must be positive")

    def cos_and_norm(a, b):
        na = np.sqrt((a * a).sum(1))
        nb = np.sqrt((b * b).sum(1))
        with np.errstate(divide="ignore", invalid="ignore"):
            return (a @ b.T) / (na[:, None] * nb[None, :]), na, nb

    if mode == "angle":
        if centered is None:
            centered = (centroid_and_center(corrs.est_points)[1], centroid_and_center(corrs.points)[1])
        o_hat, p_hat = centered
        co, nao, nbo = cos_and_norm(o_hat[rows], o_hat[cols])
        cp, nap, nbp = cos_and_norm(p_hat[rows], p_hat[cols])
        delta = np.abs(co - cp) if signed_cosine else np.abs(np.abs(co) - np.abs(cp))
        bad = ((nao <= EPS) | (nap <= EPS))[:, None] | ((nbo <= EPS) | (nbp <= EPS))[None, :]
    elif mode == "distance":
        do = np.linalg.norm(corrs.est_points[rows][:, None] - corrs.est_points[cols][None], axis=-1)
        dq = np.linalg.norm(corrs.points[rows][:, None] - corrs.points[cols][None], axis=-1)
        delta = do - dq
        bad = np.zeros((len(rows), len(cols)), dtype=bool)
    else:
        raise GeometryError(f"unknown consistency mode {mode!r}")
    with np.errstate(invalid="ignore"):
        theta = np.maximum(0.0, 1.0 - delta * delta / (sigma_d * sigma_d))
    theta[bad] = 0.0
    theta[rows[:, None] == cols[None, :]] = 1.0
    return theta


def estimate_scale(corrs: CorrespondenceSet) -> float:
    """Mean ratio of centroid distances, estimated cloud over point cloud."""
    if len(corrs) < 2:
        raise GeometryError("scale estimation needs at least two correspondences")
    _, o_hat = centroid_and_center(corrs.est_points)
    _, p_hat = centroid_and_center(corrs.points)
    lo = np.linalg.norm(o_hat, axis=1)
    lp = np.linalg.norm(p_hat, axis=1)
    keep = lp > EPS
    if not keep.any():
        raise GeometryError("every reference point sits on its centroid")
    return float(np.mean(lo[keep] / lp[keep]))


def scale_correction(s_est: float, direction: str = "reciprocal") -> float:
    """Factor applied to the centred estimated cloud before feature building.

    ``"reciprocal"`` maps the estimated cloud onto the reference metric frame;
    ``"as_estimated"`` multiplies by the estimate itself.
    """
    if direction == "reciprocal":
        return 1.0 / s_est
    if direction == "as_estimated":
        return s_est
    raise GeometryError(f"unknown scale_ratio_direction {direction!r}")


def estimate_normals(points, k: int = 16, return_degenerate: bool = False):
    """PCA normals over k nearest neighbours, oriented away from the centroid.

    When a normal is perpendicular to the centroid direction (e.g. a plane
    through the centroid) the sign falls back to the first non-zero component
    being positive, z first.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 3:
        raise GeometryError("normal estimation needs k >= 3")
    if n < k + 1:
        raise GeometryError(f"need at least k+1={k + 1} points, got {n}")
    _, nbr = cKDTree(points).query(points, k=k + 1)
    nbhd = points[nbr]
    diff = nbhd - nbhd.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", diff, diff) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-12 * scale
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    _, centred = centroid_and_center(points)
    side = np.einsum("ij,ij->i", normals, centred)
    tol = 1e-9 * np.maximum(np.linalg.norm(centred, axis=1), 1.0)
    flip = side < -tol
    ambiguous = np.abs(side) <= tol
    for axis in (2, 1, 0):
        comp = normals[:, axis]
        hit = ambiguous & (np.abs(comp) > 1e-12)
        flip |= hit & (comp < 0)
        ambiguous &= ~hit
    normals[flip] *= -1.0
    normals[degenerate] = (0.0, 0.0, 1.0)
    if return_degenerate:
        return normals, degenerate
    return normals


FEATURE_DIM = 24


def initial_features(corrs: CorrespondenceSet, s_correction: float, normals_I, normals_P) -> np.ndarray:
    """Per-correspondence 24-d input rows.

    ``s_correction`` multiplies the centred estimated points (see
    :func:`scale_correction`). Row layout: centred coordinates of both sides,
    their half-angle sines and cosines, then the two normals.
    """
    normals_I = np.asarray(normals_I, dtype=np.float64).reshape(-1, 3)
    normals_P = np.asarray(normals_P, dtype=np.float64).reshape(-1, 3)
    if len(normals_I) != len(corrs) or len(normals_P) != len(corrs):
        raise GeometryError("normals must align with correspondences")
    _, o_hat = centroid_and_center(corrs.est_points)
    _, p_hat = centroid_and_center(corrs.points)
    c = np.concatenate([s_correction * o_hat, p_hat], axis=1)
    return np.concatenate([c, np.sin(0.5 * c), np.cos(0.5 * c), normals_I, normals_P], axis=1)


def correspondence_features(corrs: CorrespondenceSet, scale_alignment: bool = True,
                            scale_ratio_direction: str = "reciprocal", normal_k: int = 16) -> np.ndarray:
    """Full feature pipeline: scale estimate, normals on both clouds, rows."""
    factor = 1.0
    if scale_alignment:
        factor = scale_correction(estimate_scale(corrs), scale_ratio_direction)
    k = min(normal_k, len(corrs) - 1)
    if k >= 3:
        n_i = estimate_normals(corrs.est_points, k)
        n_p = estimate_normals(corrs.points, k)
    else:
        n_i = n_p = np.tile([0.0, 0.0, 1.0], (len(corrs), 1))
    return initial_features(corrs, factor, n_i, n_p)


def rotation_about(axis: Sequence[float], angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    Kx = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle_rad) * Kx + (1 - math.cos(angle_rad)) * Kx @ Kx


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
