"""Synthetic indoor scenes with known pose, corrupted depth and injected outliers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .geometry import CameraIntrinsics, CorrespondenceSet, GeometryError, Pose, back_project

DEFAULT_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
LABEL_THRESHOLD = 0.05
_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> Tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seeds(master: int, n: int) -> List[int]:
    state = master & _MASK64
    out = []
    for _ in range(n):
        state, z = splitmix64(state)
        out.append(z)
    return out


@dataclass
class SceneConfig:
    n_points: int = 100
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    pose: Optional[Pose] = None
    depth_scale: float = 1.0
    depth_bias: float = 0.0
    depth_noise_sigma: float = 0.0
    pixel_noise_px: float = 0.0
    outlier_ratio: float = 0.0
    outlier_mode: str = "uniform_resample"
    object_fraction: float = 0.3
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise GeometryError("outlier_ratio must lie in [0, 1)")
        if self.depth_scale <= 0:
            raise GeometryError("depth_scale must be positive")
        if self.outlier_mode not in ("uniform_resample", "pixel_shuffle"):
            raise GeometryError(f"unknown outlier_mode {self.outlier_mode!r}")
        if self.n_points < 1:
            raise GeometryError("n_points must be positive")


@dataclass
class SyntheticScene:
    corrs: CorrespondenceSet
    true_scale: float
    provenance: dict = field(default_factory=dict)


def _random_camera(rng: np.random.Generator, half: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # camera centre inside the room, looking roughly horizontally; world z is up
    centre = rng.uniform(-0.5, 0.5, size=3) * half
    yaw = rng.uniform(0, 2 * math.pi)
    pitch = rng.uniform(-0.25, 0.25)
    fwd = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), math.sin(pitch)])
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R_cw = np.stack([right, down, fwd], axis=1)
    return R_cw, centre


def _ray_box_depth(origin: np.ndarray, dirs: np.ndarray, half: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        hi = (half - origin) / dirs
        lo = (-half - origin) / dirs
    exit_t = np.where(dirs > 0, hi, np.where(dirs < 0, lo, np.inf))
    return exit_t.min(axis=1)


def _structure(config: SceneConfig, rng: np.random.Generator, K: CameraIntrinsics):
    half = np.array([rng.uniform(2.0, 4.0), rng.uniform(2.0, 4.0), rng.uniform(1.2, 1.6)])
    if config.pose is None:
        R_cw, centre = _random_camera(rng, half)
        pose = Pose(R_cw.T, -R_cw.T @ centre)
    else:
        pose = config.pose
        R_cw, centre = pose.rotation.T, -pose.rotation.T @ pose.translation
    n = config.n_points
    pixels = np.stack([rng.uniform(0, K.width, n), rng.uniform(0, K.height, n)], axis=1)
    rays_c = np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(n)], axis=1)
    depth = _ray_box_depth(centre, rays_c @ R_cw.T, half)
    if not np.all(np.isfinite(depth)):
        raise GeometryError("camera is outside the room")
    objects = rng.random(n) < config.object_fraction
    depth = np.where(objects, depth * rng.uniform(0.35, 0.9, n), depth)
    depth = np.maximum(depth, 0.3)
    world = pose.inverse().apply(back_project(pixels, depth, K))
    return pose, pixels, depth, world, half


def _lift_distance(pixel, depth, point_w, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    return np.linalg.norm(back_project(pixel, depth, K) - pose.apply(point_w), axis=-1)


def generate_scene(config: SceneConfig) -> SyntheticScene:
    """Render one scene: exact-projection inliers plus an exact number of outliers."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    K = config.intrinsics
    pose, pixels, depth, world, half = _structure(config, rng, K)
    n = config.n_points
    n_out = int(round(config.outlier_ratio * n))
    if n - n_out < 6:
        raise GeometryError(f"only {n - n_out} inliers; at least 6 are required")
    labels = np.ones(n, dtype=bool)
    out_idx = np.sort(rng.permutation(n)[:n_out])
    labels[out_idx] = False

    points = world.copy()
    if config.pixel_noise_px > 0:
        pixels = pixels + rng.normal(scale=config.pixel_noise_px, size=pixels.shape)
    noisy_depth = depth * (1.0 + config.depth_noise_sigma * rng.normal(size=n))
    noisy_depth = np.maximum(noisy_depth, 1e-3)

    lo, hi = world.min(axis=0), world.max(axis=0)
    resample = list(out_idx)
    if config.outlier_mode == "pixel_shuffle" and n_out >= 2:
        resample = []
        for _ in range(20):
            perm = rng.permutation(n_out)
            if np.all(perm != np.arange(n_out)):
                break
        else:
            perm = np.roll(np.arange(n_out), 1)
        src = out_idx[perm]
        pixels[out_idx] = pixels[src].copy()
        depth[out_idx] = depth[src].copy()
        noisy_depth[out_idx] = noisy_depth[src].copy()
        d = _lift_distance(pixels[out_idx], depth[out_idx], points[out_idx], pose, K)
        resample = list(out_idx[d < LABEL_THRESHOLD])
    for i in resample:
        while True:
            q = rng.uniform(lo, hi)
            if _lift_distance(pixels[i], depth[i], q, pose, K) >= LABEL_THRESHOLD:
                points[i] = q
                break

    s, b = config.depth_scale, config.depth_bias
    est_points = back_project(pixels, s * noisy_depth, K) + np.array([0.0, 0.0, b])
    est_depth = s * noisy_depth + b
    if np.any(est_depth <= 0):
        raise GeometryError("depth bias drives estimated depths non-positive")
    corrs = CorrespondenceSet(pixels, points, est_depth, est_points, K, gt_pose=pose,
                              gt_labels=labels, gt_depth=depth)
    provenance = {"seed": int(config.seed), "room_half_extent": [float(v) for v in half],
                  "n_outliers": n_out}
    return SyntheticScene(corrs, s, provenance)


def config_record(config: SceneConfig) -> dict:
    rec = asdict(config)
    rec["intrinsics"] = [config.intrinsics.fx, config.intrinsics.fy, config.intrinsics.cx,
                         config.intrinsics.cy, config.intrinsics.width, config.intrinsics.height]
    rec["pose"] = None if config.pose is None else (
        config.pose.rotation.reshape(-1).tolist() + config.pose.translation.tolist())
    return rec


def config_from_record(rec: dict) -> SceneConfig:
    rec = dict(rec)
    rec.pop("split", None)
    rec.pop("index", None)
    rec.pop("file", None)
    rec["intrinsics"] = CameraIntrinsics(*rec["intrinsics"][:4], int(rec["intrinsics"][4]), int(rec["intrinsics"][5]))
    if rec.get("pose") is not None:
        vals = rec["pose"]
        rec["pose"] = Pose(np.reshape(vals[:9], (3, 3)), vals[9:], check=False)
    return SceneConfig(**rec)


def split_name(i: int, n: int, single_as_test: bool = False) -> str:
    if n == 1 and single_as_test:
        return "test"
    n_train = int(round(0.70 * n))
    n_val = int(round(0.15 * n))
    if i < n_train:
        return "train"
    if i < n_train + n_val:
        return "val"
    return "test"


def make_dataset(n_scenes: int, template: Optional[SceneConfig] = None, seed: int = 0,
                 scale_range: Optional[Tuple[float, float]] = None,
                 single_as_test: bool = False) -> Tuple[List[SyntheticScene], List[dict]]:
    """Scenes with per-scene seeds derived from ``seed`` via splitmix64.

    ``scale_range`` draws each scene's depth scale uniformly from the range
    (using the scene seed); otherwise the template's scale is used.
    Returns the scenes and a manifest with one record per scene.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    template = SceneConfig() if template is None else template
    scenes, manifest = [], []
    for i, sd in enumerate(derive_seeds(seed, n_scenes)):
        cfg = replace(template, seed=int(sd))
        if scale_range is not None:
            lo, hi = scale_range
            cfg = replace(cfg, depth_scale=float(np.random.default_rng([sd, 1]).uniform(lo, hi)))
        scenes.append(generate_scene(cfg))
        rec = config_record(cfg)
        rec["index"] = i
        rec["split"] = split_name(i, n_scenes, single_as_test)
        manifest.append(rec)
    return scenes, manifest


def manifest_lines(manifest: List[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in manifest)


def parse_manifest(text: str) -> List[dict]:
    return [json.loads(ln) for ln in text.splitlines() if ln.strip()]
