"""Invariant suites checked against brute-force oracles; backs the ``selftest`` command."""

from __future__ import annotations

import time
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from .geometry import CorrespondenceSet, Pose, back_project, consistency_matrix, random_rotation
from .graph import knn_assign, sample_nodes
from .net import (ForwardPass, Model, ModelConfig, TrainConfig, attention_forward, loss_and_grad,
                  loss_from_logits, prepare_scene)
from .pose import rotation_error, solve_pnp_ransac
from .reference import quaternion_angle_deg, ref_attention, ref_consistency_matrix, ref_fps, ref_knn
from .synth import SceneConfig, generate_scene


class SuiteResult(NamedTuple):
    name: str
    passed: bool
    detail: str
    seconds: float


def random_set(rng: np.random.Generator, n: int) -> CorrespondenceSet:
    """Unstructured correspondences: random points with random depths, for invariance checks."""
    from .synth import DEFAULT_INTRINSICS as K
    pix = np.stack([rng.uniform(0, K.width, n), rng.uniform(0, K.height, n)], axis=1)
    depth = rng.uniform(0.5, 6.0, n)
    return CorrespondenceSet.from_depths(pix, rng.normal(scale=2.0, size=(n, 3)), depth, K)


def scale_invariance_error(trials: int = 1000, seed: int = 0, n_max: int = 40) -> float:
    """Worst max-abs change of the angle consistency matrix under o -> s*o + t."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(3, n_max + 1))
        c = random_set(rng, n)
        s = rng.uniform(0.1, 10.0)
        t = rng.uniform(-5.0, 5.0, 3)
        moved = c.with_est_points(s * c.est_points + t)
        idx = np.arange(n)
        diff = np.abs(consistency_matrix(c, idx) - consistency_matrix(moved, idx)).max()
        worst = max(worst, float(diff))
    return worst


def oracle_mismatches(instances: int = 100, seed: int = 0, n_max: int = 200) -> int:
    """Count of instances where consistency (both modes), KNN or FPS disagree with the loops."""
    bad = 0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(2, n_max + 1))
        c = generate_scene(SceneConfig(n_points=max(n, 20), outlier_ratio=0.5, depth_scale=rng.uniform(0.5, 2.5),
                                       depth_noise_sigma=0.01, seed=int(rng.integers(2**31)))).corrs
        c = c.subset(np.arange(n))
        group = rng.choice(n, size=min(n, 32), replace=False)
        for mode in ("angle", "distance"):
            got = consistency_matrix(c, group, 0.1, mode)
            bad += not np.array_equal(got, ref_consistency_matrix(c.est_points, c.points, group, 0.1, mode))
        V = max(1, -(-n // 16))
        nodes = sample_nodes(c, V)
        bad += not np.array_equal(nodes.indices, ref_fps(c.points, V))
        bad += not np.array_equal(knn_assign(nodes, c, min(32, n)), ref_knn(nodes.nodes, c.points, min(32, n)))
    return bad


def theta_identity_error(trials: int = 20, seed: int = 0) -> float:
    """Max-abs gap between all-ones reweighting and plain attention."""
    rng = np.random.default_rng(seed)
    model = Model(ModelConfig(d_model=16, n_heads=4, n_blocks=1), seed=seed)
    p = model.attention_params(0, "self_local")
    worst = 0.0
    for _ in range(trials):
        g, k = int(rng.integers(1, 4)), int(rng.integers(2, 12))
        F = rng.normal(size=(g, k, 16))
        a, _ = attention_forward(p, F, F, np.ones((g, k, k)), 4)
        b, _ = attention_forward(p, F, F, None, 4)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def attention_oracle_error(trials: int = 10, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    model = Model(ModelConfig(d_model=8, n_heads=2, n_blocks=1), seed=seed)
    p = model.attention_params(0, "self_local")
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(2, 9))
        F = rng.normal(size=(k, 8))
        th = rng.uniform(size=(k, k))
        got, _ = attention_forward(p, F[None], F[None], th[None], 2)
        worst = max(worst, float(np.abs(got[0] - ref_attention(F, F, th, p, 2)).max()))
    return worst


def softmax_row_error(seed: int = 0) -> float:
    """Largest |row sum - 1| over every attention layer of a forward pass."""
    c = generate_scene(SceneConfig(n_points=40, outlier_ratio=0.5, seed=seed)).corrs
    scene = prepare_scene(c, K=8, M=16, k_global=8)
    fp = ForwardPass(Model(ModelConfig(d_model=16, n_heads=2, n_blocks=2), seed=seed), scene, check_softmax=True)
    return float(fp.max_row_error)


def gradient_check(seed: int = 3, loss: str = "bce", cross_theta: str = "ones", h: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Reduced model: d=8, H=2, L=1 on a 12-correspondence scene. Biases are
    perturbed away from zero so their paths are exercised. Relative error is
    |a - f| / max(|a|, |f|, floor).
    """
    c = generate_scene(SceneConfig(n_points=12, seed=seed, outlier_ratio=0.5, depth_noise_sigma=0.01)).corrs
    scene = prepare_scene(c, K=5, M=8, k_global=4, V=3, cross_theta=cross_theta, sigma_d=0.5)
    model = Model(ModelConfig(d_model=8, n_heads=2, n_blocks=1), seed=1)
    rng = np.random.default_rng(seed)
    for k, v in model.params.items():
        if v.ndim == 1:
            v += rng.normal(scale=0.3, size=v.shape)
    cfg = TrainConfig(loss=loss)
    _, grads = loss_and_grad(model, [scene], cfg)

    def f():
        return loss_from_logits(ForwardPass(model, scene).logits, scene.labels, cfg)[0]

    worst = 0.0
    for name, p in model.params.items():
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = f()
            p[i] = old - h
            down = f()
            p[i] = old
            num = (up - down) / (2 * h)
            ana = grads[name][i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
    return worst


def pnp_exact_error(seed: int = 0) -> float:
    """Rotation error (deg) from noiseless all-inlier input with a single RANSAC iteration."""
    c = generate_scene(SceneConfig(n_points=20, seed=seed)).corrs
    res = solve_pnp_ransac(c, iterations=1, seed=seed)
    if not res.success:
        return float("inf")
    return rotation_error(res.pose.rotation, c.gt_pose.rotation)


def rotation_oracle_error(trials: int = 200, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        a, b = random_rotation(rng), random_rotation(rng)
        worst = max(worst, abs(rotation_error(a, b) - quaternion_angle_deg(a, b)))
    return worst


def _suites(quick: bool):
    n = 100 if quick else 1000
    return [
        ("scale_invariance", lambda: scale_invariance_error(n), lambda v: v < 1e-9),
        ("oracle_equivalence", lambda: oracle_mismatches(20 if quick else 100), lambda v: v == 0),
        ("theta_identity", theta_identity_error, lambda v: v < 1e-12),
        ("attention_loop_oracle", attention_oracle_error, lambda v: v < 1e-12),
        ("softmax_rows", softmax_row_error, lambda v: v < 1e-12),
        ("gradient_check", gradient_check, lambda v: v < 1e-4),
        ("pnp_exact", pnp_exact_error, lambda v: v < 1e-6),
        ("rotation_oracle", rotation_oracle_error, lambda v: v < 1e-9),
    ]


def run_selftest(quick: bool = False, log: Optional[Callable[[str], None]] = None) -> List[SuiteResult]:
    """Run every suite; each reports its measured value next to pass/fail."""
    results = []
    for name, run, ok in _suites(quick):
        t0 = time.perf_counter()
        try:
            value = run()
            passed, detail = bool(ok(value)), f"value={value:.3g}"
        except Exception as exc:  # a crashing suite is a failing suite
            passed, detail = False, f"error: {exc!r}"
        res = SuiteResult(name, passed, detail, time.perf_counter() - t0)
        results.append(res)
        if log is not None:
            log(f"{'PASS' if passed else 'FAIL'} {name} {detail}")
    return results
