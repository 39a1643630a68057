import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from angle_i2p.geometry import CameraIntrinsics, CorrespondenceSet
from angle_i2p.synth import SceneConfig, generate_scene

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

K_TEST = CameraIntrinsics(525.0, 525.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def intrinsics():
    return K_TEST


@pytest.fixture
def clean_scene():
    return generate_scene(SceneConfig(n_points=80, seed=11))


@pytest.fixture
def noisy_scene():
    return generate_scene(SceneConfig(n_points=80, seed=12, outlier_ratio=0.6, depth_scale=1.4,
                                      depth_noise_sigma=0.01))


def make_set(points_est, points_ref, K=K_TEST, **kw) -> CorrespondenceSet:
    """Set whose pixels are the projections of ``points_est`` (camera frame, z > 0)."""
    points_est = np.asarray(points_est, dtype=np.float64)
    z = points_est[:, 2]
    pix = np.stack([K.fx * points_est[:, 0] / z + K.cx, K.fy * points_est[:, 1] / z + K.cy], axis=1)
    return CorrespondenceSet(pix, points_ref, z, points_est, K, **kw)


# (criterion number, passed, detail) rows filled in by test_acceptance
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
