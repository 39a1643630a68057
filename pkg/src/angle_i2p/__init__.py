"""Outlier rejection for image-to-point-cloud correspondences.

Angle-based spatial consistency, a consistency-reweighted hierarchical
attention classifier, and a PnP-RANSAC evaluation harness.
"""

from .estimator import (AngleI2PClassifier, ThetaVotingFilter, check_correspondence_set, check_scenes,
                        filter_correspondences, theta_votes)
from .geometry import (CameraIntrinsics, CorrespondenceSet, GeometryError, Pose, back_project,
                       consistency_matrix, estimate_scale, project)
from .graph import HierGraph, build_graphs
from .io import load_correspondences, save_correspondences
from .pose import MetricsReport, evaluate, label_inliers, solve_pnp_ransac
from .synth import SceneConfig, generate_scene, make_dataset

__version__ = "0.1.0"

__all__ = [
    "AngleI2PClassifier", "ThetaVotingFilter", "check_correspondence_set", "check_scenes",
    "filter_correspondences", "theta_votes", "CameraIntrinsics", "CorrespondenceSet", "GeometryError",
    "Pose", "back_project", "consistency_matrix", "estimate_scale", "project", "HierGraph",
    "build_graphs", "load_correspondences", "save_correspondences", "MetricsReport", "evaluate",
    "label_inliers", "solve_pnp_ransac", "SceneConfig", "generate_scene", "make_dataset",
]
