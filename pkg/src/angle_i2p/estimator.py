"""Estimator-style front end: fit a correspondence classifier, score, filter.

Each sample is a whole :class:`CorrespondenceSet` (one scene), so ``X`` is a
list of sets rather than a 2-D array. Per-scene outputs come back as lists.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import CorrespondenceSet, GeometryError, centroid_and_center, consistency_matrix
from .net import (History, Model, ModelConfig, SceneData, TrainConfig, model_from_bytes,
                  model_to_bytes, predict_scores, prepare_scene, train)

logger = logging.getLogger(__name__)

PIPELINE_KEYS = ("sigma_d", "mode", "K", "M", "k_global", "V", "scale_alignment",
                 "scale_ratio_direction", "cross_theta", "signed_cosine")


def check_correspondence_set(corrs, min_size: int = 2, need_labels: bool = False) -> CorrespondenceSet:
    """Reject anything that is not a finite, large-enough CorrespondenceSet."""
    if not isinstance(corrs, CorrespondenceSet):
        raise TypeError(f"expected CorrespondenceSet, got {type(corrs).__name__}")
    if len(corrs) < min_size:
        raise GeometryError(f"set holds {len(corrs)} correspondences; at least {min_size} required")
    for name in ("pixels", "points", "est_depth", "est_points"):
        if not np.all(np.isfinite(getattr(corrs, name))):
            raise GeometryError(f"non-finite values in {name}")
    if need_labels and corrs.gt_labels is None:
        raise GeometryError("ground-truth labels are required")
    return corrs


def check_scenes(X, need_labels: bool = False) -> List[CorrespondenceSet]:
    if isinstance(X, CorrespondenceSet):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("no scenes supplied")
    return [check_correspondence_set(c, need_labels=need_labels) for c in X]


def check_scores(corrs: CorrespondenceSet, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(corrs):
        raise ValueError(f"{len(scores)} scores for {len(corrs)} correspondences")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    return scores


def filter_correspondences(corrs: CorrespondenceSet, scores, tau: float) -> CorrespondenceSet:
    """Keep correspondences with score >= tau, in their original order.

    An empty result is returned as an empty set whose ``warnings`` list says
    so; PnP downstream reports it as a failure.
    """
    scores = check_scores(corrs, scores)
    out = corrs.subset(scores >= tau)
    if len(out) == 0:
        out.warnings.append(f"filter at tau={tau:g} removed every correspondence")
    return out


class AngleI2PClassifier(TransformerMixin, BaseEstimator):
    """Per-correspondence inlier classifier over consistency-reweighted attention.

    Args:
        d_model, n_heads, n_blocks: network width, heads and (self, cross) block count.
        reweight: multiply consistency weights into attention logits; False
            reproduces plain attention exactly.
        cross_attention: include the local/global cross layers.
        sigma_d: consistency bandwidth.
        mode: ``"angle"`` or ``"distance"`` consistency.
        K, M, k_global: local group size, global keypoint count, global group size.
        V: node count; None means ceil(N / 16). All four are clamped to N.
        scale_alignment: rescale the estimated cloud by the estimated scale before features.
        tau: score threshold used by ``predict`` and ``transform``.
        random_state: seeds initialization and epoch shuffling.
    """

    def __init__(self, d_model: int = 128, n_heads: int = 4, n_blocks: int = 3, reweight: bool = True,
                 cross_attention: bool = True, mask_mode: bool = False, sigma_d: float = 0.1,
                 mode: str = "angle", K: int = 32, M: int = 100, k_global: Optional[int] = None,
                 V: Optional[int] = None, scale_alignment: bool = True, scale_ratio_direction: str = "reciprocal",
                 cross_theta: str = "ones", signed_cosine: bool = False, learning_rate: float = 1e-4,
                 weight_decay: float = 1e-6, epochs: int = 50, batch_size: int = 1, loss: str = "bce",
                 tau: float = 0.2, random_state: int = 0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.reweight = reweight
        self.cross_attention = cross_attention
        self.mask_mode = mask_mode
        self.sigma_d = sigma_d
        self.mode = mode
        self.K = K
        self.M = M
        self.k_global = k_global
        self.V = V
        self.scale_alignment = scale_alignment
        self.scale_ratio_direction = scale_ratio_direction
        self.cross_theta = cross_theta
        self.signed_cosine = signed_cosine
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss = loss
        self.tau = tau
        self.random_state = random_state

    # -- configuration -------------------------------------------------------
    def _validate_params(self):
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be positive")
        if self.mode not in ("angle", "distance"):
            raise ValueError(f"mode must be 'angle' or 'distance', got {self.mode!r}")
        if self.cross_theta not in ("ones", "geometric"):
            raise ValueError(f"cross_theta must be 'ones' or 'geometric', got {self.cross_theta!r}")
        if self.K < 1 or self.M < 1 or (self.V is not None and self.V < 1):
            raise ValueError("K, M and V must be positive")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_heads=self.n_heads, n_blocks=self.n_blocks,
                           reweight=self.reweight, cross_attention=self.cross_attention,
                           mask_mode=self.mask_mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state,
                           tau=self.tau, sigma_d=self.sigma_d, loss=self.loss)

    def pipeline_params(self) -> dict:
        return {k: getattr(self, k) for k in PIPELINE_KEYS}

    def prepare(self, corrs: CorrespondenceSet) -> SceneData:
        """Features and graphs for one scene under this estimator's settings."""
        return prepare_scene(corrs, sigma_d=self.sigma_d, mode=self.mode, K=self.K, M=self.M,
                             k_global=self.k_global, V=self.V, scale_alignment=self.scale_alignment,
                             scale_ratio_direction=self.scale_ratio_direction,
                             cross_theta=self.cross_theta, seed=self.random_state,
                             signed_cosine=self.signed_cosine)

    # -- estimator API -------------------------------------------------------
    def fit(self, X, y=None, X_val=None, callback=None):
        """Train on labelled scenes.

        Args:
            X: sequence of CorrespondenceSet with ``gt_labels``.
            y: ignored; labels travel inside each set.
            X_val: optional labelled scenes for the per-epoch validation IR.
            callback: called as ``callback(epoch, loss, val_ir)``.

        Returns:
            self
        """
        self._validate_params()
        scenes = check_scenes(X, need_labels=True)
        data = [self.prepare(c) for c in scenes]
        val = [self.prepare(c) for c in check_scenes(X_val, need_labels=True)] if X_val else None
        model = Model(self.model_config(), seed=self.random_state)
        model.pipeline = self.pipeline_params()
        self.model_, self.history_ = train(model, data, self.train_config(), val=val, callback=callback)
        return self

    def decision_scores(self, X) -> List[np.ndarray]:
        """Per-scene inlier scores in (0, 1)."""
        check_is_fitted(self, "model_")
        self._validate_params()
        return [predict_scores(self.model_, self.prepare(c)) for c in check_scenes(X)]

    def predict_proba(self, X) -> List[np.ndarray]:
        """Per-scene (n, 2) arrays of [outlier, inlier] probabilities."""
        return [np.stack([1.0 - s, s], axis=1) for s in self.decision_scores(X)]

    def predict(self, X) -> List[np.ndarray]:
        return [s >= self.tau for s in self.decision_scores(X)]

    def transform(self, X) -> List[CorrespondenceSet]:
        scenes = check_scenes(X)
        return [filter_correspondences(c, s, self.tau) for c, s in zip(scenes, self.decision_scores(scenes))]

    def score(self, X, y=None) -> float:
        """Mean post-filter inlier ratio (by ground-truth labels); empty outputs count as 0."""
        irs = []
        for f in self.transform(check_scenes(X, need_labels=True)):
            irs.append(float(f.gt_labels.mean()) if len(f) else 0.0)
        return float(np.mean(irs))

    # -- persistence ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        check_is_fitted(self, "model_")
        return model_to_bytes(self.model_)

    @classmethod
    def from_bytes(cls, blob: bytes, **overrides) -> "AngleI2PClassifier":
        """Rebuild a fitted estimator from an AGNN1 checkpoint."""
        model = model_from_bytes(blob)
        c = model.config
        params = dict(d_model=c.d_model, n_heads=c.n_heads, n_blocks=c.n_blocks, reweight=c.reweight,
                      cross_attention=c.cross_attention, mask_mode=c.mask_mode)
        params.update({k: v for k, v in model.pipeline.items() if k in PIPELINE_KEYS})
        params.update(overrides)
        est = cls(**params)
        est.model_ = model
        est.history_ = History()
        return est


def theta_votes(corrs: CorrespondenceSet, sigma_d: float = 0.1, mode: str = "angle") -> np.ndarray:
    """Mean pairwise consistency of each correspondence against the whole set."""
    idx = np.arange(len(corrs))
    centered = None
    if mode == "angle":
        centered = (centroid_and_center(corrs.est_points)[1], centroid_and_center(corrs.points)[1])
    theta = consistency_matrix(corrs, idx, sigma_d, mode, centered=centered)
    return (theta.sum(axis=1) - 1.0) / max(len(corrs) - 1, 1)


class ThetaVotingFilter(TransformerMixin, BaseEstimator):
    """Training-free filter: keep the best-supported fraction of correspondences.

    Each correspondence is scored by its mean consistency with all others;
    the top ``retention`` fraction survives (ties to the lower index). A fixed
    retention makes different consistency modes comparable.
    """

    def __init__(self, mode: str = "angle", sigma_d: float = 0.1, retention: float = 0.3):
        self.mode = mode
        self.sigma_d = sigma_d
        self.retention = retention

    def fit(self, X=None, y=None):
        if not 0 < self.retention <= 1:
            raise ValueError("retention must lie in (0, 1]")
        if self.mode not in ("angle", "distance"):
            raise ValueError(f"mode must be 'angle' or 'distance', got {self.mode!r}")
        self.fitted_ = True
        return self

    def decision_scores(self, X) -> List[np.ndarray]:
        return [theta_votes(c, self.sigma_d, self.mode) for c in check_scenes(X)]

    def keep_count(self, n: int) -> int:
        return max(1, int(round(self.retention * n)))

    def predict(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "fitted_")
        masks = []
        for votes in self.decision_scores(X):
            order = np.argsort(-votes, kind="stable")[:self.keep_count(len(votes))]
            mask = np.zeros(len(votes), dtype=bool)
            mask[order] = True
            masks.append(mask)
        return masks

    def transform(self, X) -> List[CorrespondenceSet]:
        scenes = check_scenes(X)
        return [c.subset(m) for c, m in zip(scenes, self.predict(scenes))]


def mean_inlier_ratio(sets: Sequence[CorrespondenceSet]) -> float:
    return float(np.mean([s.gt_labels.mean() if len(s) else 0.0 for s in sets]))
