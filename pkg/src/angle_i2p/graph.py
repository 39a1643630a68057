"""Node sampling, k-NN grouping and the local/global graphs with their consistency matrices."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (CorrespondenceSet, GeometryError, centroid_and_center,
                       consistency_matrix)

logger = logging.getLogger(__name__)

GRAPH_MAGIC = b"AGHG1"


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def farthest_point_sampling(points: np.ndarray, n: int) -> np.ndarray:
    """Indices of ``n`` points chosen by FPS, starting at the point nearest the centroid.

    Ties go to the lower index.
    """
    points = np.asarray(points, dtype=np.float64)
    if n > len(points):
        raise GeometryError(f"cannot sample {n} of {len(points)} points")
    if n < 1:
        raise GeometryError("need at least one sample")
    c, _ = centroid_and_center(points)
    start = int(np.argmin(_sq_dists(points, c[None, :])[:, 0]))
    order = [start]
    min_d = _sq_dists(points, points[start][None, :])[:, 0]
    min_d[start] = -1.0
    for _ in range(n - 1):
        nxt = int(np.argmax(min_d))
        order.append(nxt)
        min_d = np.minimum(min_d, _sq_dists(points, points[nxt][None, :])[:, 0])
        min_d[order] = -1.0
    return np.array(order, dtype=np.int64)


@dataclass
class NodeSet:
    indices: np.ndarray
    nodes: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.indices)


def sample_nodes(corrs: CorrespondenceSet, V: int, seed: int = 0) -> NodeSet:
    """Pick V anchor nodes among the point-cloud side of ``corrs``.

    FPS is deterministic; ``seed`` is accepted so randomised samplers can share
    the signature and does not change the result.
    """
    if V > len(corrs):
        raise GeometryError(f"V={V} exceeds the {len(corrs)} correspondences")
    idx = farthest_point_sampling(corrs.points, V)
    return NodeSet(idx, corrs.points[idx])


def knn_indices(queries: np.ndarray, points: np.ndarray, K: int) -> np.ndarray:
    if K > len(points):
        raise GeometryError(f"K={K} exceeds the {len(points)} candidate points")
    if K < 1:
        raise GeometryError("K must be positive")
    d2 = _sq_dists(np.asarray(queries, dtype=np.float64), np.asarray(points, dtype=np.float64))
    return np.argsort(d2, axis=1, kind="stable")[:, :K].astype(np.int64)


def knn_assign(nodes: NodeSet, corrs: CorrespondenceSet, K: int) -> np.ndarray:
    """(V, K) indices of each node's K nearest correspondences, lower index wins ties."""
    return knn_indices(nodes.nodes, corrs.points, K)


def select_global_keypoints(corrs: CorrespondenceSet, M: int, seed: int = 0,
                            saliency: Optional[np.ndarray] = None) -> np.ndarray:
    """M representative correspondence indices.

    With ``saliency`` scores (e.g. from a learned detector) the top-M scores are
    taken; otherwise FPS over the point-cloud side stands in for them.
    """
    if M > len(corrs):
        raise GeometryError(f"M={M} exceeds the {len(corrs)} correspondences")
    if saliency is not None:
        saliency = np.asarray(saliency, dtype=np.float64)
        return np.argsort(-saliency, kind="stable")[:M].astype(np.int64)
    return farthest_point_sampling(corrs.points, M)


@dataclass
class HierGraph:
    node_indices: np.ndarray      # (V,)
    local_groups: np.ndarray      # (V, K) correspondence indices
    global_keypoints: np.ndarray  # (M,) correspondence indices
    global_groups: np.ndarray     # (V, Kg) indices into global_keypoints
    theta_local: np.ndarray       # (V, K, K)
    theta_global: np.ndarray      # (V, Kg, Kg)

    @property
    def global_corr_groups(self) -> np.ndarray:
        """Global groups expressed as correspondence indices."""
        return self.global_keypoints[self.global_groups]

    def to_bytes(self) -> bytes:
        V, K = self.local_groups.shape
        M = len(self.global_keypoints)
        Kg = self.global_groups.shape[1]
        parts = [GRAPH_MAGIC, struct.pack("<4q", V, K, M, Kg)]
        for arr in (self.node_indices, self.local_groups, self.global_keypoints, self.global_groups):
            parts.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        for arr in (self.theta_local, self.theta_global):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "HierGraph":
        if blob[:5] != GRAPH_MAGIC:
            raise ValueError("not an AGHG1 graph blob")
        V, K, M, Kg = struct.unpack_from("<4q", blob, 5)
        off = 5 + 32

        def take(count, dtype, shape):
            nonlocal off
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
            off += 8 * count
            return arr.astype(np.int64 if dtype == "<i8" else np.float64)

        nodes = take(V, "<i8", (V,))
        local = take(V * K, "<i8", (V, K))
        keys = take(M, "<i8", (M,))
        glob = take(V * Kg, "<i8", (V, Kg))
        tl = take(V * K * K, "<f8", (V, K, K))
        tg = take(V * Kg * Kg, "<f8", (V, Kg, Kg))
        if off != len(blob):
            raise ValueError("trailing bytes in graph blob")
        return cls(nodes, local, keys, glob, tl, tg)


def default_node_count(n: int) -> int:
    return max(1, math.ceil(n / 16))


def build_graphs(corrs: CorrespondenceSet, nodes: Optional[NodeSet] = None, K: int = 32, M: int = 100,
                 sigma_d: float = 0.1, mode: str = "angle", k_global: Optional[int] = None,
                 seed: int = 0, signed_cosine: bool = False,
                 saliency: Optional[np.ndarray] = None) -> HierGraph:
    """Assemble local and global groups with their consistency matrices.

    ``k_global`` defaults to ``K``. Raises when K, M or k_global exceed what
    the set can supply; callers that want clamping do it themselves.
    """
    if nodes is None:
        nodes = sample_nodes(corrs, default_node_count(len(corrs)), seed)
    k_global = K if k_global is None else k_global
    if k_global > M:
        raise GeometryError(f"k_global={k_global} exceeds M={M}")
    local = knn_assign(nodes, corrs, K)
    keys = select_global_keypoints(corrs, M, seed, saliency=saliency)
    glob = knn_indices(nodes.nodes, corrs.points[keys], k_global)

    centered = None
    if mode == "angle":
        centered = (centroid_and_center(corrs.est_points)[1], centroid_and_center(corrs.points)[1])
    theta_l = np.stack([consistency_matrix(corrs, g, sigma_d, mode, signed_cosine, centered=centered)
                        for g in local])
    theta_g = np.stack([consistency_matrix(corrs, keys[g], sigma_d, mode, signed_cosine, centered=centered)
                        for g in glob])
    graph = HierGraph(nodes.indices, local, keys, glob, theta_l, theta_g)
    uncovered = len(corrs) - len(np.unique(local))
    if uncovered and nodes.node_count * K >= len(corrs):
        logger.debug("%d correspondences fall outside every local group", uncovered)
    return graph
