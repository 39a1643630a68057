"""Scalar-loop reference implementations used as brute-force oracles.

Everything here is written one element at a time in plain Python. The
arithmetic order mirrors the vectorised code, so results are compared for
exact equality, not within a tolerance.
"""

from __future__ import annotations

import math
from typing import List

import numpy as np

EPS = 1e-12


def ref_centered(points) -> List[List[float]]:
    pts = [[float(x) for x in p] for p in np.asarray(points, dtype=np.float64)]
    n = len(pts)
    c = [math.fsum(p[k] for p in pts) / n for k in range(3)]
    return [[p[0] - c[0], p[1] - c[1], p[2] - c[2]] for p in pts]


def _norm(v) -> float:
    return math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


def _dot(a, b) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def ref_consistency_matrix(est_points, points, group, sigma_d: float, mode: str = "angle",
                           signed_cosine: bool = False) -> np.ndarray:
    """O(K^2) double loop over one group; angle mode centres over the full set."""
    group = [int(i) for i in group]
    k = len(group)
    out = np.zeros((k, k))
    if mode == "angle":
        o = ref_centered(est_points)
        p = ref_centered(points)
    else:
        o = [[float(x) for x in r] for r in np.asarray(est_points, dtype=np.float64)]
        p = [[float(x) for x in r] for r in np.asarray(points, dtype=np.float64)]
    s2 = sigma_d * sigma_d
    for a in range(k):
        for b in range(k):
            i, j = group[a], group[b]
            if a == b:
                out[a, b] = 1.0
                continue
            if mode == "angle":
                ni, nj, mi, mj = _norm(o[i]), _norm(o[j]), _norm(p[i]), _norm(p[j])
                if min(ni, nj, mi, mj) <= EPS:
                    out[a, b] = 0.0
                    continue
                co = _dot(o[i], o[j]) / (ni * nj)
                cp = _dot(p[i], p[j]) / (mi * mj)
                delta = abs(co - cp) if signed_cosine else abs(abs(co) - abs(cp))
            else:
                do = _norm([o[i][0] - o[j][0], o[i][1] - o[j][1], o[i][2] - o[j][2]])
                dq = _norm([p[i][0] - p[j][0], p[i][1] - p[j][1], p[i][2] - p[j][2]])
                delta = do - dq
            out[a, b] = max(0.0, 1.0 - delta * delta / s2)
    return out


def _sq(a, b) -> float:
    dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
    return dx * dx + dy * dy + dz * dz


def ref_knn(queries, points, K: int) -> np.ndarray:
    """For each query, sort every candidate by (squared distance, index)."""
    pts = [[float(x) for x in r] for r in np.asarray(points, dtype=np.float64)]
    out = []
    for q in np.asarray(queries, dtype=np.float64):
        q = [float(x) for x in q]
        ranked = sorted(range(len(pts)), key=lambda j: (_sq(q, pts[j]), j))
        out.append(ranked[:K])
    return np.array(out, dtype=np.int64).reshape(len(out), K)


def ref_fps(points, n: int) -> np.ndarray:
    """O(n * N * |chosen|) farthest-point sampling from the point nearest the centroid."""
    pts = [[float(x) for x in r] for r in np.asarray(points, dtype=np.float64)]
    N = len(pts)
    c = [math.fsum(p[k] for p in pts) / N for k in range(3)]
    start, best = 0, math.inf
    for j in range(N):
        d = _sq(pts[j], c)
        if d < best:
            start, best = j, d
    chosen = [start]
    while len(chosen) < n:
        pick, far = -1, -1.0
        for j in range(N):
            if j in chosen:
                continue
            d = min(_sq(pts[j], pts[s]) for s in chosen)
            if d > far:
                pick, far = j, d
        chosen.append(pick)
    return np.array(chosen, dtype=np.int64)


def ref_attention(Fq, Fkv, theta, p: dict, n_heads: int) -> np.ndarray:
    """Single-group multi-head attention with per-element loops over logits."""
    Fq, Fkv = np.asarray(Fq, dtype=np.float64), np.asarray(Fkv, dtype=np.float64)
    Q = Fq @ p["Wq"] + p["bq"]
    Kk = Fkv @ p["Wk"] + p["bk"]
    V = Fkv @ p["Wv"] + p["bv"]
    d = Q.shape[1]
    dh = d // n_heads
    out = np.zeros((len(Fq), d))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(len(Fq)):
            z = []
            for j in range(len(Fkv)):
                s = float(np.dot(Q[i, sl], Kk[j, sl])) / math.sqrt(dh)
                z.append(s if theta is None else float(theta[i][j]) * s)
            m = max(z)
            e = [math.exp(v - m) for v in z]
            tot = math.fsum(e)
            for j in range(len(Fkv)):
                out[i, sl] += (e[j] / tot) * V[j, sl]
    return out @ p["Wo"] + p["bo"]


def ref_sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def ref_linear_tanh(x, W, b) -> np.ndarray:
    """Row-by-row tanh(x W + b) with explicit accumulation."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((len(x), W.shape[1]))
    for r in range(len(x)):
        for c in range(W.shape[1]):
            out[r, c] = math.tanh(math.fsum(x[r, i] * W[i, c] for i in range(W.shape[0])) + b[c])
    return out


def quaternion_angle_deg(R_a, R_b) -> float:
    """Rotation angle between two rotations via the relative unit quaternion."""
    R = np.asarray(R_a).T @ np.asarray(R_b)
    # Shepperd's method picks the numerically largest component first
    tr = np.trace(R)
    cands = [tr, R[0, 0], R[1, 1], R[2, 2]]
    k = int(np.argmax(cands))
    if k == 0:
        w = math.sqrt(max(1.0 + tr, 0.0)) / 2
        x, y, z = (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w), (R[1, 0] - R[0, 1]) / (4 * w)
    elif k == 1:
        x = math.sqrt(max(1.0 + 2 * R[0, 0] - tr, 0.0)) / 2
        w, y, z = (R[2, 1] - R[1, 2]) / (4 * x), (R[0, 1] + R[1, 0]) / (4 * x), (R[0, 2] + R[2, 0]) / (4 * x)
    elif k == 2:
        y = math.sqrt(max(1.0 + 2 * R[1, 1] - tr, 0.0)) / 2
        w, x, z = (R[0, 2] - R[2, 0]) / (4 * y), (R[0, 1] + R[1, 0]) / (4 * y), (R[1, 2] + R[2, 1]) / (4 * y)
    else:
        z = math.sqrt(max(1.0 + 2 * R[2, 2] - tr, 0.0)) / 2
        w, x, y = (R[1, 0] - R[0, 1]) / (4 * z), (R[0, 2] + R[2, 0]) / (4 * z), (R[1, 2] + R[2, 1]) / (4 * z)
    vec = math.sqrt(x * x + y * y + z * z)
    return math.degrees(2 * math.atan2(vec, abs(w)))
