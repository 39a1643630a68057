"""Consistency-reweighted hierarchical attention classifier in plain numpy.

Forward passes cache what the backward pass needs; every gradient is
written out by hand so the model trains without an autodiff framework.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import (FEATURE_DIM, CorrespondenceSet, GeometryError, centroid_and_center,
                       consistency_block, correspondence_features)
from .graph import HierGraph, build_graphs, default_node_count, sample_nodes

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"AGNN1"
ATTENTION_KINDS = ("self_local", "self_global", "cross_lg", "cross_gl")
MASK_FLOOR = 1e-6


class NumericalError(FloatingPointError):
    """Non-finite values appeared inside a named layer."""


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 3
    in_dim: int = FEATURE_DIM
    reweight: bool = True
    cross_attention: bool = True
    mask_mode: bool = False

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be non-negative")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    tau: float = 0.2
    sigma_d: float = 0.1
    loss: str = "bce"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.loss not in ("bce", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    d, h = cfg.d_model, cfg.d_model // 2
    shapes = OrderedDict()
    shapes["embed.W1"] = (cfg.in_dim, d)
    shapes["embed.b1"] = (d,)
    shapes["embed.W2"] = (d, d)
    shapes["embed.b2"] = (d,)
    for layer in range(cfg.n_blocks):
        for kind in ATTENTION_KINDS:
            for proj in "qkvo":
                shapes[f"block{layer}.{kind}.W{proj}"] = (d, d)
                shapes[f"block{layer}.{kind}.b{proj}"] = (d,)
    shapes["head.W1"] = (d, h)
    shapes["head.b1"] = (h,)
    shapes["head.W2"] = (h, 1)
    shapes["head.b2"] = (1,)
    return shapes


class Model:
    """Parameter store plus architecture switches."""

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.config.validate()
        # preprocessing settings the checkpoint must carry so inference rebuilds identical inputs
        self.pipeline: dict = {}
        rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape in param_shapes(self.config).items():
            if len(shape) == 2:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                self.params[name] = rng.uniform(-limit, limit, size=shape)
            else:
                self.params[name] = np.zeros(shape)

    def copy(self) -> "Model":
        out = Model.__new__(Model)
        out.config = ModelConfig(**asdict(self.config))
        out.pipeline = dict(self.pipeline)
        out.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        return out

    def zeros_like(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())

    def attention_params(self, layer: int, kind: str) -> dict:
        pre = f"block{layer}.{kind}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}


# ---------------------------------------------------------------------------
# attention


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    g, k, d = x.shape
    return x.reshape(g, k, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    g, h, k, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(g, k, h * dh)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_finite(x: np.ndarray, where: str):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {where}")


def attention_forward(p: dict, Fq: np.ndarray, Fkv: np.ndarray, theta: Optional[np.ndarray],
                      n_heads: int, mask_mode: bool = False, name: str = "attention"):
    """Multi-head attention with consistency-scaled logits over G independent groups.

    Args:
        p: projection weights ``Wq, bq, Wk, bk, Wv, bv, Wo, bo``.
        Fq: (G, Kq, d) query features.
        Fkv: (G, Kk, d) key/value features.
        theta: (G, Kq, Kk) weights multiplied into the logits, or None for
            plain attention. A zero weight neutralises a logit to 0 rather
            than removing the key; ``mask_mode`` removes keys whose weight is
            below 1e-6 instead (rows that would lose every key are left alone).

    Returns:
        (G, Kq, d) output and a cache for :func:`attention_backward`.
    """
    d = Fq.shape[-1]
    dh = d // n_heads
    Q = Fq @ p["Wq"] + p["bq"]
    K = Fkv @ p["Wk"] + p["bk"]
    V = Fkv @ p["Wv"] + p["bv"]
    Qh, Kh, Vh = _split_heads(Q, n_heads), _split_heads(K, n_heads), _split_heads(V, n_heads)
    S = Qh @ Kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
    Z = S if theta is None else theta[:, None] * S
    masked = None
    if mask_mode and theta is not None:
        masked = theta < MASK_FLOOR
        masked &= ~masked.all(axis=-1, keepdims=True)
        Z = np.where(masked[:, None], -np.inf, Z)
    A = _softmax(Z)
    Oh = A @ Vh
    O = _merge_heads(Oh)
    out = O @ p["Wo"] + p["bo"]
    _check_finite(out, name)
    cache = dict(Fq=Fq, Fkv=Fkv, theta=theta, masked=masked, Qh=Qh, Kh=Kh, Vh=Vh, A=A, O=O, dh=dh,
                 n_heads=n_heads)
    return out, cache


def attention_backward(p: dict, cache: dict, dout: np.ndarray):
    """Returns (dFq, dFkv, grads) for :func:`attention_forward`."""
    h, dh = cache["n_heads"], cache["dh"]
    Fq, Fkv, A, O = cache["Fq"], cache["Fkv"], cache["A"], cache["O"]
    g = {}
    flat = lambda x: x.reshape(-1, x.shape[-1])
    g["Wo"] = flat(O).T @ flat(dout)
    g["bo"] = dout.sum(axis=(0, 1))
    dOh = _split_heads(dout @ p["Wo"].T, h)
    dA = dOh @ cache["Vh"].transpose(0, 1, 3, 2)
    dVh = A.transpose(0, 1, 3, 2) @ dOh
    dZ = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    theta = cache["theta"]
    dS = dZ if theta is None else theta[:, None] * dZ
    if cache["masked"] is not None:
        dS = np.where(cache["masked"][:, None], 0.0, dS)
    dQh = dS @ cache["Kh"] / math.sqrt(dh)
    dKh = dS.transpose(0, 1, 3, 2) @ cache["Qh"] / math.sqrt(dh)
    dQ, dK, dV = _merge_heads(dQh), _merge_heads(dKh), _merge_heads(dVh)
    g["Wq"] = flat(Fq).T @ flat(dQ)
    g["bq"] = dQ.sum(axis=(0, 1))
    g["Wk"] = flat(Fkv).T @ flat(dK)
    g["bk"] = dK.sum(axis=(0, 1))
    g["Wv"] = flat(Fkv).T @ flat(dV)
    g["bv"] = dV.sum(axis=(0, 1))
    dFq = dQ @ p["Wq"].T
    dFkv = dK @ p["Wk"].T + dV @ p["Wv"].T
    return dFq, dFkv, g


def reweighted_attention(Fq, Fkv, theta, model: Model, layer: int, kind: str = "self_local",
                         head_mask=None) -> np.ndarray:
    """Single-group convenience wrapper: (K, d) features and a (K, K') weight matrix.

    ``theta=None`` (or a model built with ``reweight=False``) gives plain attention.
    """
    if head_mask is not None:
        raise NotImplementedError("head masking is not supported")
    if not model.config.reweight:
        theta = None
    th = None if theta is None else np.asarray(theta, dtype=np.float64)[None]
    out, _ = attention_forward(model.attention_params(layer, kind), np.asarray(Fq)[None],
                               np.asarray(Fkv)[None], th, model.config.n_heads,
                               model.config.mask_mode, f"block{layer}.{kind}")
    return out[0]


# ---------------------------------------------------------------------------
# per-scene inputs


@dataclass
class SceneData:
    """Everything the network consumes for one correspondence set."""

    features: np.ndarray
    graph: HierGraph
    labels: Optional[np.ndarray] = None
    theta_cross: Optional[np.ndarray] = None  # (V, K, Kg) local-to-global weights

    @property
    def n(self) -> int:
        return len(self.features)


def prepare_scene(corrs: CorrespondenceSet, sigma_d: float = 0.1, mode: str = "angle", K: int = 32,
                  M: int = 100, k_global: Optional[int] = None, V: Optional[int] = None,
                  scale_alignment: bool = True, scale_ratio_direction: str = "reciprocal",
                  cross_theta: str = "ones", seed: int = 0, signed_cosine: bool = False) -> SceneData:
    """Features and graphs for one set; K, M, k_global and V are clamped to what the set holds."""
    n = len(corrs)
    if n < 2:
        raise GeometryError("need at least two correspondences")
    K = min(K, n)
    M = min(M, n)
    k_global = min(K if k_global is None else k_global, M)
    V = min(default_node_count(n) if V is None else V, n)
    feats = correspondence_features(corrs, scale_alignment, scale_ratio_direction)
    nodes = sample_nodes(corrs, V, seed)
    graph = build_graphs(corrs, nodes, K, M, sigma_d, mode, k_global, seed, signed_cosine)
    theta_cross = None
    if cross_theta == "geometric":
        centered = None
        if mode == "angle":
            centered = (centroid_and_center(corrs.est_points)[1], centroid_and_center(corrs.points)[1])
        glob = graph.global_corr_groups
        theta_cross = np.stack([consistency_block(corrs, graph.local_groups[j], glob[j], sigma_d, mode,
                                                  signed_cosine, centered=centered)
                                for j in range(len(glob))])
    elif cross_theta != "ones":
        raise ValueError(f"unknown cross_theta {cross_theta!r}")
    return SceneData(feats, graph, corrs.gt_labels, theta_cross)


# ---------------------------------------------------------------------------
# forward / backward


def _linear_tanh_forward(x, W, b):
    pre = x @ W + b
    return np.tanh(pre)


def embed_initial(features: np.ndarray, model: Model) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.config.in_dim:
        raise GeometryError(f"expected (N, {model.config.in_dim}) features, got {features.shape}")
    p = model.params
    h = _linear_tanh_forward(features, p["embed.W1"], p["embed.b1"])
    return h @ p["embed.W2"] + p["embed.b2"]


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def classify(F_asc: np.ndarray, model: Model, return_logits: bool = False):
    p = model.params
    h = np.tanh(F_asc @ p["head.W1"] + p["head.b1"])
    z = (h @ p["head.W2"] + p["head.b2"])[:, 0]
    return (sigmoid(z), z) if return_logits else sigmoid(z)


class ForwardPass:
    """Runs the full network on one scene and keeps the intermediates."""

    def __init__(self, model: Model, scene: SceneData, check_softmax: bool = False):
        self.model = model
        self.scene = scene
        self.check_softmax = check_softmax
        self.max_row_error = 0.0
        self._run()

    def _theta(self, t):
        return t if self.model.config.reweight else None

    def _attn(self, layer, kind, Fq, Fkv, theta):
        cfg = self.model.config
        out, cache = attention_forward(self.model.attention_params(layer, kind), Fq, Fkv, theta,
                                       cfg.n_heads, cfg.mask_mode, f"block{layer}.{kind}")
        if self.check_softmax:
            self.max_row_error = max(self.max_row_error, float(np.abs(cache["A"].sum(-1) - 1).max()))
        self.caches[(layer, kind)] = cache
        return out

    def _run(self):
        model, scene, p = self.model, self.scene, self.model.params
        cfg = model.config
        X = np.asarray(scene.features, dtype=np.float64)
        self.pre1 = X @ p["embed.W1"] + p["embed.b1"]
        self.h1 = np.tanh(self.pre1)
        self.E = self.h1 @ p["embed.W2"] + p["embed.b2"]
        _check_finite(self.E, "embed")
        g = scene.graph
        self.local_idx = g.local_groups
        self.global_idx = g.global_corr_groups
        FL = self.E[self.local_idx]
        FG = self.E[self.global_idx]
        self.caches = {}
        tl, tg = self._theta(g.theta_local), self._theta(g.theta_global)
        tc = self._theta(scene.theta_cross)
        tc_t = None if tc is None else tc.transpose(0, 2, 1)
        for layer in range(cfg.n_blocks):
            FL = FL + self._attn(layer, "self_local", FL, FL, tl)
            FG = FG + self._attn(layer, "self_global", FG, FG, tg)
            if cfg.cross_attention:
                FL, FG = (FL + self._attn(layer, "cross_lg", FL, FG, tc),
                          FG + self._attn(layer, "cross_gl", FG, FL, tc_t))
        self.FL, self.FG = FL, FG
        n = scene.n
        flat = self.local_idx.reshape(-1)
        self.counts = np.bincount(flat, minlength=n).astype(np.float64)
        acc = np.zeros_like(self.E)
        np.add.at(acc, flat, FL.reshape(-1, FL.shape[-1]))
        covered = self.counts > 0
        self.covered = covered
        self.F_asc = np.where(covered[:, None], acc / np.maximum(self.counts, 1.0)[:, None], self.E)
        self.hh_pre = self.F_asc @ p["head.W1"] + p["head.b1"]
        self.hh = np.tanh(self.hh_pre)
        self.logits = (self.hh @ p["head.W2"] + p["head.b2"])[:, 0]
        _check_finite(self.logits, "head")
        self.scores = sigmoid(self.logits)

    def backward(self, dlogits: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        model, p, cfg = self.model, self.model.params, self.model.config
        grads = model.zeros_like()
        dz = np.asarray(dlogits, dtype=np.float64)[:, None]
        grads["head.W2"] += self.hh.T @ dz
        grads["head.b2"] += dz.sum(axis=0)
        dhh_pre = (dz @ p["head.W2"].T) * (1 - self.hh ** 2)
        grads["head.W1"] += self.F_asc.T @ dhh_pre
        grads["head.b1"] += dhh_pre.sum(axis=0)
        dF = dhh_pre @ p["head.W1"].T

        dE = np.where(self.covered[:, None], 0.0, dF)
        dFL = (dF / np.maximum(self.counts, 1.0)[:, None])[self.local_idx]
        dFL = np.where(self.covered[self.local_idx][..., None], dFL, 0.0)
        dFG = np.zeros_like(self.FG)

        def attn_back(layer, kind, dout):
            dFq, dFkv, g = attention_backward(model.attention_params(layer, kind), self.caches[(layer, kind)], dout)
            for k, v in g.items():
                grads[f"block{layer}.{kind}.{k}"] += v
            return dFq, dFkv

        for layer in reversed(range(cfg.n_blocks)):
            if cfg.cross_attention:
                # FL' = FL + A_lg(FL, FG); FG' = FG + A_gl(FG, FL), both from the pre-cross values
                dq_l, dkv_g = attn_back(layer, "cross_lg", dFL)
                dq_g, dkv_l = attn_back(layer, "cross_gl", dFG)
                dFL, dFG = dFL + dq_l + dkv_l, dFG + dq_g + dkv_g
            dq, dkv = attn_back(layer, "self_global", dFG)
            dFG = dFG + dq + dkv
            dq, dkv = attn_back(layer, "self_local", dFL)
            dFL = dFL + dq + dkv

        np.add.at(dE, self.local_idx.reshape(-1), dFL.reshape(-1, dFL.shape[-1]))
        np.add.at(dE, self.global_idx.reshape(-1), dFG.reshape(-1, dFG.shape[-1]))
        grads["embed.W2"] += self.h1.T @ dE
        grads["embed.b2"] += dE.sum(axis=0)
        dpre1 = (dE @ p["embed.W2"].T) * (1 - self.h1 ** 2)
        grads["embed.W1"] += np.asarray(self.scene.features).T @ dpre1
        grads["embed.b1"] += dpre1.sum(axis=0)
        return grads


def hierarchical_forward(model: Model, scene: SceneData, F_init: Optional[np.ndarray] = None):
    """Correspondence-aligned features after the attention stack.

    Returns ``(F_asc, (F_local, F_global))`` with the per-group features of
    both branches. ``F_init`` overrides the embedding output when given.
    """
    if F_init is None:
        fp = ForwardPass(model, scene)
        return fp.F_asc, (fp.FL, fp.FG)
    return _attention_stack(model, scene, np.asarray(F_init, dtype=np.float64))


def _attention_stack(model: Model, scene: SceneData, E: np.ndarray):
    cfg = model.config
    g = scene.graph
    use = (lambda t: t) if cfg.reweight else (lambda t: None)
    tc = use(scene.theta_cross)
    tc_t = None if tc is None else tc.transpose(0, 2, 1)
    FL, FG = E[g.local_groups], E[g.global_corr_groups]

    def attn(layer, kind, q, kv, th):
        return attention_forward(model.attention_params(layer, kind), q, kv, th, cfg.n_heads,
                                 cfg.mask_mode, f"block{layer}.{kind}")[0]

    for layer in range(cfg.n_blocks):
        FL = FL + attn(layer, "self_local", FL, FL, use(g.theta_local))
        FG = FG + attn(layer, "self_global", FG, FG, use(g.theta_global))
        if cfg.cross_attention:
            FL, FG = FL + attn(layer, "cross_lg", FL, FG, tc), FG + attn(layer, "cross_gl", FG, FL, tc_t)
    flat = g.local_groups.reshape(-1)
    counts = np.bincount(flat, minlength=len(E)).astype(np.float64)
    acc = np.zeros_like(E)
    np.add.at(acc, flat, FL.reshape(-1, E.shape[1]))
    F_asc = np.where(counts[:, None] > 0, acc / np.maximum(counts, 1.0)[:, None], E)
    return F_asc, (FL, FG)


def predict_scores(model: Model, scene: SceneData) -> np.ndarray:
    return ForwardPass(model, scene).scores


# ---------------------------------------------------------------------------
# losses


def _softplus(z):
    return np.logaddexp(0.0, z)


def binary_cross_entropy(scores, labels, clamp: float = 1e-7) -> float:
    """Mean BCE on probabilities, clamped to [clamp, 1 - clamp]."""
    s = np.clip(np.asarray(scores, dtype=np.float64), clamp, 1 - clamp)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(s) + (1 - y) * np.log(1 - s)))


def loss_from_logits(z: np.ndarray, y: np.ndarray, config: TrainConfig):
    """Mean loss over one scene and its gradient with respect to the logits."""
    y = np.asarray(y, dtype=np.float64)
    n = len(z)
    p = sigmoid(z)
    if config.loss == "bce":
        loss = np.mean(_softplus(z) - y * z)
        return float(loss), (p - y) / n
    gamma, alpha = config.focal_gamma, config.focal_alpha
    log_p, log_q = -_softplus(-z), -_softplus(z)
    q = 1 - p
    pos = -alpha * q ** gamma * log_p
    neg = -(1 - alpha) * p ** gamma * log_q
    loss = np.mean(y * pos + (1 - y) * neg)
    dpos = alpha * q ** gamma * (gamma * p * log_p - q)
    dneg = (1 - alpha) * p ** gamma * (p - gamma * q * log_q)
    return float(loss), (y * dpos + (1 - y) * dneg) / n


def loss_and_grad(model: Model, batch: Sequence[SceneData], config: Optional[TrainConfig] = None):
    """Mean per-scene loss over ``batch`` and gradients for every parameter."""
    config = config or TrainConfig()
    if isinstance(batch, SceneData):
        batch = [batch]
    total = 0.0
    grads = model.zeros_like()
    for scene in batch:
        if scene.labels is None:
            raise GeometryError("training needs ground-truth labels")
        fp = ForwardPass(model, scene)
        loss, dz = loss_from_logits(fp.logits, scene.labels, config)
        total += loss
        for k, v in fp.backward(dz).items():
            grads[k] += v
    m = len(batch)
    for k in grads:
        grads[k] /= m
    return total / m, grads


# ---------------------------------------------------------------------------
# optimisation


class AdamW:
    def __init__(self, model: Model, config: TrainConfig):
        self.cfg = config
        self.m = model.zeros_like()
        self.v = model.zeros_like()
        self.t = 0

    def step(self, model: Model, grads):
        c = self.cfg
        self.t += 1
        b1t = 1 - c.beta1 ** self.t
        b2t = 1 - c.beta2 ** self.t
        for k, p in model.params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            update = (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.adam_eps)
            p -= c.learning_rate * (update + c.weight_decay * p)


@dataclass
class History:
    epochs: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    val_ir: List[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,loss,val_ir"]
        rows += [f"{e},{l:.17g},{v:.17g}" for e, l, v in zip(self.epochs, self.loss, self.val_ir)]
        return "\n".join(rows) + "\n"


class TrainingDiverged(RuntimeError):
    pass


def filtered_inlier_ratio(model: Model, scenes: Sequence[SceneData], tau: float) -> float:
    """Mean post-filter inlier ratio (by ground-truth labels); empty outputs count as 0."""
    irs = []
    for s in scenes:
        keep = predict_scores(model, s) >= tau
        irs.append(float(s.labels[keep].mean()) if keep.any() else 0.0)
    return float(np.mean(irs)) if irs else float("nan")


def train(model: Model, dataset: Sequence[SceneData], config: Optional[TrainConfig] = None,
          val: Optional[Sequence[SceneData]] = None, callback=None):
    """Mini-batch AdamW; returns the (in-place updated) model and its history.

    Scene order is shuffled each epoch with a generator seeded from
    ``config.seed`` so runs are bit-reproducible.
    """
    config = config or TrainConfig()
    config.validate()
    hist = History()
    if config.epochs == 0:
        return model, hist
    if not dataset:
        raise ValueError("empty training set")
    opt = AdamW(model, config)
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            loss, grads = loss_and_grad(model, batch, config)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {opt.t + 1}")
            losses.append(loss * len(batch))
            opt.step(model, grads)
        epoch_loss = float(np.sum(losses) / len(dataset))
        val_ir = filtered_inlier_ratio(model, val, config.tau) if val else float("nan")
        hist.epochs.append(epoch)
        hist.loss.append(epoch_loss)
        hist.val_ir.append(val_ir)
        logger.info("epoch %d loss %.5f val_ir %.4f", epoch, epoch_loss, val_ir)
        if callback is not None:
            callback(epoch, epoch_loss, val_ir)
    return model, hist


# ---------------------------------------------------------------------------
# checkpoints


def model_to_bytes(model: Model) -> bytes:
    hyper = json.dumps({"model": asdict(model.config), "pipeline": model.pipeline},
                       sort_keys=True).encode()
    parts = [MODEL_MAGIC, struct.pack("<Q", len(hyper)), hyper]
    for name, shape in param_shapes(model.config).items():
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> Model:
    if blob[:5] != MODEL_MAGIC:
        raise ValueError("not an AGNN1 checkpoint")
    (length,) = struct.unpack_from("<Q", blob, 5)
    off = 13
    hyper = json.loads(blob[off:off + length].decode())
    cfg = ModelConfig(**hyper["model"])
    off += length
    model = Model.__new__(Model)
    model.config = cfg
    model.pipeline = dict(hyper.get("pipeline", {}))
    model.params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        count = int(np.prod(shape))
        model.params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return model
