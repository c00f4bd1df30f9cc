"""Feature extractor, centroid head, losses and exact gradients.

The extractor is a small fully connected net over feature vectors (the
last layer is linear, hidden layers use a configurable nonlinearity).
All forward/backward passes are straight numpy in double precision so the
gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureStore
from .episodes import Episode

ACTIVATIONS = ("relu", "tanh", "linear")

CHECKPOINT_VERSION = 1


class ModelError(Exception):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


@dataclass
class ExtractorParams:
    weights: list[np.ndarray]  # each (out_dim, in_dim)
    biases: list[np.ndarray]  # each (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ModelError("need at least one layer with matching weights/biases")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ModelError(f"layer {i} input dim does not chain")
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != b.shape[0]:
                raise ModelError("bias shape does not match weight rows")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ModelError("non-finite parameter values")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "ExtractorParams":
        return ExtractorParams([W.copy() for W in self.weights],
                               [b.copy() for b in self.biases], self.activation)


@dataclass
class GradientSet:
    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: ExtractorParams) -> "GradientSet":
        return cls([np.zeros_like(W) for W in params.weights],
                   [np.zeros_like(b) for b in params.biases])

    def add_(self, other: "GradientSet"):
        for dW, oW in zip(self.d_weights, other.d_weights):
            dW += oW
        for db, ob in zip(self.d_biases, other.d_biases):
            db += ob

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.d_weights + self.d_biases)


@dataclass
class LinearHead:
    weight: np.ndarray  # (K, D)
    bias: np.ndarray  # (K,)


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (K, D), row k is class k's centroid
    tau: float = 5.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ModelError("tau must be positive")


def init_params(dims, activation: str = "relu",
                rng: np.random.Generator | None = None) -> ExtractorParams:
    """He-style gaussian init for a layer-dimension chain like (10, 32, 16)."""
    rng = rng or np.random.default_rng(0)
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / din), size=(dout, din)))
        biases.append(np.zeros(dout))
    return ExtractorParams(weights, biases, activation)


def forward(params: ExtractorParams, inputs: np.ndarray):
    """Run the extractor; returns embeddings and the cache for backward."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if X.shape[1] != params.in_dim:
        raise ModelError(f"input dim {X.shape[1]} != extractor dim {params.in_dim}")
    a = X
    cache = []
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W.T + b
        cache.append((a, z))
        a = z if i == last else _act(params.activation, z)
    if not np.isfinite(a).all():
        raise ModelError("non-finite extractor output (divergence)")
    return a, cache


def backward(params: ExtractorParams, cache, d_out: np.ndarray) -> GradientSet:
    """Exact gradients of sum(d_out * output) w.r.t. every parameter."""
    grads = GradientSet.zeros_like(params)
    last = len(params.weights) - 1
    dA = d_out
    for i in range(last, -1, -1):
        a_in, z = cache[i]
        dZ = dA if i == last else dA * _act_grad(params.activation, z)
        grads.d_weights[i][:] = dZ.T @ a_in
        grads.d_biases[i][:] = dZ.sum(axis=0)
        if i > 0:
            dA = dZ @ params.weights[i]
    return grads


def centroids(embeddings_by_class: dict[int, np.ndarray],
              n_support: int) -> np.ndarray:
    """Per-class arithmetic means; classes keyed 0..K-1."""
    K = len(embeddings_by_class)
    out = []
    for k in sorted(embeddings_by_class):
        emb = embeddings_by_class[k]
        if emb.shape[0] == 0:
            raise ModelError(f"class {k} contributed no embeddings")
        if emb.shape[0] != n_support:
            raise ModelError(f"class {k} has {emb.shape[0]} embeddings, expected {n_support}")
        out.append(emb.mean(axis=0))
    if len(out) != K:
        raise ModelError("non-contiguous class keys")
    return np.vstack(out)


def cosine_matrix(Q: np.ndarray, W: np.ndarray):
    """Pairwise cosine similarities; zero-norm pairs get cosine 0."""
    qn = np.linalg.norm(Q, axis=1)
    wn = np.linalg.norm(W, axis=1)
    denom = np.outer(qn, wn)
    ok = denom > 0
    C = np.where(ok, Q @ W.T, 0.0)
    C = np.divide(C, denom, out=C, where=ok)
    return C, qn, wn, ok


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    # stable mean NLL: logsumexp(z) - z_y
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float((lse - z[np.arange(len(y)), y]).mean())


def predict_proba(cset: CentroidSet, embedding: np.ndarray) -> np.ndarray:
    """Softmax over tau-scaled cosine similarities to each centroid."""
    E = np.atleast_2d(embedding)
    C, _, _, _ = cosine_matrix(E, cset.centroids)
    P = _softmax(cset.tau * C)
    return P[0] if embedding.ndim == 1 else P


def _episode_arrays(episode: Episode, data: FeatureStore):
    s_ids = episode.support_ids()
    q_ids = episode.query_ids()
    s_classes = np.array([y for _, y in episode.support])
    q_classes = np.array([y for _, y in episode.query])
    classes = sorted(set(s_classes))
    remap = {k: i for i, k in enumerate(classes)}
    return (data.matrix_for(s_ids), np.array([remap[y] for y in s_classes]),
            data.matrix_for(q_ids), np.array([remap[y] for y in q_classes]),
            len(classes))


def _episode_loss_grad(params: ExtractorParams, episode: Episode,
                       data: FeatureStore, tau: float, want_grad: bool):
    if tau <= 0:
        raise ModelError("tau must be positive")
    Xs, ys, Xq, yq, K = _episode_arrays(episode, data)
    n_support = len(ys) // K
    Es, cache_s = forward(params, Xs)
    Eq, cache_q = forward(params, Xq)
    W = centroids({k: Es[ys == k] for k in range(K)}, n_support)
    C, qn, wn, ok = cosine_matrix(Eq, W)
    P = _softmax(tau * C)
    nq = Eq.shape[0]
    loss = _cross_entropy(tau * C, yq)
    if not want_grad:
        return loss, None
    # dL/d(logits) for mean cross-entropy, then through tau*cosine
    G = P.copy()
    G[np.arange(nq), yq] -= 1.0
    G *= tau / nq
    G = np.where(ok, G, 0.0)  # zero-norm cosine is the constant 0
    inv_q = np.divide(1.0, qn, out=np.zeros_like(qn), where=qn > 0)
    inv_w = np.divide(1.0, wn, out=np.zeros_like(wn), where=wn > 0)
    dEq = ((G * inv_w) @ W) * inv_q[:, None] \
        - (G * C).sum(axis=1, keepdims=True) * Eq * (inv_q ** 2)[:, None]
    dW = ((G * inv_q[:, None]).T @ Eq) * inv_w[:, None] \
        - (G * C).sum(axis=0)[:, None] * W * (inv_w ** 2)[:, None]
    dEs = dW[ys] / n_support  # each support row feeds its class mean
    grads = backward(params, cache_q, dEq)
    grads.add_(backward(params, cache_s, dEs))
    if not grads.is_finite():
        raise ModelError("non-finite episode gradient (divergence)")
    return loss, grads


def episode_loss(params: ExtractorParams, episode: Episode,
                 data: FeatureStore, tau: float) -> float:
    """Mean query negative log-likelihood under support centroids."""
    loss, _ = _episode_loss_grad(params, episode, data, tau, want_grad=False)
    return loss


def episode_gradient(params: ExtractorParams, episode: Episode,
                     data: FeatureStore, tau: float):
    """Exact gradient of episode_loss; flows through support and query."""
    return _episode_loss_grad(params, episode, data, tau, want_grad=True)


def erm_loss(params: ExtractorParams, head: LinearHead, X: np.ndarray,
             y: np.ndarray, mode: str = "linear", tau: float = 5.0):
    """Softmax cross-entropy through the extractor and a class head.

    linear mode scores with W e + b; cosine mode scores with tau-scaled
    cosine between head rows and the embedding (bias unused).  Returns
    (loss, extractor grads, head weight grad, head bias grad).
    """
    if mode not in ("linear", "cosine"):
        raise ModelError(f"unknown ERM mode {mode!r}")
    if len(y) == 0:
        raise ModelError("empty batch")
    E, cache = forward(params, X)
    n = E.shape[0]
    if mode == "linear":
        logits = E @ head.weight.T + head.bias
        P = _softmax(logits)
        loss = _cross_entropy(logits, y)
        G = P.copy()
        G[np.arange(n), y] -= 1.0
        G /= n
        dE = G @ head.weight
        dWh = G.T @ E
        dbh = G.sum(axis=0)
    else:
        C, qn, wn, ok = cosine_matrix(E, head.weight)
        P = _softmax(tau * C)
        loss = _cross_entropy(tau * C, y)
        G = P.copy()
        G[np.arange(n), y] -= 1.0
        G *= tau / n
        G = np.where(ok, G, 0.0)
        inv_q = np.divide(1.0, qn, out=np.zeros_like(qn), where=qn > 0)
        inv_w = np.divide(1.0, wn, out=np.zeros_like(wn), where=wn > 0)
        dE = ((G * inv_w) @ head.weight) * inv_q[:, None] \
            - (G * C).sum(axis=1, keepdims=True) * E * (inv_q ** 2)[:, None]
        dWh = ((G * inv_q[:, None]).T @ E) * inv_w[:, None] \
            - (G * C).sum(axis=0)[:, None] * head.weight * (inv_w ** 2)[:, None]
        dbh = np.zeros_like(head.bias)
    grads = backward(params, cache, dE)
    return loss, grads, dWh, dbh


def full_data_centroids(params: ExtractorParams, store: FeatureStore,
                        tau: float) -> CentroidSet:
    """Class-mean centroids over every sample in the store (inference rule)."""
    E, _ = forward(params, store.features)
    rows = []
    for k in range(store.n_classes):
        mask = store.labels == k
        if not mask.any():
            raise ModelError(f"class {k} is empty in the training store")
        rows.append(E[mask].mean(axis=0))
    return CentroidSet(centroids=np.vstack(rows), tau=tau)


def predict_classes(cset: CentroidSet, params: ExtractorParams,
                    X: np.ndarray) -> np.ndarray:
    """Argmax cosine to each centroid; ties go to the lowest class index."""
    E, _ = forward(params, X)
    C, _, _, _ = cosine_matrix(E, cset.centroids)
    return np.argmax(C, axis=1)


def infer(params: ExtractorParams, train_store: FeatureStore,
          x: np.ndarray, tau: float) -> int:
    cset = full_data_centroids(params, train_store, tau)
    return int(predict_classes(cset, params, np.atleast_2d(x))[0])


def save_checkpoint(path, params: ExtractorParams, tau: float, epoch: int = 0):
    """Versioned JSON checkpoint; save -> load -> save is byte-identical."""
    dims = [params.in_dim] + [W.shape[0] for W in params.weights]
    payload = {
        "version": CHECKPOINT_VERSION,
        "layer_dims": dims,
        "activation": params.activation,
        "weights": [[float(v) for v in W.ravel()] for W in params.weights],
        "biases": [[float(v) for v in b] for b in params.biases],
        "tau": float(tau),
        "epoch": int(epoch),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {payload.get('version')!r}")
    dims = payload["layer_dims"]
    weights = [np.array(w, dtype=float).reshape(dout, din)
               for w, din, dout in zip(payload["weights"], dims[:-1], dims[1:])]
    biases = [np.array(b, dtype=float) for b in payload["biases"]]
    params = ExtractorParams(weights, biases, payload["activation"])
    return params, float(payload["tau"]), int(payload["epoch"])
