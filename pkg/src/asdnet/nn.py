"""Hand-written MLP, GCN and logistic-regression models with analytic gradients.

Everything is plain numpy in float64. Forward passes return a cache that the
matching backward pass consumes; a cache is tied to the optimizer step it was
produced at and is rejected once the parameters have moved on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .graph import AdjacencyMatrix, normalized_adjacency_dense, rng_stream

BCE_EPS = 1e-12


class StaleCacheError(RuntimeError):
    pass


@dataclass
class MlpConfig:
    hidden: tuple[int, ...] = (256, 128)
    out_dim: int = 2
    dropout: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout probability must be in [0, 1)")

    @property
    def embedding_dim(self) -> int | None:
        return self.hidden[-1] if self.hidden else None


@dataclass
class GcnConfig:
    hidden: int = 64
    dropout: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout probability must be in [0, 1)")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 200
    batch_size: int = 64
    clusters: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epoch budget must be non-negative")


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name}")
        if self.step < 0:
            raise ValueError("step counter must be non-negative")

    def copy(self) -> "ModelState":
        return ModelState(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
            dict(self.config),
        )


# --- elementwise pieces -------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_loss(y, z):
    """Elementwise binary cross-entropy with z clamped to [eps, 1 - eps]."""
    y = np.asarray(y, dtype=np.float64)
    z = np.clip(np.asarray(z, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    return -(y * np.log(z) + (1.0 - y) * np.log1p(-z))


def bce_backward(y, z):
    """d bce / d z; zero where the clamp is active."""
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    inside = (z > BCE_EPS) & (z < 1.0 - BCE_EPS)
    zc = np.clip(z, BCE_EPS, 1.0 - BCE_EPS)
    return np.where(inside, (zc - y) / (zc * (1.0 - zc)), 0.0)


def binary_logit(logits):
    """Reduce a (N, 2) head to the log-odds of class 1, or pass (N,)/(N, 1) through."""
    logits = np.asarray(logits)
    if logits.ndim == 2 and logits.shape[1] == 2:
        return logits[:, 1] - logits[:, 0]
    return logits.reshape(logits.shape[0])


def binary_logit_backward(logits, dscore):
    logits = np.asarray(logits)
    if logits.ndim == 2 and logits.shape[1] == 2:
        return np.stack([-dscore, dscore], axis=1)
    return dscore.reshape(logits.shape)


def dropout_mask(rng, shape, p: float):
    """Inverted dropout mask: kept units are scaled by 1/(1-p)."""
    if p == 0.0 or rng is None:
        return None
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def _init_weight(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# --- MLP ----------------------------------------------------------------


def init_mlp(in_dim: int, cfg: MlpConfig | None = None) -> ModelState:
    cfg = cfg or MlpConfig()
    widths = [in_dim, *cfg.hidden, cfg.out_dim]
    rng = rng_stream(cfg.seed, "mlp-init")
    params = {}
    for i in range(len(widths) - 1):
        params[f"W{i}"] = _init_weight(rng, widths[i], widths[i + 1])
        params[f"b{i}"] = np.zeros(widths[i + 1])
    config = {"kind": "mlp", "in_dim": in_dim, **asdict(cfg)}
    config["hidden"] = list(cfg.hidden)  # JSON-stable, so checkpoints round-trip exactly
    return ModelState(params, config=config)


def _mlp_layers(state: ModelState) -> int:
    return sum(1 for k in state.params if k.startswith("W"))


def mlp_forward(state: ModelState, X, train_mode: bool = False, rng=None, dropout: float | None = None):
    """Affine + ReLU stack. Returns (logits, embedding, cache).

    The embedding is the last hidden activation (before dropout); with no
    hidden layers it is the input itself. Dropout acts on hidden activations
    in train mode only.
    """
    if not sparse.issparse(X):
        X = np.asarray(X, dtype=np.float64)
    n_layers = _mlp_layers(state)
    if X.ndim != 2 or X.shape[1] != state.params["W0"].shape[0]:
        raise ValueError(f"expected input width {state.params['W0'].shape[0]}, got shape {X.shape}")
    p = state.config.get("dropout", 0.0) if dropout is None else dropout
    h = X
    inputs, pre, masks = [], [], []
    embedding = X
    for i in range(n_layers):
        inputs.append(h)
        a = h @ state.params[f"W{i}"] + state.params[f"b{i}"]
        if i == n_layers - 1:
            pre.append(a)
            masks.append(None)
            h = a
            break
        pre.append(a)
        h = relu(a)
        embedding = h
        mask = dropout_mask(rng, h.shape, p) if train_mode else None
        masks.append(mask)
        if mask is not None:
            h = h * mask
    cache = {"kind": "mlp", "step": state.step, "inputs": inputs, "pre": pre, "masks": masks}
    return h, embedding, cache


def mlp_backward(state: ModelState, cache, dlogits):
    """Gradients of a scalar loss w.r.t. every MLP parameter and the input."""
    if cache.get("kind") != "mlp" or cache["step"] != state.step:
        raise StaleCacheError("cache does not belong to the current MLP parameters")
    n_layers = _mlp_layers(state)
    grads = {}
    g = np.asarray(dlogits, dtype=np.float64)
    for i in reversed(range(n_layers)):
        if i != n_layers - 1:
            mask = cache["masks"][i]
            if mask is not None:
                g = g * mask
            g = g * (cache["pre"][i] > 0)
        grads[f"W{i}"] = cache["inputs"][i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ state.params[f"W{i}"].T
    grads["input"] = g
    return grads


def mlp_loss_and_grads(state: ModelState, X, y, train_mode=False, rng=None):
    logits, _, cache = mlp_forward(state, X, train_mode=train_mode, rng=rng)
    score = binary_logit(logits)
    z = sigmoid(score)
    y = np.asarray(y, dtype=np.float64)
    loss = float(bce_loss(y, z).mean())
    dz = bce_backward(y, z) / y.size
    dscore = dz * z * (1.0 - z)
    grads = mlp_backward(state, cache, binary_logit_backward(logits, dscore))
    grads.pop("input")
    return loss, grads


# --- GCN ----------------------------------------------------------------


def init_gcn(in_dim: int, cfg: GcnConfig | None = None) -> ModelState:
    cfg = cfg or GcnConfig()
    rng = rng_stream(cfg.seed, "gcn-init")
    params = {
        "W1": _init_weight(rng, in_dim, cfg.hidden),
        "W2": _init_weight(rng, cfg.hidden, cfg.hidden),
        "Wc": _init_weight(rng, cfg.hidden, 1),
        "bc": np.zeros(1),
    }
    return ModelState(params, config={"kind": "gcn", "in_dim": in_dim, **asdict(cfg)})


def _as_dense(a_hat):
    if isinstance(a_hat, AdjacencyMatrix):
        return a_hat.to_dense()
    return np.asarray(a_hat, dtype=np.float64)


def gcn_layer(a_hat, H, W):
    """ReLU(A_hat H W) with A_hat already renormalized."""
    a = _as_dense(a_hat)
    H = np.asarray(H, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if a.shape != (H.shape[0], H.shape[0]) or H.shape[1] != W.shape[0]:
        raise ValueError(f"shape mismatch: A {a.shape}, H {H.shape}, W {W.shape}")
    return relu(a @ H @ W)


def gcn_layer_backward(a_hat, H, W, dout):
    """Returns (dH, dW) for out = ReLU(A_hat H W)."""
    a = _as_dense(a_hat)
    agg = a @ H
    pre = agg @ W
    g = dout * (pre > 0)
    return a.T @ (g @ W.T), agg.T @ g


def gcn_forward(state: ModelState, a_hat, X, train_mode: bool = False, rng=None, dropout: float | None = None):
    """Two graph-convolution layers then a per-node linear classifier.

    Returns (logits of shape (n,), cache).
    """
    a = _as_dense(a_hat)
    X = np.asarray(X, dtype=np.float64)
    P = state.params
    if X.ndim != 2 or X.shape[1] != P["W1"].shape[0] or a.shape != (X.shape[0], X.shape[0]):
        raise ValueError(f"shape mismatch: A {a.shape}, X {X.shape}, W1 {P['W1'].shape}")
    p = state.config.get("dropout", 0.0) if dropout is None else dropout
    m0 = dropout_mask(rng, X.shape, p) if train_mode else None
    h0 = X if m0 is None else X * m0
    agg1 = a @ h0
    pre1 = agg1 @ P["W1"]
    h1 = relu(pre1)
    m1 = dropout_mask(rng, h1.shape, p) if train_mode else None
    h1d = h1 if m1 is None else h1 * m1
    agg2 = a @ h1d
    pre2 = agg2 @ P["W2"]
    h2 = relu(pre2)
    logits = (h2 @ P["Wc"] + P["bc"]).ravel()
    cache = {
        "kind": "gcn", "step": state.step, "a": a, "m0": m0, "m1": m1,
        "agg1": agg1, "pre1": pre1, "agg2": agg2, "pre2": pre2, "h2": h2,
    }
    return logits, cache


def gcn_backward(state: ModelState, cache, dlogits):
    if cache.get("kind") != "gcn" or cache["step"] != state.step:
        raise StaleCacheError("cache does not belong to the current GCN parameters")
    P = state.params
    a = cache["a"]
    dl = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1)
    grads = {"Wc": cache["h2"].T @ dl, "bc": dl.sum(axis=0)}
    g2 = (dl @ P["Wc"].T) * (cache["pre2"] > 0)
    grads["W2"] = cache["agg2"].T @ g2
    dh1 = a.T @ (g2 @ P["W2"].T)
    if cache["m1"] is not None:
        dh1 = dh1 * cache["m1"]
    g1 = dh1 * (cache["pre1"] > 0)
    grads["W1"] = cache["agg1"].T @ g1
    dx = a.T @ (g1 @ P["W1"].T)
    if cache["m0"] is not None:
        dx = dx * cache["m0"]
    grads["input"] = dx
    return grads


def gcn_loss_and_grads(state, a_hat, X, y, loss_idx, train_mode=False, rng=None):
    """Mean BCE over ``loss_idx`` nodes and its parameter gradients."""
    logits, cache = gcn_forward(state, a_hat, X, train_mode=train_mode, rng=rng)
    loss_idx = np.asarray(loss_idx, dtype=np.int64)
    z = sigmoid(logits[loss_idx])
    yy = np.asarray(y, dtype=np.float64)[loss_idx]
    loss = float(bce_loss(yy, z).mean())
    dlogits = np.zeros_like(logits)
    dlogits[loss_idx] = bce_backward(yy, z) * z * (1.0 - z) / loss_idx.size
    grads = gcn_backward(state, cache, dlogits)
    grads.pop("input")
    return loss, grads


# --- optimizer ----------------------------------------------------------


def adam_step(state: ModelState, grads, cfg: TrainConfig, inplace: bool = False) -> ModelState:
    """One Adam update with bias correction, then decoupled weight decay.

    With ``inplace`` the arrays of ``state`` are overwritten and ``state``
    itself is returned; training loops use this to avoid reallocating.
    """
    out = state if inplace else state.copy()
    out.step = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**out.step, 1.0 - b2**out.step
    for name, p in out.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m, v = out.m[name], out.v[name]
        m *= b1
        m += (1.0 - b1) * g
        tmp = np.multiply(g, g)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # tmp <- sqrt(v_hat) + eps, then the Adam update itself
        np.multiply(v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += cfg.eps
        np.divide(m, tmp, out=tmp)
        tmp *= cfg.lr / c1
        if cfg.weight_decay:
            p *= 1.0 - cfg.lr * cfg.weight_decay
        p -= tmp
    return out


# --- Cluster-GCN --------------------------------------------------------


def balanced_random_partition(n: int, n_clusters: int, seed: int) -> list[np.ndarray]:
    perm = rng_stream(seed, "cluster-partition").permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, n_clusters)]


def cluster_partition(pg, n_clusters: int, seed: int = 0, partitioner=None) -> list[np.ndarray]:
    """Disjoint cover of the nodes by ``n_clusters`` batches.

    ``partitioner(n, n_clusters, seed)`` may replace the default seeded
    balanced random assignment.
    """
    n = pg if isinstance(pg, (int, np.integer)) else pg.n
    if not (1 <= n_clusters <= n):
        raise ValueError(f"cluster count must be in [1, {n}], got {n_clusters}")
    fn = partitioner or balanced_random_partition
    batches = [np.asarray(b, dtype=np.int64) for b in fn(n, n_clusters, seed)]
    cover = np.sort(np.concatenate(batches))
    if not np.array_equal(cover, np.arange(n)):
        raise ValueError("partitioner did not return a disjoint cover of all nodes")
    return batches


def full_batch_step(state, adj_dense, X, y, train_idx, cfg: TrainConfig, rng=None):
    """Plain GCN step on the whole graph; reference for the cluster variant."""
    a_hat = normalized_adjacency_dense(adj_dense)
    loss, grads = gcn_loss_and_grads(state, a_hat, X, y, np.sort(train_idx), train_mode=True, rng=rng)
    return adam_step(state, grads, cfg), loss


def cluster_gcn_step(state, adj_dense, X, y, train_mask, batch, cfg: TrainConfig, rng=None):
    """One Adam step on the subgraph induced by ``batch``.

    Only intra-batch edges are kept and only train-mask nodes inside the
    batch enter the mean loss. Returns (state, loss); loss is None and the
    state is returned untouched when the batch holds no train node.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("empty batch")
    local = np.flatnonzero(np.asarray(train_mask, dtype=bool)[batch])
    if local.size == 0:
        return state, None
    sub = np.asarray(adj_dense)[np.ix_(batch, batch)]
    a_hat = normalized_adjacency_dense(sub)
    loss, grads = gcn_loss_and_grads(
        state, a_hat, np.asarray(X)[batch], np.asarray(y)[batch], local, train_mode=True, rng=rng
    )
    return adam_step(state, grads, cfg), loss


# --- prediction ---------------------------------------------------------


def predict_proba_mlp(state, X) -> np.ndarray:
    logits, _, _ = mlp_forward(state, X, train_mode=False)
    return sigmoid(binary_logit(logits))


def embed_mlp(state, X) -> np.ndarray:
    return mlp_forward(state, X, train_mode=False)[1]


def predict_proba_gcn(state, adj_dense, X) -> np.ndarray:
    logits, _ = gcn_forward(state, normalized_adjacency_dense(adj_dense), X, train_mode=False)
    return sigmoid(logits)


def hard_labels(prob) -> np.ndarray:
    """Label 1 iff p > 0.5 (strict)."""
    return (np.asarray(prob) > 0.5).astype(np.int64)


def predict(state: ModelState, X, adj_dense=None):
    """Probabilities and hard labels for an MLP, logistic or GCN state."""
    kind = state.config.get("kind")
    if kind == "gcn":
        if adj_dense is None:
            raise ValueError("GCN prediction needs the population adjacency")
        prob = predict_proba_gcn(state, adj_dense, X)
    elif kind == "logistic":
        prob = predict_proba_logistic(state, X)
    else:
        prob = predict_proba_mlp(state, X)
    return prob, hard_labels(prob)


def accuracy(prob, y) -> float:
    return float(np.mean(hard_labels(prob) == np.asarray(y)))


# --- training loops -----------------------------------------------------


def _select_best(best, acc, state):
    if best is None or acc > best[0]:
        return acc, state.copy()
    return best


def train_mlp(X, y, train_idx, val_idx, mlp_cfg: MlpConfig, cfg: TrainConfig):
    """Mini-batch Adam for a fixed epoch budget, keeping the best-validation snapshot.

    Returns (state, best_val_accuracy, history). Mostly-zero inputs (pooled
    sparse features) are multiplied in CSR form.
    """
    X = np.asarray(X, dtype=np.float64)
    if np.count_nonzero(X) < 0.25 * X.size:
        X = sparse.csr_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    state = init_mlp(X.shape[1], mlp_cfg)
    rng = rng_stream(cfg.seed, "mlp-train")
    best = None
    history = []
    for _ in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = mlp_loss_and_grads(state, X[b], y[b], train_mode=True, rng=rng)
            state = adam_step(state, grads, cfg, inplace=True)
        if val_idx.size:
            acc = accuracy(predict_proba_mlp(state, X[val_idx]), y[val_idx])
            history.append(acc)
            best = _select_best(best, acc, state)
    if best is None:
        return state, float("nan"), history
    return best[1], best[0], history


def train_gcn(adj_dense, X, y, train_idx, val_idx, gcn_cfg: GcnConfig, cfg: TrainConfig, partitioner=None):
    """Cluster-GCN training with transductive masking.

    All nodes stay in the graph; the loss sees ``train_idx`` only and the
    snapshot with the best accuracy on ``val_idx`` is kept.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(train_idx, dtype=np.int64)] = True
    val_idx = np.asarray(val_idx, dtype=np.int64)
    state = init_gcn(X.shape[1], gcn_cfg)
    batches = cluster_partition(n, cfg.clusters, cfg.seed, partitioner)
    rng = rng_stream(cfg.seed, "gcn-train")
    order_rng = rng_stream(cfg.seed, "gcn-batch-order")
    best = None
    history = []
    for _ in range(cfg.epochs):
        for bi in order_rng.permutation(len(batches)):
            state, _ = cluster_gcn_step(state, adj_dense, X, y, mask, batches[bi], cfg, rng=rng)
        if val_idx.size:
            acc = accuracy(predict_proba_gcn(state, adj_dense, X)[val_idx], y[val_idx])
            history.append(acc)
            best = _select_best(best, acc, state)
    if best is None:
        return state, float("nan"), history
    return best[1], best[0], history


# --- logistic regression head ------------------------------------------


def init_logistic(in_dim: int) -> ModelState:
    return ModelState({"w": np.zeros(in_dim), "b": np.zeros(1)}, config={"kind": "logistic", "in_dim": in_dim})


def predict_proba_logistic(state, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return sigmoid(X @ state.params["w"] + state.params["b"][0])


def train_logistic(X, y, cfg: TrainConfig, l2: float = 1e-3) -> ModelState:
    """Full-batch Adam on mean BCE plus an L2 penalty on the weights."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    state = init_logistic(X.shape[1])
    for _ in range(cfg.epochs):
        z = predict_proba_logistic(state, X)
        d = bce_backward(y, z) * z * (1.0 - z) / y.size
        grads = {"w": X.T @ d + l2 * state.params["w"], "b": np.array([d.sum()])}
        state = adam_step(state, grads, cfg, inplace=True)
    return state
