"""Attention-pooled multiple instance learning head.

Per-bag forward pass over K tile embeddings x_k (rows of X):

    h_k = tanh(P x_k + b_P)              projected tiles      (h,)
    e_k = w . tanh(V h_k)                attention logits
    a   = softmax(e)                     attention weights
    z   = sum_k a_k h_k                  pooled representation
    u   = c . z + b_c                    slide logit
    p   = sigmoid(u)

Trained with cross-entropy against soft targets y in [0, 1] (binary labels are
the special case y in {0, 1} on the identical code path). Gradients are exact
analytic derivatives, checked against finite differences in the test suite.
All math is float64; checkpoints store float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, TrainingError

CHECKPOINT_MAGIC = b"MILC"
CHECKPOINT_VERSION = 1


@dataclass
class MilParams:
    P: np.ndarray        # (h, input_dim)
    b_P: np.ndarray      # (h,)
    V: np.ndarray        # (L, h)
    w: np.ndarray        # (L,)
    c: np.ndarray        # (h,)
    b_c: float

    @property
    def hidden_dim(self) -> int:
        return self.P.shape[0]

    @property
    def attention_dim(self) -> int:
        return self.V.shape[0]

    @property
    def input_dim(self) -> int:
        return self.P.shape[1]

    def tensors(self):
        return [("P", self.P), ("b_P", self.b_P), ("V", self.V),
                ("w", self.w), ("c", self.c), ("b_c", np.array([self.b_c]))]

    def copy(self) -> "MilParams":
        return MilParams(self.P.copy(), self.b_P.copy(), self.V.copy(),
                         self.w.copy(), self.c.copy(), float(self.b_c))


@dataclass
class MilGrads:
    P: np.ndarray
    b_P: np.ndarray
    V: np.ndarray
    w: np.ndarray
    c: np.ndarray
    b_c: float


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    bags_per_step: int = 1
    max_tiles_per_bag: int | None = None
    seed: int = 0
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise DomainError("betas must be in (0, 1)")
        if self.patience < 1:
            raise DomainError("patience must be >= 1")


@dataclass
class BagForward:
    hidden: np.ndarray       # (K, h) projected tiles
    att_hidden: np.ndarray   # (K, L)
    logits: np.ndarray       # (K,) attention logits
    attention: np.ndarray    # (K,) softmax weights
    pooled: np.ndarray       # (h,)
    logit: float
    prob: float


def init_params(input_dim: int = 512, hidden_dim: int = 128,
                attention_dim: int = 64, seed: int = 0) -> MilParams:
    """Seeded uniform init scaled by 1/sqrt(fan-in); biases zero."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x1217]))
    def u(shape, fan_in):
        return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)
    return MilParams(
        P=u((hidden_dim, input_dim), input_dim),
        b_P=np.zeros(hidden_dim),
        V=u((attention_dim, hidden_dim), hidden_dim),
        w=u((attention_dim,), attention_dim),
        c=u((hidden_dim,), hidden_dim),
        b_c=0.0,
    )


def _check_bag(X: np.ndarray, params: MilParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError(f"bag must be a nonempty (K, d) array, got shape {X.shape}")
    if X.shape[1] != params.input_dim:
        raise DomainError(f"embedding dim {X.shape[1]} != model input dim {params.input_dim}")
    return X


def forward(X, params: MilParams) -> BagForward:
    """Run the attention-MIL forward pass on one bag of embeddings."""
    X = _check_bag(X, params)
    hidden = np.tanh(X @ params.P.T + params.b_P)
    att_hidden = np.tanh(hidden @ params.V.T)
    logits = att_hidden @ params.w
    shifted = logits - logits.max()
    expd = np.exp(shifted)
    attention = expd / expd.sum()
    pooled = attention @ hidden
    logit = float(pooled @ params.c + params.b_c)
    prob = 1.0 / (1.0 + np.exp(-logit)) if logit >= 0 else float(
        np.exp(logit) / (1.0 + np.exp(logit)))
    return BagForward(hidden, att_hidden, logits, attention, pooled, logit, float(prob))


def loss_from_logit(logit: float, y: float) -> float:
    """Cross-entropy against a soft target, stable in the logit."""
    if not 0.0 <= y <= 1.0:
        raise DomainError(f"target must be in [0, 1], got {y}")
    softplus = max(logit, 0.0) + np.log1p(np.exp(-abs(logit)))
    return float(softplus - y * logit)


def loss(prob: float, y: float) -> float:
    """Cross-entropy -[y ln p + (1-y) ln(1-p)] via the stable logit form."""
    if not 0.0 < prob < 1.0:
        raise DomainError(f"prob must be in (0, 1), got {prob}")
    logit = float(np.log(prob) - np.log1p(-prob))
    return loss_from_logit(logit, y)


def backward(X, params: MilParams, y: float, fwd: BagForward | None = None) -> MilGrads:
    """Exact gradients of the cross-entropy loss w.r.t. every parameter."""
    X = _check_bag(X, params)
    if fwd is None:
        fwd = forward(X, params)
    H, T, a, z = fwd.hidden, fwd.att_hidden, fwd.attention, fwd.pooled
    g_u = fwd.prob - y

    g_c = g_u * z
    g_bc = g_u
    g_z = g_u * params.c                       # (h,)

    g_a = H @ g_z                              # (K,)
    g_e = a * (g_a - float(a @ g_a))           # softmax backward
    g_w = T.T @ g_e
    s = (g_e[:, None] * params.w[None, :]) * (1.0 - T * T)   # (K, L)
    g_V = s.T @ H
    g_h = a[:, None] * g_z[None, :] + s @ params.V           # (K, h)
    r = g_h * (1.0 - H * H)
    g_P = r.T @ X
    g_bP = r.sum(axis=0)
    return MilGrads(P=g_P, b_P=g_bP, V=g_V, w=g_w, c=g_c, b_c=float(g_bc))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: MilParams) -> "AdamState":
        m = {name: np.zeros_like(np.asarray(t, dtype=np.float64)) for name, t in params.tensors()}
        v = {name: np.zeros_like(np.asarray(t, dtype=np.float64)) for name, t in params.tensors()}
        return cls(m=m, v=v, t=0)


def adam_step(params: MilParams, grads: MilGrads, state: AdamState,
              config: TrainConfig) -> MilParams:
    """One Adam update; L2 weight decay is added to the gradient by default."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    new = {}
    for name, theta in params.tensors():
        theta = np.asarray(theta, dtype=np.float64)
        g = np.asarray(getattr(grads, name), dtype=np.float64).reshape(theta.shape)
        if config.weight_decay > 0 and not config.decoupled_weight_decay:
            g = g + config.weight_decay * theta
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        step = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        if config.weight_decay > 0 and config.decoupled_weight_decay:
            step = step + config.learning_rate * config.weight_decay * theta
        new[name] = theta - step
    return MilParams(P=new["P"], b_P=new["b_P"], V=new["V"], w=new["w"],
                     c=new["c"], b_c=float(new["b_c"][0]))


def mean_loss(bags, labels, params: MilParams) -> float:
    total = 0.0
    for X, y in zip(bags, labels):
        fwd = forward(X, params)
        total += loss_from_logit(fwd.logit, float(y))
    return total / len(bags)


def predict(bags, params: MilParams):
    """Probabilities and attention weights for a list of bags."""
    probs = np.empty(len(bags))
    attentions = []
    for i, X in enumerate(bags):
        fwd = forward(X, params)
        probs[i] = fwd.prob
        attentions.append(fwd.attention)
    return probs, attentions


def _subsample_bag(X, cap: int, seed: int, epoch: int, bag_index: int):
    if cap is None or X.shape[0] <= cap:
        return X
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed & 0xFFFFFFFF, 0x5AB5, epoch, bag_index]))
    idx = np.sort(rng.choice(X.shape[0], size=cap, replace=False))
    return X[idx]


def train(train_bags, train_labels, val_bags, val_labels,
          config: TrainConfig, params: MilParams | None = None):
    """Early-stopped Adam training; returns (best params, per-epoch log).

    Bags are shuffled each epoch with a seeded stream; gradients are averaged
    over bags_per_step bags per optimizer step; the model from the epoch with
    the lowest validation mean loss is returned (strict-improvement early
    stopping with the configured patience).
    """
    if len(train_bags) == 0 or len(val_bags) == 0:
        raise DomainError("train needs at least one training and one validation bag")
    if len(train_bags) != len(train_labels) or len(val_bags) != len(val_labels):
        raise DomainError("bags/labels length mismatch")
    train_bags = [np.asarray(b, dtype=np.float64) for b in train_bags]
    val_bags = [np.asarray(b, dtype=np.float64) for b in val_bags]
    if params is None:
        params = init_params(input_dim=train_bags[0].shape[1], seed=config.seed)
    state = AdamState.zeros_like(params)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(
        [config.seed & 0xFFFFFFFF, 0xE0C]))

    log = []
    best_loss = np.inf
    best_params = params.copy()
    best_epoch = 0
    epochs_without_improvement = 0

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_bags))
        epoch_loss = 0.0
        acc = None
        n_acc = 0
        for pos, bag_idx in enumerate(order):
            X = _subsample_bag(train_bags[bag_idx], config.max_tiles_per_bag,
                               config.seed, epoch, int(bag_idx))
            y = float(train_labels[bag_idx])
            fwd = forward(X, params)
            l = loss_from_logit(fwd.logit, y)
            if not np.isfinite(l):
                raise TrainingError(f"non-finite loss at epoch {epoch}", log=log)
            epoch_loss += l
            g = backward(X, params, y, fwd)
            if acc is None:
                acc = g
            else:
                acc = MilGrads(P=acc.P + g.P, b_P=acc.b_P + g.b_P, V=acc.V + g.V,
                               w=acc.w + g.w, c=acc.c + g.c, b_c=acc.b_c + g.b_c)
            n_acc += 1
            if n_acc == config.bags_per_step or pos == len(order) - 1:
                mean_g = MilGrads(P=acc.P / n_acc, b_P=acc.b_P / n_acc,
                                  V=acc.V / n_acc, w=acc.w / n_acc,
                                  c=acc.c / n_acc, b_c=acc.b_c / n_acc)
                params = adam_step(params, mean_g, state, config)
                acc = None
                n_acc = 0
        val_loss = mean_loss(val_bags, val_labels, params)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", log=log)
        improved = val_loss < best_loss
        log.append({"epoch": epoch, "train_loss": epoch_loss / len(train_bags),
                    "val_loss": val_loss, "improved": improved})
        if improved:
            best_loss = val_loss
            best_params = params.copy()
            best_epoch = epoch
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= config.patience:
                break
    return best_params, {"epochs": log, "best_epoch": best_epoch,
                         "best_val_loss": float(best_loss)}


def save_checkpoint(path, params: MilParams, meta: dict | None = None):
    """Text header line (JSON) followed by float32 little-endian tensors."""
    header = {
        "magic": CHECKPOINT_MAGIC.decode(),
        "version": CHECKPOINT_VERSION,
        "input_dim": params.input_dim,
        "hidden_dim": params.hidden_dim,
        "attention_dim": params.attention_dim,
        "tensor_order": [name for name, _ in params.tensors()],
    }
    if meta:
        header["meta"] = meta
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, tensor in params.tensors():
            fh.write(np.asarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Load a checkpoint, returning (MilParams, header dict)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode())
        if header.get("magic") != CHECKPOINT_MAGIC.decode():
            raise DomainError(f"not a checkpoint file: {path}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise DomainError(
                f"checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
        d, h, L = header["input_dim"], header["hidden_dim"], header["attention_dim"]
        shapes = {"P": (h, d), "b_P": (h,), "V": (L, h), "w": (L,), "c": (h,), "b_c": (1,)}
        raw = fh.read()
    arrays = {}
    offset = 0
    for name in header["tensor_order"]:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        arrays[name] = arr.astype(np.float64).reshape(shapes[name])
    params = MilParams(P=arrays["P"], b_P=arrays["b_P"], V=arrays["V"],
                       w=arrays["w"], c=arrays["c"], b_c=float(arrays["b_c"][0]))
    return params, header
