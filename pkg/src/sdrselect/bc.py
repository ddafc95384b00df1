"""Behavioral cloning with a small tanh MLP, cross-entropy loss and Adam."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .envs import Policy
from .errors import SDRError
from .seeding import derive_seed

_CKPT_MAGIC = b"MLPC"


class EmptyBatchError(SDRError, ValueError):
    pass


class MlpPolicy:
    """Layers ``dims[0] -> ... -> dims[-1]``; tanh hidden units, softmax output.

    All parameters live in one flat float64 vector ``theta``; ``weights`` and
    ``biases`` are views into it.
    """

    def __init__(self, dims, theta):
        self.dims = tuple(int(d) for d in dims)
        self.theta = np.ascontiguousarray(theta, dtype=np.float64)
        if self.theta.shape != (n_params(self.dims),):
            raise ValueError("parameter vector does not match layer sizes")
        self.weights, self.biases = [], []
        pos = 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            self.weights.append(self.theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            self.biases.append(self.theta[pos:pos + fan_out])
            pos += fan_out

    @property
    def n_actions(self) -> int:
        return self.dims[-1]

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpPolicy":
        return MlpPolicy(self.dims, self.theta.copy())


def n_params(dims) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def init_mlp(dims, seed: int) -> MlpPolicy:
    """Glorot-uniform weights, zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer sizes {dims}")
    rng = np.random.default_rng(int(seed))
    parts = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-lim, lim, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return MlpPolicy(dims, np.concatenate(parts))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(policy: MlpPolicy, x: np.ndarray):
    acts = [x]
    h = x
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def logits(policy: MlpPolicy, states) -> np.ndarray:
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] != policy.dims[0]:
        raise ValueError(f"state dimension {x.shape[1]} != input width {policy.dims[0]}")
    return _forward(policy, x)[-1]


def forward(policy: MlpPolicy, states) -> np.ndarray:
    """Action distribution for each row of ``states``."""
    return _softmax(logits(policy, states))


def loss_and_grad(policy: MlpPolicy, states, actions, weights=None):
    """Cross-entropy ``-log pi(a*|s)`` averaged over the batch, and its exact gradient.

    ``weights`` (optional, nonnegative) turn the mean into a weighted mean;
    a row with weight c counts as c copies of itself. The gradient is a flat
    vector laid out like ``policy.theta``.
    """
    x = np.asarray(states, dtype=np.float64)
    y = np.asarray(actions, dtype=np.int64)
    if len(y) == 0:
        raise EmptyBatchError("empty batch")
    if x.ndim == 1:
        x = x[None]
    n = len(y)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64) / np.sum(weights)
    acts = _forward(policy, x)
    z = acts[-1]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(w @ (logsum - z[rows, y]))
    delta = np.exp(z - logsum[:, None])
    delta[rows, y] -= 1.0
    delta *= w[:, None]
    parts = []
    for i in range(len(policy.weights) - 1, -1, -1):
        parts.append(delta.sum(axis=0))
        parts.append((acts[i].T @ delta).ravel())
        if i:
            delta = (delta @ policy.weights[i].T) * (1.0 - acts[i] ** 2)
    # parts were pushed last layer first as (b, W)
    return loss, np.concatenate(parts[::-1])


def unflatten(policy: MlpPolicy, flat) -> list:
    """Split a flat gradient into per-layer arrays matching ``policy.params()``."""
    return MlpPolicy(policy.dims, flat).params()


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, theta) -> "AdamState":
        return cls(np.zeros_like(theta), np.zeros_like(theta), 0)


def adam_update(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam step on the flat parameter vector."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    theta -= (lr / c1) * state.m / (np.sqrt(state.v / c2) + eps)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    hidden: int = 64
    n_hidden: int = 2
    repeat_to: int | None = None  # None: train on the subset as-is
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0 or self.epochs < 0 or self.hidden < 1:
            raise ValueError("training hyperparameters must be positive")


def steps_per_epoch(n_subset: int, cfg: TrainConfig) -> int:
    rows = cfg.repeat_to if cfg.repeat_to else n_subset
    return math.ceil(rows / cfg.batch_size)


def train_bc(features, labels, cfg: TrainConfig, n_actions: int, history: list | None = None) -> MlpPolicy:
    """Fit an MlpPolicy to (features, labels).

    The subset is tiled cyclically to ``cfg.repeat_to`` rows, so the number
    of optimizer steps depends only on (repeat_to, batch_size, epochs).
    Each epoch reshuffles with seed ``derive_seed(cfg.seed, "epoch", e)``.
    If ``history`` is given, the full-subset loss after every epoch is appended.

    Minibatches are evaluated on their distinct (feature, label) rows with
    multiplicity weights, which gives the same loss and gradient as the
    expanded batch.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise EmptyBatchError("cannot train on an empty subset")
    dims = (x.shape[1],) + (cfg.hidden,) * cfg.n_hidden + (n_actions,)
    policy = init_mlp(dims, derive_seed(cfg.seed, "init"))
    rows = cfg.repeat_to if cfg.repeat_to else len(y)
    uniq, key = np.unique(np.column_stack([x, y]), axis=0, return_inverse=True)
    key = np.asarray(key).reshape(-1)
    ux, uy = uniq[:, :-1], uniq[:, -1].astype(np.int64)
    U = len(uniq)
    tiled = key[np.resize(np.arange(len(y)), rows)]
    state = AdamState.zeros_like(policy.theta)
    B = cfg.batch_size
    for epoch in range(cfg.epochs):
        perm = tiled[np.random.default_rng(derive_seed(cfg.seed, "epoch", epoch)).permutation(rows)]
        for lo in range(0, rows, B):
            counts = np.bincount(perm[lo:lo + B], minlength=U)
            hit = np.flatnonzero(counts)
            _, grad = loss_and_grad(policy, ux[hit], uy[hit], counts[hit])
            adam_update(policy.theta, grad, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        if history is not None:
            history.append(loss_and_grad(policy, ux, uy, np.bincount(key, minlength=U))[0])
    return policy


class BCPolicy(Policy):
    """Environment-facing wrapper: featurize states, then run the MLP."""

    def __init__(self, mlp: MlpPolicy, featurize, greedy: bool = True):
        super().__init__(mlp.n_actions)
        self.mlp = mlp
        self.featurize = featurize
        self.deterministic = greedy

    def probs(self, states) -> np.ndarray:
        return forward(self.mlp, self.featurize(states))


def train_policy(env, bc, indices, cfg: TrainConfig, history: list | None = None) -> BCPolicy:
    """Train on the pairs ``indices`` of ``bc``; index order is irrelevant."""
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    feats = env.featurize(bc.states[idx])
    mlp = train_bc(feats, bc.expert_actions[idx], cfg, env.n_actions, history)
    return BCPolicy(mlp, env.featurize)


# ---------------------------------------------------------------------------
# checkpoints: MLPC | u64 header_len | JSON header | f64 LE parameters


def save_checkpoint(policy: MlpPolicy, path, **meta) -> None:
    header = {"dims": list(policy.dims), "activation": "tanh", "output": "softmax", "dtype": "f64le"}
    header.update(meta)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb)
        fh.write(policy.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> MlpPolicy:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise SDRError("not a policy checkpoint")
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    dims = tuple(header["dims"])
    flat = np.frombuffer(buf, dtype="<f8", offset=12 + hlen).astype(np.float64)
    if len(flat) != n_params(dims):
        raise SDRError("checkpoint parameter blob has the wrong size")
    return MlpPolicy(dims, flat)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
