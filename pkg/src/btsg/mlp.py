"""Small feed-forward regressor for imitating the optimal control.

Plain numpy: tanh hidden layers, affine output, mini-batch SGD with momentum
on mean-squared error. The pole angle is fed both raw and as (sin, cos) so
the regressor sees no 2-pi seam; the weights file records the input width,
which makes the featurization self-describing at load time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dynamics import OMEGA, THETA, V, X

WEIGHTS_MAGIC = b"BTNN1"


class BadMagic(ValueError):
    """Not a weights file (wrong or truncated magic/header)."""


class ShapeMismatch(ValueError):
    """Weights file header disagrees with its payload."""


class Degenerate(RuntimeError):
    """Training produced a NaN validation loss."""


def featurize(states):
    """Map raw states (…, 4) to network inputs (…, 6): x, v, th, om, sin th, cos th."""
    states = np.asarray(states, dtype=float)
    th = states[..., THETA]
    return np.concatenate(
        [states[..., (X, V, THETA, OMEGA)], np.sin(th)[..., None], np.cos(th)[..., None]],
        axis=-1,
    )


@dataclass
class MlpPolicy:
    """Layered affine + tanh function approximator with input normalization."""

    weights: list  # per layer, shape (n_out, n_in)
    biases: list  # per layer, shape (n_out,)
    norm_mean: np.ndarray
    norm_std: np.ndarray
    fingerprint: bytes = b"\x00" * 32

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def layer_sizes(self):
        return [self.n_inputs] + [w.shape[0] for w in self.weights]

    def _inputs(self, states):
        feats = featurize(states) if self.n_inputs == 6 else np.asarray(states, dtype=float)
        return (feats - self.norm_mean) / self.norm_std

    def forward_batch(self, states):
        a = self._inputs(np.atleast_2d(states))
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ w.T + b)
        return (a @ self.weights[-1].T + self.biases[-1])[:, 0]

    def predict(self, state) -> float:
        return float(self.forward_batch(np.asarray(state, dtype=float)[None, :])[0])


def forward(policy: MlpPolicy, state) -> float:
    """Raw (unclamped) network output for one state."""
    return policy.predict(state)


def init_policy(hidden, rng, n_inputs=6, norm_mean=None, norm_std=None) -> MlpPolicy:
    sizes = [n_inputs, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(1.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if norm_mean is None:
        norm_mean = np.zeros(n_inputs)
    if norm_std is None:
        norm_std = np.ones(n_inputs)
    return MlpPolicy(weights, biases, np.asarray(norm_mean, float), np.asarray(norm_std, float))


def loss_and_grads(policy: MlpPolicy, inputs, targets):
    """MSE loss and its gradients on already-normalized inputs.

    Inputs are (n, n_in) normalized features; used by both the training loop
    and the finite-difference gradient check.
    """
    n = len(inputs)
    acts = [inputs]
    a = inputs
    for w, b in zip(policy.weights[:-1], policy.biases[:-1]):
        a = np.tanh(a @ w.T + b)
        acts.append(a)
    out = (a @ policy.weights[-1].T + policy.biases[-1])[:, 0]
    err = out - targets
    loss = float(np.mean(err**2))

    grads_w = [None] * len(policy.weights)
    grads_b = [None] * len(policy.biases)
    delta = (2.0 / n) * err[:, None]  # (n, 1)
    grads_w[-1] = delta.T @ acts[-1]
    grads_b[-1] = delta.sum(axis=0)
    back = delta @ policy.weights[-1]
    for i in range(len(policy.weights) - 2, -1, -1):
        back = back * (1.0 - acts[i + 1] ** 2)
        grads_w[i] = back.T @ acts[i]
        grads_b[i] = back.sum(axis=0)
        if i > 0:
            back = back @ policy.weights[i]
    return loss, grads_w, grads_b


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 256
    epochs: int = 40
    val_split: float = 0.1
    rng_seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    hidden: tuple = (64, 64)
    max_lr_halvings: int = 3

    def __post_init__(self):
        if not 0 < self.val_split < 1:
            raise ValueError("val_split must be in (0, 1)")
        if min(self.learning_rate, self.batch_size, self.epochs) <= 0:
            raise ValueError("learning_rate, batch_size, epochs must be positive")


@dataclass
class TrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    learning_rate: float = 0.0
    halvings: int = 0
    n_train: int = 0
    n_val: int = 0
    seed: int = 0

    @property
    def final_val_loss(self) -> float:
        return self.val_losses[-1]

    def to_text(self) -> str:
        lines = [
            f"seed {self.seed}  lr {self.learning_rate}  halvings {self.halvings}",
            f"train {self.n_train}  val {self.n_val}",
            "epoch train_mse val_mse",
        ]
        for i, (tr, vl) in enumerate(zip(self.train_losses, self.val_losses)):
            lines.append(f"{i + 1} {tr:.8e} {vl:.8e}")
        return "\n".join(lines) + "\n"


def _run_training(states, controls, cfg: TrainConfig, lr: float):
    rng = np.random.default_rng(cfg.rng_seed)
    n = len(states)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_split * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    feats = featurize(states)
    mean = feats[train_idx].mean(axis=0)
    std = feats[train_idx].std(axis=0)
    std[std < 1e-12] = 1.0

    policy = init_policy(cfg.hidden, rng, n_inputs=feats.shape[1], norm_mean=mean, norm_std=std)
    x_train = (feats[train_idx] - mean) / std
    y_train = controls[train_idx]
    x_val = (feats[val_idx] - mean) / std
    y_val = controls[val_idx]

    vel_w = [np.zeros_like(w) for w in policy.weights]
    vel_b = [np.zeros_like(b) for b in policy.biases]
    report = TrainReport(learning_rate=lr, n_train=len(train_idx), n_val=n_val, seed=cfg.rng_seed)

    for _ in range(cfg.epochs):
        order = rng.permutation(len(x_train))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss, gw, gb = loss_and_grads(policy, x_train[sel], y_train[sel])
            epoch_loss += loss
            n_batches += 1
            for i in range(len(policy.weights)):
                if cfg.weight_decay:
                    gw[i] = gw[i] + cfg.weight_decay * policy.weights[i]
                vel_w[i] = cfg.momentum * vel_w[i] - lr * gw[i]
                vel_b[i] = cfg.momentum * vel_b[i] - lr * gb[i]
                policy.weights[i] += vel_w[i]
                policy.biases[i] += vel_b[i]
        val_loss, _, _ = loss_and_grads(policy, x_val, y_val)
        report.train_losses.append(epoch_loss / max(n_batches, 1))
        report.val_losses.append(val_loss)
        if np.isnan(val_loss):
            raise Degenerate("validation loss became NaN")
    return policy, report


def train(db, cfg: TrainConfig):
    """Fit the control regressor on a trajectory database.

    Deterministic for a fixed seed. If the final validation loss exceeds the
    first epoch's, the run is retried with the learning rate halved (up to
    cfg.max_lr_halvings times) and the halving count is recorded.
    """
    if db.n_records == 0:
        raise ValueError("database is empty")
    states = np.asarray(db.states, dtype=float)
    controls = np.asarray(db.controls, dtype=float)
    lr = cfg.learning_rate
    for halvings in range(cfg.max_lr_halvings + 1):
        policy, report = _run_training(states, controls, cfg, lr)
        report.halvings = halvings
        if report.val_losses[-1] <= report.val_losses[0]:
            return policy, report
        lr *= 0.5
    return policy, report


def save_weights(policy: MlpPolicy, path):
    """Binary weights file: magic, layer table, normalization, parameters,
    and the 32-byte fingerprint of the database the policy was trained on."""
    if len(policy.fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<Q", len(policy.weights)))
        for w in policy.weights:
            fh.write(struct.pack("<QQ", *w.shape))
        fh.write(struct.pack("<Q", policy.n_inputs))
        fh.write(policy.norm_mean.astype("<f8").tobytes())
        fh.write(policy.norm_std.astype("<f8").tobytes())
        for w in policy.weights:
            fh.write(w.astype("<f8").tobytes())
        for b in policy.biases:
            fh.write(b.astype("<f8").tobytes())
        fh.write(policy.fingerprint)


def load_weights(path) -> MlpPolicy:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 5 or data[:5] != WEIGHTS_MAGIC:
        raise BadMagic(f"not a {WEIGHTS_MAGIC!r} weights file: {path}")
    off = 5

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise BadMagic(f"truncated weights file: {path}")
        chunk = data[off : off + n]
        off += n
        return chunk

    (n_layers,) = struct.unpack("<Q", take(8))
    if n_layers == 0 or n_layers > 64:
        raise ShapeMismatch(f"implausible layer count {n_layers}")
    shapes = [struct.unpack("<QQ", take(16)) for _ in range(n_layers)]
    (n_in,) = struct.unpack("<Q", take(8))
    if shapes[0][1] != n_in:
        raise ShapeMismatch(f"first layer expects {shapes[0][1]} inputs, header says {n_in}")
    for (r1, _), (_, c2) in zip(shapes[:-1], shapes[1:]):
        if r1 != c2:
            raise ShapeMismatch("adjacent layer shapes do not chain")
    if shapes[-1][0] != 1:
        raise ShapeMismatch("output layer must have one unit")
    mean = np.frombuffer(take(8 * n_in), dtype="<f8").copy()
    std = np.frombuffer(take(8 * n_in), dtype="<f8").copy()
    weights = [
        np.frombuffer(take(8 * r * c), dtype="<f8").reshape(r, c).copy() for r, c in shapes
    ]
    biases = [np.frombuffer(take(8 * r), dtype="<f8").copy() for r, _ in shapes]
    fingerprint = take(32)
    if off != len(data):
        raise ShapeMismatch(f"{len(data) - off} trailing bytes in {path}")
    return MlpPolicy(weights, biases, mean, std, fingerprint)
