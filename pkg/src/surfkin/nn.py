"""Minimal multilayer perceptron with exact reverse-mode gradients.

Hidden layers use ReLU, the output layer is linear, and everything runs in
float64 so finite-difference audits stay tight. Training is mini-batch Adam;
per-sample losses come from caller-supplied evaluators so composite losses
(for example a loss routed through the RBF warp) plug in without the network
knowing about them. ReLU uses subgradient 0 at exact zeros.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MlpParams",
    "MlpGradients",
    "TrainConfig",
    "TrainHistory",
    "Standardizer",
    "DivergenceError",
    "init_mlp",
    "forward",
    "forward_batch",
    "param_gradient",
    "input_jacobian",
    "train",
    "mse_target",
    "checkpoint_dict",
    "mlp_from_checkpoint",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Raised when training hits a non-finite loss; carries the last finite params."""

    def __init__(self, message: str, last_params: "MlpParams"):
        super().__init__(message)
        self.last_params = last_params


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]  # per layer, shape (out, in)
    biases: list[np.ndarray]  # per layer, shape (out,)

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("layer count mismatch")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} has inconsistent shape")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class MlpGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 150
    seed: int = 0
    validation_fraction: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)  # nan when no split

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_loss))


@dataclass
class Standardizer:
    """Per-feature affine normalization used around network inputs/outputs."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")

    @staticmethod
    def fit(data: np.ndarray, floor: float = 1e-8) -> "Standardizer":
        data = np.asarray(data, dtype=np.float64)
        std = data.std(axis=0)
        return Standardizer(data.mean(axis=0), np.maximum(std, floor))

    @staticmethod
    def identity(dim: int) -> "Standardizer":
        return Standardizer(np.zeros(dim), np.ones(dim))

    def encode(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def decode(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.scale + self.mean


def init_mlp(layer_dims: list[int], seed: int) -> MlpParams:
    """He-style uniform initialization scaled by fan-in; biases start at zero."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(list(layer_dims), weights, biases)


def forward_batch(m: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass over a (batch, in_dim) matrix; also returns the
    post-activation matrices needed for backprop (inputs first)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.in_dim:
        raise ValueError("input dimension mismatch")
    activations = [x]
    h = x
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.maximum(h, 0.0)
        activations.append(h)
    return h, activations


def forward(m: MlpParams, x: np.ndarray) -> np.ndarray:
    """Network output for one input vector."""
    out, _ = forward_batch(m, np.asarray(x, dtype=np.float64)[None, :])
    return out[0]


def _backprop(m: MlpParams, activations: list[np.ndarray],
              upstream: np.ndarray) -> tuple[MlpGradients, np.ndarray]:
    """Shared reverse pass: returns parameter gradients summed over the batch
    and the gradient with respect to the inputs."""
    grads_w = [None] * len(m.weights)
    grads_b = [None] * len(m.biases)
    delta = upstream
    for i in range(len(m.weights) - 1, -1, -1):
        grads_w[i] = delta.T @ activations[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ m.weights[i]) * (activations[i] > 0.0)
    return MlpGradients(grads_w, grads_b), delta @ m.weights[0] if m.weights else delta


def param_gradient(m: MlpParams, x: np.ndarray, upstream: np.ndarray) -> MlpGradients:
    """Exact gradients of <upstream, forward(x)> with respect to all parameters."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (m.out_dim,):
        raise ValueError("upstream dimension mismatch")
    _, acts = forward_batch(m, np.asarray(x, dtype=np.float64)[None, :])
    grads, _ = _backprop(m, acts, upstream[None, :])
    return grads


def input_jacobian(m: MlpParams, x: np.ndarray) -> np.ndarray:
    """Exact Jacobian d forward / d x, shape (out_dim, in_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.in_dim,):
        raise ValueError("input dimension mismatch")
    _, acts = forward_batch(m, x[None, :])
    jac = m.weights[0]
    for i in range(1, len(m.weights)):
        mask = (acts[i][0] > 0.0).astype(np.float64)
        jac = m.weights[i] @ (mask[:, None] * jac)
    return jac


def mse_target(target: np.ndarray):
    """Loss evaluator for plain regression: mean squared error to ``target``."""
    target = np.asarray(target, dtype=np.float64)

    def evaluate(y: np.ndarray) -> tuple[float, np.ndarray]:
        diff = y - target
        return float(np.mean(diff * diff)), (2.0 / len(target)) * diff

    return evaluate


def _dataset_pass(m, inputs, evaluators, idx):
    """Average loss of ``idx`` samples without updating parameters."""
    out, _ = forward_batch(m, inputs[idx])
    return float(np.mean([evaluators[i](out[j])[0] for j, i in enumerate(idx)]))


def train(m: MlpParams, dataset, cfg: TrainConfig) -> tuple[MlpParams, TrainHistory]:
    """Mini-batch Adam over (input, loss-evaluator) pairs.

    The batch forward/backward passes are matrix-level; evaluators are called
    per sample on output rows and their upstream gradients are stacked, so the
    reduction order is the in-batch index order. Deterministic given the seed.
    Raises :class:`DivergenceError` on a non-finite loss, carrying the last
    finite epoch's parameters.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in dataset])
    evaluators = [ev for _, ev in dataset]
    rng = np.random.default_rng(cfg.seed)

    n = len(dataset)
    perm = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n))
    val_idx = perm[n - n_val :]
    train_idx = perm[: n - n_val]
    if len(train_idx) == 0:
        raise ValueError("validation split leaves no training samples")

    params = m.copy()
    adam_m = [np.zeros_like(w) for w in params.weights] + [np.zeros_like(b) for b in params.biases]
    adam_v = [np.zeros_like(a) for a in adam_m]
    step = 0
    history = TrainHistory()
    last_finite = params.copy()

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = train_idx[order[start : start + cfg.batch_size]]
            out, acts = forward_batch(params, inputs[batch])
            losses = []
            upstream = np.empty_like(out)
            for row, sample in enumerate(batch):
                loss_i, up_i = evaluators[sample](out[row])
                losses.append(loss_i)
                upstream[row] = up_i
            batch_loss = float(np.sum(losses))
            if not np.isfinite(batch_loss):
                raise DivergenceError("divergence", last_finite)
            epoch_loss += batch_loss
            grads, _ = _backprop(params, acts, upstream)
            step += 1
            flat = grads.weights + grads.biases
            tensors = params.weights + params.biases
            for t, g, mm, vv in zip(tensors, flat, adam_m, adam_v):
                mm *= ADAM_BETA1
                mm += (1 - ADAM_BETA1) * g
                vv *= ADAM_BETA2
                vv += (1 - ADAM_BETA2) * g * g
                m_hat = mm / (1 - ADAM_BETA1**step)
                v_hat = vv / (1 - ADAM_BETA2**step)
                t -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        train_loss = epoch_loss / len(train_idx)
        val_loss = _dataset_pass(params, inputs, evaluators, val_idx) if n_val else float("nan")
        if n_val and not np.isfinite(val_loss):
            raise DivergenceError("divergence", last_finite)
        history.epochs.append(epoch)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        last_finite = params.copy()
    return params, history


# --- checkpoints -------------------------------------------------------------


def checkpoint_dict(m: MlpParams, input_norm: Standardizer,
                    output_norm: Standardizer, seed: int) -> dict:
    return {
        "layer_dims": list(m.layer_dims),
        "weights": [w.tolist() for w in m.weights],
        "biases": [b.tolist() for b in m.biases],
        "input_norm": {"mean": input_norm.mean.tolist(), "scale": input_norm.scale.tolist()},
        "output_norm": {"mean": output_norm.mean.tolist(), "scale": output_norm.scale.tolist()},
        "seed": seed,
    }


def mlp_from_checkpoint(data: dict) -> tuple[MlpParams, Standardizer, Standardizer, int]:
    params = MlpParams(
        list(data["layer_dims"]),
        [np.asarray(w) for w in data["weights"]],
        [np.asarray(b) for b in data["biases"]],
    )
    in_norm = Standardizer(np.asarray(data["input_norm"]["mean"]), np.asarray(data["input_norm"]["scale"]))
    out_norm = Standardizer(np.asarray(data["output_norm"]["mean"]), np.asarray(data["output_norm"]["scale"]))
    return params, in_norm, out_norm, int(data["seed"])


def save_checkpoint(path, m: MlpParams, input_norm: Standardizer,
                    output_norm: Standardizer, seed: int) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(m, input_norm, output_norm, seed), fh)


def load_checkpoint(path) -> tuple[MlpParams, Standardizer, Standardizer, int]:
    with open(path) as fh:
        return mlp_from_checkpoint(json.load(fh))
