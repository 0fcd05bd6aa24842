"""Small dense networks with hand-rolled backprop.

Networks are rectified-linear MLPs (two hidden layers in the main models,
one in the fit embedding) trained with an L1 objective and Adam-style
updates.  Forward in inference mode is a pure function of the parameters;
training is reproducible bit for bit under a fixed seed.  Dropout uses
inverted scaling, so inference needs no rescale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    """Training aborted (empty data or non-finite loss)."""


@dataclass
class Mlp:
    """Dense ReLU network: weights/biases per layer, identity output."""

    weights: list  # [(d_in, h), ..., (h, d_out)]
    biases: list
    dropout: float = 0.2

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def create(cls, dims, seed, dropout=0.2, out_scale=0.1):
        """He-initialized network for the given layer sizes.

        The output layer is shrunk by `out_scale` so predictions start
        near zero, which suits meter-scale displacement targets.
        """
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / d_in)
            if i == len(dims) - 2:
                scale *= out_scale
            weights.append(rng.normal(0.0, scale, size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(weights=weights, biases=biases, dropout=dropout)

    def copy(self):
        return Mlp(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            dropout=self.dropout,
        )

    def parameters(self):
        return list(self.weights) + list(self.biases)


def make_dropout_mask(mlp, rng, batch_shape=()):
    """Inverted-scaling mask for the last hidden layer, or None when p=0."""
    if mlp.dropout <= 0.0:
        return None
    width = mlp.weights[-1].shape[0]
    keep = rng.random(size=batch_shape + (width,)) >= mlp.dropout
    return keep / (1.0 - mlp.dropout)


def forward(mlp, x, training=False, rng=None, mask=None):
    """Evaluate the network on (..., d_in) inputs.

    In training mode a dropout mask scales the last hidden activation;
    pass `mask` to pin it (finite-difference checks) or `rng` to sample
    one.  Inference mode is deterministic and mask-free.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mlp.weights[0].shape[0]:
        raise ValueError(
            f"input width {x.shape[-1]} != expected {mlp.weights[0].shape[0]}"
        )
    if training and mask is None and rng is not None:
        mask = make_dropout_mask(mlp, rng, x.shape[:-1])
    h = x
    last_hidden = mlp.n_layers - 2
    for i in range(mlp.n_layers):
        h = h @ mlp.weights[i] + mlp.biases[i]
        if i < mlp.n_layers - 1:
            h = np.maximum(h, 0.0)
            if training and mask is not None and i == last_hidden:
                h = h * mask
    return h


def forward_cached(mlp, x, mask=None):
    """Forward pass that keeps pre/post activations for backprop."""
    x = np.asarray(x, dtype=np.float64)
    acts = [x]
    h = x
    last_hidden = mlp.n_layers - 2
    pre = []
    for i in range(mlp.n_layers):
        z = h @ mlp.weights[i] + mlp.biases[i]
        pre.append(z)
        if i < mlp.n_layers - 1:
            h = np.maximum(z, 0.0)
            if mask is not None and i == last_hidden:
                h = h * mask
        else:
            h = z
        acts.append(h)
    return h, (acts, pre, mask)


def backward(mlp, x, upstream, mask=None):
    """Exact reverse-mode gradients of `forward` w.r.t. all parameters.

    `upstream` is dLoss/dOutput with the same shape as the output.
    Returns (weight_grads, bias_grads, input_grad).
    """
    _, (acts, pre, mask) = forward_cached(mlp, x, mask=mask)
    upstream = np.asarray(upstream, dtype=np.float64)
    grad_w = [None] * mlp.n_layers
    grad_b = [None] * mlp.n_layers
    delta = upstream
    last_hidden = mlp.n_layers - 2
    for i in reversed(range(mlp.n_layers)):
        a_in = acts[i]
        grad_w[i] = _stack_dot(a_in, delta)
        grad_b[i] = delta.reshape(-1, delta.shape[-1]).sum(axis=0)
        delta = delta @ mlp.weights[i].T
        if i > 0:
            if mask is not None and (i - 1) == last_hidden:
                delta = delta * mask
            delta = delta * (pre[i - 1] > 0.0)
    return grad_w, grad_b, delta


def _stack_dot(a, b):
    a2 = a.reshape(-1, a.shape[-1])
    b2 = b.reshape(-1, b.shape[-1])
    return a2.T @ b2


def l1_loss(pred, target):
    """Mean absolute difference over every entry."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


def l1_grad(pred, target):
    return np.sign(pred - target) / pred.size


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    weight_decay: float = 1e-5
    validation_fraction: float = 0.1

    def check(self):
        if min(self.learning_rate, self.batch_size, self.epochs) <= 0:
            raise ValueError("learning rate, batch size and epochs must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")
        return self


@dataclass
class LossCurve:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def as_array(self):
        val = self.validation if self.validation else [np.nan] * len(self.train)
        return np.column_stack([self.train, val])


def train(mlp, dataset, config):
    """Mini-batch Adam on the L1 objective.

    `dataset` is a list of (input, target) pairs.  Returns the trained
    network and the per-epoch loss curve; identical seeds give identical
    parameters.
    """
    config.check()
    if not dataset:
        raise TrainingError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    X = np.stack([np.asarray(x, dtype=np.float64).ravel() for x, _ in dataset])
    Y = np.stack([np.asarray(y, dtype=np.float64).ravel() for _, y in dataset])

    n_val = int(round(config.validation_fraction * len(X)))
    order = rng.permutation(len(X))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise TrainingError("validation split left no training data")
    Xt, Yt = X[train_idx], Y[train_idx]
    Xv, Yv = X[val_idx], Y[val_idx]

    model = mlp.copy()
    params = model.parameters()
    m_t = [np.zeros_like(p) for p in params]
    v_t = [np.zeros_like(p) for p in params]
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    step = 0
    curve = LossCurve()

    for _ in range(config.epochs):
        perm = rng.permutation(len(Xt))
        epoch_loss = 0.0
        for start in range(0, len(Xt), config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = Xt[idx], Yt[idx]
            mask = make_dropout_mask(model, rng, xb.shape[:-1])
            pred, cache = forward_cached(model, xb, mask=mask)
            loss = l1_loss(pred, yb)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at step {step}: {loss}"
                )
            epoch_loss += loss * len(idx)
            grad_w, grad_b, _ = _backward_from_cache(
                model, cache, l1_grad(pred, yb)
            )
            grads = grad_w + grad_b
            step += 1
            lr_t = (
                config.learning_rate
                * np.sqrt(1.0 - beta2**step)
                / (1.0 - beta1**step)
            )
            for p, g, m_buf, v_buf in zip(params, grads, m_t, v_t):
                if config.weight_decay and p.ndim == 2:
                    g = g + config.weight_decay * p
                m_buf *= beta1
                m_buf += (1 - beta1) * g
                v_buf *= beta2
                v_buf += (1 - beta2) * g * g
                p -= lr_t * m_buf / (np.sqrt(v_buf) + eps_adam)
        curve.train.append(epoch_loss / len(Xt))
        if len(Xv):
            curve.validation.append(l1_loss(forward(model, Xv), Yv))
    return model, curve


def _backward_from_cache(mlp, cache, upstream):
    acts, pre, mask = cache
    grad_w = [None] * mlp.n_layers
    grad_b = [None] * mlp.n_layers
    delta = np.asarray(upstream, dtype=np.float64)
    last_hidden = mlp.n_layers - 2
    for i in reversed(range(mlp.n_layers)):
        grad_w[i] = _stack_dot(acts[i], delta)
        grad_b[i] = delta.reshape(-1, delta.shape[-1]).sum(axis=0)
        delta = delta @ mlp.weights[i].T
        if i > 0:
            if mask is not None and (i - 1) == last_hidden:
                delta = delta * mask
            delta = delta * (pre[i - 1] > 0.0)
    return grad_w, grad_b, delta


def finite_difference_check(mlp, x, upstream, mask=None, step=1e-4):
    """Max relative error between backprop and central finite differences."""
    grad_w, grad_b, _ = backward(mlp, x, upstream, mask=mask)
    analytic = grad_w + grad_b
    worst = 0.0
    for p, g in zip(mlp.parameters(), analytic):
        it = np.ndindex(p.shape)
        for idx in it:
            orig = p[idx]
            p[idx] = orig + step
            up = float(
                np.sum(np.asarray(upstream) * forward(mlp, x, mask=mask, training=mask is not None))
            )
            p[idx] = orig - step
            down = float(
                np.sum(np.asarray(upstream) * forward(mlp, x, mask=mask, training=mask is not None))
            )
            p[idx] = orig
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric) + abs(g[idx]), 1e-8)
            worst = max(worst, abs(numeric - g[idx]) / denom)
    return worst


def mlp_to_chunks(mlp, prefix=""):
    chunks = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        chunks[f"{prefix}w{i}"] = w
        chunks[f"{prefix}b{i}"] = b
    chunks[f"{prefix}dropout"] = np.array([mlp.dropout], dtype=np.float64)
    return chunks


def mlp_from_chunks(chunks, prefix=""):
    weights, biases = [], []
    i = 0
    while f"{prefix}w{i}" in chunks:
        weights.append(np.asarray(chunks[f"{prefix}w{i}"], dtype=np.float64))
        biases.append(np.asarray(chunks[f"{prefix}b{i}"], dtype=np.float64).ravel())
        i += 1
    if not weights:
        raise KeyError(f"no layers found under prefix {prefix!r}")
    dropout = float(np.asarray(chunks[f"{prefix}dropout"]).ravel()[0])
    return Mlp(weights=weights, biases=biases, dropout=dropout)
