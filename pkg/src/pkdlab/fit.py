"""Shared SGD training loops for the from-scratch models.

Normalized windows have tiny per-feature scale (std around 0.05), which
makes plain SGD on raw inputs crawl. The trainers here z-score inputs
(and regression targets), train in the well-conditioned space, then
fold the affine transforms exactly into the first and last layers, so
every returned model operates on raw inputs. Constant features keep
sigma = 1 so the fold stays finite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .seeding import rng_from

# pretraining regularization regimes: (dropout_rate, l2_coeff)
CONSTRICTION = {"slight": (0.0, 1e-6), "heavy": (0.5, 1e-2)}


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 60
    batch_size: int = 32
    anchor_weight: float = 1.0
    constriction: str = "slight"
    seed: int = 0
    momentum: float = 0.9
    patience: int = 10
    # teacher-side: pretrained sub-nets fine-tune far slower than the
    # fresh head, or label noise rewrites the prior they encode
    lr_subnets: float = 0.0         # sub-net rate; 0 freezes them

    @property
    def subnet_rate(self) -> float:
        return max(self.lr_subnets, 0.0)

    def __post_init__(self):
        if self.constriction not in CONSTRICTION:
            raise ValueError(f"unknown constriction {self.constriction!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad batch_size/epochs")


def standardize_fit(x):
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma = np.where(sigma < 1e-9, 1.0, sigma)
    return mu, sigma


def fold_input_standardization(model: nn.Mlp, mu, sigma):
    """Rewrite layer 0 so model(raw) equals the trained model((raw-mu)/sigma)."""
    w = model.weights[0]
    model.biases[0] = model.biases[0] - w @ (mu / sigma)
    model.weights[0] = w / sigma[np.newaxis, :]
    return model


def fold_output_destandardization(model: nn.Mlp, mu_y, sigma_y):
    """Rewrite the identity output layer to undo target z-scoring."""
    if model.activations[-1] != "identity":
        raise ValueError("output fold needs an identity output layer")
    model.weights[-1] = model.weights[-1] * sigma_y
    model.biases[-1] = model.biases[-1] * sigma_y + mu_y
    return model


def onehot(labels) -> np.ndarray:
    return np.eye(2)[np.asarray(labels, dtype=int)]


def predict_probs(model: nn.Mlp, x) -> np.ndarray:
    out, _ = nn.forward(model, x)
    return out


def eval_accuracy(model: nn.Mlp, x, labels) -> float:
    return nn.accuracy(predict_probs(model, x), labels)


def r_squared(pred, target) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    ss_res = float(np.sum((target - pred) ** 2))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def _snapshot(model):
    return [w.copy() for w in model.weights], [b.copy() for b in model.biases]


def _restore(model, snap):
    model.weights = [w.copy() for w in snap[0]]
    model.biases = [b.copy() for b in snap[1]]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_classifier(model: nn.Mlp, x, labels, x_valid, labels_valid,
                     cfg: TrainConfig, fold_inputs=True):
    """CE training with early stopping on validation accuracy.

    Inputs are z-scored for optimization; the transform is folded back
    into the first layer so the returned model takes raw inputs.
    Returns (model, history); history rows are per-epoch dicts.
    """
    if cfg.epochs == 0:
        return model, []        # untouched, no fold
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=int)
    targets = onehot(labels)
    if fold_inputs:
        mu, sigma = standardize_fit(x)
        xs = (x - mu) / sigma
        xv = (np.asarray(x_valid, dtype=float) - mu) / sigma
    else:
        xs = x
        xv = np.asarray(x_valid, dtype=float)
    labels_valid = np.asarray(labels_valid, dtype=int)

    rng_batch = rng_from(cfg.seed, "batches")
    rng_drop = rng_from(cfg.seed, "dropout")
    opt = nn.OptState(learning_rate=cfg.learning_rate, momentum=cfg.momentum)
    history = []
    best = (-1.0, _snapshot(model), 0)
    for epoch in range(cfg.epochs):
        losses, hits, seen = [], 0, 0
        for idx in _batches(len(xs), cfg.batch_size, rng_batch):
            out, cache = nn.forward(model, xs[idx], train_mode=True,
                                    rng=rng_drop)
            loss, lgrad = nn.cross_entropy(out, targets[idx])
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            grad = nn.backward(model, cache, lgrad)
            nn.sgd_step(model, grad, opt)
            losses.append(loss)
            hits += int(np.sum(nn.predict_labels(out) == labels[idx]))
            seen += len(idx)
        valid_out = predict_probs(model, xv)
        valid_loss, _ = nn.cross_entropy(valid_out, onehot(labels_valid))
        valid_acc = nn.accuracy(valid_out, labels_valid)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "train_acc": hits / seen, "valid_loss": valid_loss,
                        "valid_acc": valid_acc})
        if valid_acc > best[0]:
            best = (valid_acc, _snapshot(model), epoch)
        elif epoch - best[2] >= cfg.patience:
            break
    _restore(model, best[1])
    if fold_inputs:
        fold_input_standardization(model, mu, sigma)
    return model, history


def train_regressor(model: nn.Mlp, x, targets, x_valid, targets_valid,
                    cfg: TrainConfig):
    """MSE training; inputs and targets both z-scored and folded back.

    Early stopping tracks validation MSE. Returns (model, history).
    """
    if cfg.epochs == 0:
        return model, []        # untouched, no fold
    x = np.asarray(x, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(len(x), -1)
    mu, sigma = standardize_fit(x)
    mu_y, sigma_y = standardize_fit(targets)
    xs = (x - mu) / sigma
    ts = (targets - mu_y) / sigma_y
    xv = (np.asarray(x_valid, dtype=float) - mu) / sigma
    tv = (np.asarray(targets_valid, dtype=float).reshape(len(x_valid), -1)
          - mu_y) / sigma_y

    rng_batch = rng_from(cfg.seed, "batches")
    rng_drop = rng_from(cfg.seed, "dropout")
    opt = nn.OptState(learning_rate=cfg.learning_rate, momentum=cfg.momentum)
    history = []
    best = (np.inf, _snapshot(model), 0)
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(xs), cfg.batch_size, rng_batch):
            out, cache = nn.forward(model, xs[idx], train_mode=True,
                                    rng=rng_drop)
            loss, lgrad = nn.mse_loss(out, ts[idx])
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            grad = nn.backward(model, cache, lgrad)
            nn.sgd_step(model, grad, opt)
            losses.append(loss)
        valid_loss, _ = nn.mse_loss(predict_probs(model, xv), tv)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "valid_loss": valid_loss})
        if valid_loss < best[0]:
            best = (valid_loss, _snapshot(model), epoch)
        elif epoch - best[2] >= cfg.patience:
            break
    _restore(model, best[1])
    fold_input_standardization(model, mu, sigma)
    fold_output_destandardization(model, mu_y, sigma_y)
    return model, history
