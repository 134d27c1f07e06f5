"""Dense MLP engine: forward, exact backward, losses, SGD.

Everything is plain numpy. Weight matrices are stored (out, in) so a
forward step is ``a @ W.T + b``. Dropout is inverted dropout on hidden
layers only; the L2 penalty ``l2_coeff * sum(theta^2)`` covers weights
and biases and its gradient is folded into ``backward``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity", "softmax")

EPS_LOG = 1e-12


@dataclass
class Mlp:
    layer_widths: list
    activations: list
    weights: list
    biases: list
    dropout_rate: float = 0.0
    l2_coeff: float = 0.0

    def __post_init__(self):
        n_layers = len(self.layer_widths) - 1
        if n_layers < 0:
            raise ValueError("layer_widths must be nonempty")
        if len(self.activations) != n_layers:
            raise ValueError("need one activation per layer")
        for act in self.activations[:-1]:
            if act == "softmax":
                raise ValueError("softmax allowed only on the final layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.l2_coeff < 0.0:
            raise ValueError("l2_coeff must be nonnegative")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_widths[k + 1], self.layer_widths[k])
            if w.shape != want or b.shape != (want[0],):
                raise ValueError(f"layer {k}: bad parameter shape")


@dataclass
class OptState:
    learning_rate: float
    momentum: float = 0.0
    step_count: int = 0
    velocities: list = field(default_factory=list)


def init_mlp(layer_widths, activations, rng, dropout_rate=0.0, l2_coeff=0.0) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_widths[:-1], layer_widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(list(layer_widths), list(activations), weights, biases,
               dropout_rate, l2_coeff)


def _activate(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    return z


def forward(model: Mlp, inputs, train_mode=False, rng=None):
    """Run the net; returns (outputs, cache) with cache feeding backward."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != model.layer_widths[0]:
        raise ValueError("inputs must be (n, input_width)")
    if not np.all(np.isfinite(inputs)):
        raise ValueError("non-finite inputs")
    use_dropout = train_mode and model.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode dropout needs an rng")

    n_layers = len(model.weights)
    a = inputs
    a_list = [inputs]   # post-dropout layer inputs
    h_list = []         # post-activation, pre-dropout
    z_list = []
    masks = []
    for k in range(n_layers):
        z = a @ model.weights[k].T + model.biases[k]
        h = _activate(model.activations[k], z)
        if use_dropout and k < n_layers - 1:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(h.shape) >= model.dropout_rate) / keep
            a = h * mask
        else:
            mask = None
            a = h
        z_list.append(z)
        h_list.append(h)
        masks.append(mask)
        a_list.append(a)
    cache = {"widths": tuple(model.layer_widths), "a": a_list, "h": h_list,
             "z": z_list, "masks": masks}
    return a, cache


def backward(model: Mlp, cache, loss_grad_at_output):
    """Exact gradients of loss + l2_coeff*sum(theta^2) w.r.t. all parameters."""
    if cache["widths"] != tuple(model.layer_widths):
        raise ValueError("cache does not match model")
    da = np.asarray(loss_grad_at_output, dtype=float)
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    l2 = model.l2_coeff
    for k in reversed(range(len(model.weights))):
        mask = cache["masks"][k]
        dh = da * mask if mask is not None else da
        h = cache["h"][k]
        act = model.activations[k]
        if act == "softmax":
            # full Jacobian: dz_i = p_i * (dh_i - sum_j dh_j p_j)
            dz = h * (dh - (dh * h).sum(axis=1, keepdims=True))
        elif act == "tanh":
            dz = dh * (1.0 - h * h)
        elif act == "relu":
            dz = dh * (cache["z"][k] > 0.0)
        else:
            dz = dh
        grad_w[k] = dz.T @ cache["a"][k] + 2.0 * l2 * model.weights[k]
        grad_b[k] = dz.sum(axis=0) + 2.0 * l2 * model.biases[k]
        da = dz @ model.weights[k]
    # da is now dL/dinputs, needed when nets are chained (teacher head ->
    # subnets); it carries no L2 contribution
    return {"weights": grad_w, "biases": grad_b, "inputs": da}


def l2_penalty(model: Mlp) -> float:
    total = 0.0
    for w, b in zip(model.weights, model.biases):
        total += np.sum(w * w) + np.sum(b * b)
    return model.l2_coeff * float(total)


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("pred/target shape mismatch")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def _check_prob_rows(p, name):
    if np.any(p < 0.0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError(f"{name} rows are not probability vectors")


def cross_entropy(pred_probs, target_probs):
    """Mean of -sum_k target_k * log(max(pred_k, eps)) over rows."""
    pred_probs = np.asarray(pred_probs, dtype=float)
    target_probs = np.asarray(target_probs, dtype=float)
    if pred_probs.shape != target_probs.shape:
        raise ValueError("pred/target shape mismatch")
    _check_prob_rows(pred_probs, "pred_probs")
    _check_prob_rows(target_probs, "target_probs")
    n = pred_probs.shape[0]
    clamped = np.maximum(pred_probs, EPS_LOG)
    loss = float(-np.sum(target_probs * np.log(clamped)) / n)
    grad = -(target_probs / clamped) / n
    return loss, grad


def sgd_step(model: Mlp, grad, opt: OptState):
    """In-place SGD with optional heavy-ball momentum."""
    for g in grad["weights"] + grad["biases"]:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    if not opt.velocities:
        opt.velocities = [np.zeros_like(w) for w in model.weights] + \
                         [np.zeros_like(b) for b in model.biases]
    params = model.weights + model.biases
    grads = grad["weights"] + grad["biases"]
    for p, g, v in zip(params, grads, opt.velocities):
        v *= opt.momentum
        v += g
        p -= opt.learning_rate * v
    opt.step_count += 1
    return model, opt


def param_count(model: Mlp) -> int:
    return sum(w.size + b.size for w, b in zip(model.weights, model.biases))


def predict_labels(probs):
    """Binary argmax; a tie goes to label 1."""
    probs = np.asarray(probs, dtype=float)
    return (probs[:, 1] >= probs[:, 0]).astype(int)


def accuracy(probs, labels) -> float:
    return float(np.mean(predict_labels(probs) == np.asarray(labels)))


def mlp_to_dict(model: Mlp) -> dict:
    return {
        "layer_widths": [int(w) for w in model.layer_widths],
        "activations": list(model.activations),
        "dropout_rate": model.dropout_rate,
        "l2_coeff": model.l2_coeff,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def mlp_from_dict(doc: dict) -> Mlp:
    return Mlp(
        list(doc["layer_widths"]),
        list(doc["activations"]),
        [np.asarray(w, dtype=float) for w in doc["weights"]],
        [np.asarray(b, dtype=float) for b in doc["biases"]],
        float(doc["dropout_rate"]),
        float(doc["l2_coeff"]),
    )


def save_mlp(model: Mlp, path):
    with open(path, "w") as fh:
        json.dump(mlp_to_dict(model), fh)


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        return mlp_from_dict(json.load(fh))


def clone_mlp(model: Mlp) -> Mlp:
    return Mlp(list(model.layer_widths), list(model.activations),
               [w.copy() for w in model.weights],
               [b.copy() for b in model.biases],
               model.dropout_rate, model.l2_coeff)
