"""Prior-knowledge network: the teacher.

Each indicator becomes a small regression sub-net trained on the
analytic indicator values; a softmax head fuses the sub-net outputs.
Teacher training minimizes cross-entropy plus an anchor penalty that
pulls sub-net outputs back toward the frozen analytic values, so the
prior knowledge survives the classification fine-tune.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .fit import (CONSTRICTION, TrainConfig, onehot, standardize_fit,
                  fold_input_standardization, train_regressor)
from .indicators import IndicatorSpec, evaluate
from .seeding import rng_from

SUBNET_HIDDEN = (32, 16)
HEAD_WIDTHS = (8,)          # hidden widths; in/out are k and 2


@dataclass
class SubNet:
    spec: IndicatorSpec
    net: nn.Mlp
    constriction: str


@dataclass
class PknModel:
    subnets: list
    head: nn.Mlp
    anchor_targets: np.ndarray      # (n_train, k) analytic indicator values
    anchor_weight: float = 1.0


def normalize(window) -> np.ndarray:
    """Scale-free inputs v_i = x_i / x_n - 1; the last entry is always 0."""
    window = np.asarray(window, dtype=float)
    if window[-1] == 0.0:
        raise ValueError("final price is zero")
    return window / window[-1] - 1.0


def sample_arrays(part):
    """(raw windows, normalized inputs, labels) for a list of samples."""
    w = np.stack([s.window for s in part])
    v = w / w[:, -1:] - 1.0
    labels = np.array([s.label for s in part], dtype=int)
    return w, v, labels


def pretrain_subnet(spec: IndicatorSpec, windows, cfg: TrainConfig):
    """Regression pretraining on analytic indicator values.

    The last tenth of the windows is held out for early stopping.
    Returns (SubNet, history).
    """
    windows = [np.asarray(w, dtype=float) for w in windows]
    width = windows[0].size
    targets = evaluate(spec, windows)
    v = np.stack([normalize(w) for w in windows])
    cut = max(1, int(0.9 * len(v)))
    dropout, l2 = CONSTRICTION[cfg.constriction]
    rng = rng_from(cfg.seed, "subnet-init", spec.kind, spec.lag_key())
    net = nn.init_mlp([width, *SUBNET_HIDDEN, 1],
                      ["tanh"] * len(SUBNET_HIDDEN) + ["identity"], rng,
                      dropout_rate=dropout, l2_coeff=l2)
    net, history = train_regressor(net, v[:cut], targets[:cut],
                                   v[cut:], targets[cut:], cfg)
    return SubNet(spec=spec, net=net, constriction=cfg.constriction), history


def subnet_r2(subnet: SubNet, windows) -> float:
    """Held-out fit quality of a pretrained sub-net, in raw target space."""
    from .fit import predict_probs, r_squared
    v = np.stack([normalize(w) for w in windows])
    pred = predict_probs(subnet.net, v)
    return r_squared(pred, evaluate(subnet.spec, windows))


def assemble_teacher(subnets, head_widths, cfg: TrainConfig,
                     train_windows) -> PknModel:
    """Fresh softmax head over the sub-nets; anchors frozen from formulas.

    The head's first layer is rescaled by the anchor column spreads so
    the small ROC scale does not starve its input weights.
    """
    if not subnets:
        raise ValueError("need at least one subnet")
    k = len(subnets)
    if head_widths[0] != k or head_widths[-1] != 2:
        raise ValueError("head widths must run from |subnets| to 2")
    anchors = np.column_stack(
        [evaluate(sn.spec, train_windows) for sn in subnets])
    rng = rng_from(cfg.seed, "head-init")
    head = nn.init_mlp(list(head_widths),
                       ["tanh"] * (len(head_widths) - 2) + ["softmax"], rng)
    mu, sigma = standardize_fit(anchors)
    fold_input_standardization(head, mu, sigma)
    return PknModel(subnets=list(subnets), head=head, anchor_targets=anchors,
                    anchor_weight=cfg.anchor_weight)


def teacher_forward(model: PknModel, v, train_mode=False, rng=None):
    """Composed forward; returns (probs, subnet_outputs, caches)."""
    outs, caches = [], []
    for sn in model.subnets:
        out, cache = nn.forward(sn.net, v, train_mode=train_mode, rng=rng)
        outs.append(out)
        caches.append(cache)
    features = np.concatenate(outs, axis=1)
    probs, head_cache = nn.forward(model.head, features,
                                   train_mode=train_mode, rng=rng)
    return probs, features, {"subnets": caches, "head": head_cache}


def predict(model: PknModel, window):
    """Probability pair (p_fall, p_rise) for one raw window."""
    v = normalize(window).reshape(1, -1)
    probs, _, _ = teacher_forward(model, v)
    return float(probs[0, 0]), float(probs[0, 1])


def teacher_loss(probs, labels, subnet_outputs, anchor_targets, anchor_weight):
    """CE plus anchor MSE; returns components and both output gradients."""
    labels = np.asarray(labels)
    target_probs = onehot(labels) if labels.ndim == 1 else labels
    ce, grad_probs = nn.cross_entropy(probs, target_probs)
    f = np.asarray(subnet_outputs, dtype=float)
    a = np.asarray(anchor_targets, dtype=float)
    if f.shape != a.shape:
        raise ValueError("subnet outputs and anchors differ in shape")
    diff = f - a
    anchor_term = float(np.mean(diff * diff, axis=0).sum())  # sum of per-subnet MSEs
    grad_features = anchor_weight * 2.0 * diff / f.shape[0]
    total = ce + anchor_weight * anchor_term
    return total, ce, anchor_term, grad_probs, grad_features


def _teacher_params(model):
    return [sn.net for sn in model.subnets] + [model.head]


def _snapshot_teacher(model):
    return [([w.copy() for w in net.weights], [b.copy() for b in net.biases])
            for net in _teacher_params(model)]


def _restore_teacher(model, snap):
    for net, (ws, bs) in zip(_teacher_params(model), snap):
        net.weights = [w.copy() for w in ws]
        net.biases = [b.copy() for b in bs]


def teacher_gradients(model, cache, grad_probs, grad_features):
    """Analytic gradients of the assembled loss for every component.

    Returns (subnet_grads, head_grad); the head's input gradient is
    combined with the anchor gradient before flowing into the sub-nets.
    """
    head_grad = nn.backward(model.head, cache["head"], grad_probs)
    d_features = head_grad["inputs"] + grad_features
    sub_grads = [nn.backward(sn.net, cache["subnets"][i],
                             d_features[:, i:i + 1])
                 for i, sn in enumerate(model.subnets)]
    return sub_grads, head_grad


def teacher_backward_step(model, cache, features, grad_probs, grad_features,
                          opts):
    """One coupled backward/update through head and sub-nets."""
    sub_grads, head_grad = teacher_gradients(model, cache, grad_probs,
                                             grad_features)
    nn.sgd_step(model.head, head_grad, opts[-1])
    for i, sn in enumerate(model.subnets):
        nn.sgd_step(sn.net, sub_grads[i], opts[i])


def train_teacher(model: PknModel, data, cfg: TrainConfig):
    """End-to-end fine-tune under CE + anchor, early stop on valid accuracy."""
    _, v_train, y_train = sample_arrays(data.train)
    _, v_valid, y_valid = sample_arrays(data.valid)
    anchors = model.anchor_targets
    if anchors.shape[0] != len(v_train):
        raise ValueError("anchor targets do not match the training set")
    targets = onehot(y_train)

    rng_batch = rng_from(cfg.seed, "batches")
    rng_drop = rng_from(cfg.seed, "dropout")
    opts = [nn.OptState(learning_rate=cfg.subnet_rate, momentum=cfg.momentum)
            for _ in model.subnets]
    opts.append(nn.OptState(learning_rate=cfg.learning_rate,
                            momentum=cfg.momentum))
    history = []
    best = (-1.0, _snapshot_teacher(model), 0)
    n = len(v_train)
    for epoch in range(cfg.epochs):
        order = rng_batch.permutation(n)
        losses, anchor_terms, hits = [], [], 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs, features, cache = teacher_forward(model, v_train[idx],
                                                     train_mode=True,
                                                     rng=rng_drop)
            total, ce, anchor_term, grad_probs, grad_features = teacher_loss(
                probs, targets[idx], features, anchors[idx],
                cfg.anchor_weight)
            if not np.isfinite(total):
                raise RuntimeError(f"teacher training diverged at epoch {epoch}")
            teacher_backward_step(model, cache, features, grad_probs,
                                  grad_features, opts)
            losses.append(total)
            anchor_terms.append(anchor_term)
            hits += int(np.sum(nn.predict_labels(probs) == y_train[idx]))
        valid_probs, _, _ = teacher_forward(model, v_valid)
        valid_loss, _ = nn.cross_entropy(valid_probs, onehot(y_valid))
        valid_acc = nn.accuracy(valid_probs, y_valid)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "train_acc": hits / n, "valid_loss": valid_loss,
                        "valid_acc": valid_acc,
                        "anchor_term": float(np.mean(anchor_terms))})
        if valid_acc > best[0]:
            best = (valid_acc, _snapshot_teacher(model), epoch)
        elif epoch - best[2] >= cfg.patience:
            break
    if cfg.epochs > 0:
        _restore_teacher(model, best[1])
    return model, history


def teacher_accuracy(model: PknModel, part) -> float:
    _, v, labels = sample_arrays(part)
    probs, _, _ = teacher_forward(model, v)
    return nn.accuracy(probs, labels)


def anchor_rms(model: PknModel, v_train) -> float:
    """RMS deviation of sub-net outputs from the frozen anchors."""
    _, features, _ = teacher_forward(model, v_train)
    return float(np.sqrt(np.mean((features - model.anchor_targets) ** 2)))


def param_count_teacher(model: PknModel) -> int:
    return sum(nn.param_count(net) for net in _teacher_params(model))


def clone_teacher(model: PknModel) -> PknModel:
    subnets = [SubNet(spec=sn.spec, net=nn.clone_mlp(sn.net),
                      constriction=sn.constriction)
               for sn in model.subnets]
    return PknModel(subnets=subnets, head=nn.clone_mlp(model.head),
                    anchor_targets=model.anchor_targets.copy(),
                    anchor_weight=model.anchor_weight)


def spec_to_dict(spec: IndicatorSpec) -> dict:
    return {"kind": spec.kind, "lag_fast": spec.lag_fast,
            "lag_slow": spec.lag_slow, "lag": spec.lag}


def spec_from_dict(doc: dict) -> IndicatorSpec:
    return IndicatorSpec(doc["kind"], lag_fast=doc["lag_fast"],
                         lag_slow=doc["lag_slow"], lag=doc["lag"])


def teacher_to_dict(model: PknModel) -> dict:
    return {
        "kind": "pkn-teacher",
        "anchor_weight": model.anchor_weight,
        "subnets": [{"spec": spec_to_dict(sn.spec),
                     "constriction": sn.constriction,
                     "net": nn.mlp_to_dict(sn.net)}
                    for sn in model.subnets],
        "head": nn.mlp_to_dict(model.head),
    }


def save_teacher(model: PknModel, path):
    with open(path, "w") as fh:
        json.dump(teacher_to_dict(model), fh)


def load_teacher(path) -> PknModel:
    with open(path) as fh:
        doc = json.load(fh)
    subnets = [SubNet(spec=spec_from_dict(s["spec"]),
                      net=nn.mlp_from_dict(s["net"]),
                      constriction=s["constriction"])
               for s in doc["subnets"]]
    return PknModel(subnets=subnets, head=nn.mlp_from_dict(doc["head"]),
                    anchor_targets=np.zeros((0, len(subnets))),
                    anchor_weight=float(doc["anchor_weight"]))


def teacher_hash(model: PknModel) -> str:
    canonical = json.dumps(teacher_to_dict(model), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def history_to_csv(history, path, columns=None):
    """Write per-epoch history dicts as CSV."""
    import csv
    if not history:
        columns = columns or ["epoch"]
    else:
        columns = columns or list(history[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([row.get(c, "") for c in columns])
