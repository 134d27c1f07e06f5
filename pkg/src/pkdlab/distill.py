"""Co-distillation of the teacher and a compact student.

Each network's loss is cross-entropy against the hard labels plus a
peer term: cross-entropy against the other network's current
predictions, treated as constants (stop-gradient). Updates within a
batch use the same pre-update peer snapshots. The teacher keeps its
anchor penalty during co-distillation so the prior knowledge is not
distilled away.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .fit import TrainConfig, onehot, train_classifier
from .pkn import (PknModel, sample_arrays, teacher_backward_step,
                  teacher_forward, teacher_loss, param_count_teacher)
from .seeding import rng_from

STUDENT_HIDDEN = (12,)


@dataclass
class StudentModel:
    net: nn.Mlp


@dataclass
class CodistillConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.05
    peer_weight: float = 1.0        # beta
    anchor_weight: float = 1.0      # lambda, teacher side
    seed: int = 0
    momentum: float = 0.9
    temperature: float = 1.0
    lr_teacher: float = -1.0        # < 0 means: use learning_rate
    lr_subnets: float = 0.0         # sub-net rate; 0 freezes them

    def __post_init__(self):
        if self.peer_weight < 0.0 or self.anchor_weight < 0.0:
            raise ValueError("peer and anchor weights must be nonnegative")

    @property
    def teacher_rate(self) -> float:
        return self.learning_rate if self.lr_teacher < 0 else self.lr_teacher

    @property
    def subnet_rate(self) -> float:
        return max(self.lr_subnets, 0.0)


@dataclass
class CodistillLossResult:
    loss_teacher: float
    loss_student: float
    grad_teacher: np.ndarray        # d loss_teacher / d p_teacher
    grad_student: np.ndarray
    ce_teacher: float
    peer_teacher: float
    ce_student: float
    peer_student: float


def new_student(window_len=50, hidden=STUDENT_HIDDEN, seed=0,
                teacher: PknModel = None) -> StudentModel:
    rng = rng_from(seed, "student-init")
    net = nn.init_mlp([window_len, *hidden, 2],
                      ["tanh"] * len(hidden) + ["softmax"], rng)
    student = StudentModel(net=net)
    if teacher is not None:
        assert_size_contract(teacher, student)
    return student


def assert_size_contract(teacher: PknModel, student: StudentModel):
    ps = nn.param_count(student.net)
    pt = param_count_teacher(teacher)
    if ps * 3 > pt:
        raise ValueError(f"student has {ps} parameters, over a third of "
                         f"the teacher's {pt}")


def _soften(p, temperature):
    if temperature == 1.0:
        return p
    logp = np.log(np.maximum(p, nn.EPS_LOG)) / temperature
    e = np.exp(logp - logp.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def codistill_losses(p_real, p_teacher, p_student, peer_weight,
                     temperature=1.0) -> CodistillLossResult:
    """Symmetric two-way losses; peers enter as constant targets."""
    p_real = np.asarray(p_real, dtype=float)
    ce_t, g_ce_t = nn.cross_entropy(p_teacher, p_real)
    ce_s, g_ce_s = nn.cross_entropy(p_student, p_real)
    peer_t, g_peer_t = nn.cross_entropy(p_teacher,
                                        _soften(p_student, temperature))
    peer_s, g_peer_s = nn.cross_entropy(p_student,
                                        _soften(p_teacher, temperature))
    return CodistillLossResult(
        loss_teacher=ce_t + peer_weight * peer_t,
        loss_student=ce_s + peer_weight * peer_s,
        grad_teacher=g_ce_t + peer_weight * g_peer_t,
        grad_student=g_ce_s + peer_weight * g_peer_s,
        ce_teacher=ce_t, peer_teacher=peer_t,
        ce_student=ce_s, peer_student=peer_s)


def train_student_solo(student: StudentModel, data, cfg: TrainConfig):
    """Plain CE training on hard labels; returns (student, history)."""
    _, v_train, y_train = sample_arrays(data.train)
    _, v_valid, y_valid = sample_arrays(data.valid)
    net, history = train_classifier(student.net, v_train, y_train,
                                    v_valid, y_valid, cfg)
    student.net = net
    return student, history


def codistill(teacher: PknModel, student: StudentModel, data,
              cfg: CodistillConfig):
    """Lock-step mutual distillation; fixed epochs, no early stopping.

    Validation-selected snapshots chase the train-law noise on the
    non-stationary regimes, so the final-epoch parameters are returned.
    Returns (teacher, student, history).
    """
    assert_size_contract(teacher, student)
    _, v_train, y_train = sample_arrays(data.train)
    _, v_valid, y_valid = sample_arrays(data.valid)
    anchors = teacher.anchor_targets
    if anchors.shape[0] != len(v_train):
        raise ValueError("teacher anchors do not match the training set")
    targets = onehot(y_train)

    rng_batch = rng_from(cfg.seed, "batches")
    rng_drop_t = rng_from(cfg.seed, "dropout", "teacher")
    rng_drop_s = rng_from(cfg.seed, "dropout", "student")
    # the summed loss scales with 1 + beta; keep the step size invariant
    # so that beta sweeps compare targets rather than step sizes
    scale = 1.0 / (1.0 + cfg.peer_weight)
    opts_t = [nn.OptState(learning_rate=cfg.subnet_rate * scale,
                          momentum=cfg.momentum)
              for _ in teacher.subnets]
    opts_t.append(nn.OptState(learning_rate=cfg.teacher_rate * scale,
                              momentum=cfg.momentum))
    opt_s = nn.OptState(learning_rate=cfg.learning_rate * scale,
                        momentum=cfg.momentum)
    history = []
    n = len(v_train)
    for epoch in range(cfg.epochs):
        order = rng_batch.permutation(n)
        sums = {"loss_t_ce": 0.0, "loss_t_peer": 0.0, "loss_t_anchor": 0.0,
                "loss_s_ce": 0.0, "loss_s_peer": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            p_t, features, cache_t = teacher_forward(teacher, v_train[idx],
                                                     train_mode=True,
                                                     rng=rng_drop_t)
            p_s, cache_s = nn.forward(student.net, v_train[idx],
                                      train_mode=True, rng=rng_drop_s)
            res = codistill_losses(targets[idx], p_t, p_s, cfg.peer_weight,
                                   cfg.temperature)
            _, _, anchor_term, _, grad_features = teacher_loss(
                p_t, targets[idx], features, anchors[idx], cfg.anchor_weight)
            if not np.isfinite(res.loss_teacher):
                raise RuntimeError(f"teacher diverged at epoch {epoch}")
            if not np.isfinite(res.loss_student):
                raise RuntimeError(f"student diverged at epoch {epoch}")
            # all gradients are taken before either model moves
            grad_s = nn.backward(student.net, cache_s, res.grad_student)
            teacher_backward_step(teacher, cache_t, features,
                                  res.grad_teacher, grad_features, opts_t)
            nn.sgd_step(student.net, grad_s, opt_s)
            sums["loss_t_ce"] += res.ce_teacher
            sums["loss_t_peer"] += res.peer_teacher
            sums["loss_t_anchor"] += anchor_term
            sums["loss_s_ce"] += res.ce_student
            sums["loss_s_peer"] += res.peer_student
            batches += 1
        valid_t, _, _ = teacher_forward(teacher, v_valid)
        valid_s, _ = nn.forward(student.net, v_valid)
        row = {"epoch": epoch}
        row.update({k: v / batches for k, v in sums.items()})
        row["acc_t_valid"] = nn.accuracy(valid_t, y_valid)
        row["acc_s_valid"] = nn.accuracy(valid_s, y_valid)
        history.append(row)
    return teacher, student, history


def student_accuracy(student: StudentModel, part) -> float:
    _, v, labels = sample_arrays(part)
    probs, _ = nn.forward(student.net, v)
    return nn.accuracy(probs, labels)


def predict(student: StudentModel, window):
    from .pkn import normalize
    v = normalize(window).reshape(1, -1)
    probs, _ = nn.forward(student.net, v)
    return float(probs[0, 0]), float(probs[0, 1])


def student_to_dict(student: StudentModel, teacher_hash="",
                    codistill_config: CodistillConfig = None) -> dict:
    doc = nn.mlp_to_dict(student.net)
    doc["kind"] = "pkdn-student"
    doc["provenance"] = {
        "teacher_hash": teacher_hash,
        "codistill_config": asdict(codistill_config)
        if codistill_config else None,
    }
    return doc


def save_student(student: StudentModel, path, teacher_hash="",
                 codistill_config: CodistillConfig = None):
    with open(path, "w") as fh:
        json.dump(student_to_dict(student, teacher_hash, codistill_config), fh)


def load_student(path) -> StudentModel:
    with open(path) as fh:
        doc = json.load(fh)
    return StudentModel(net=nn.mlp_from_dict(doc))
