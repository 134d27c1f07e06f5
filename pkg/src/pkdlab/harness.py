"""Experiment orchestration: baselines, noise sweeps, timing, reports.

A sweep runs a grid of (level, seed, model) cells, where level is a
noise level, a lag perturbation, or a forecast horizon on real data.
All models in one (level, seed) column share the same dataset draw, and
the teacher and its distilled student share the same teacher-stage
seeds, so model comparisons are paired rather than independent.
Per-cell seeds are derived by hashing, so execution order never
affects results. Divergent cells are recorded and excluded from
aggregates.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .datagen import (REGIMES, gen_split, gen_window, load_csv,
                      split as chrono_split, window_real_series)
from .distill import (CodistillConfig, StudentModel, codistill, new_student,
                      predict as student_predict, student_accuracy,
                      train_student_solo)
from .fit import TrainConfig, eval_accuracy, train_classifier
from .indicators import (IndicatorSpec, ROC, SMA_CROSS, evaluate,
                         grid_search, indicator_value)
from .pkn import (PknModel, assemble_teacher, clone_teacher, normalize,
                  param_count_teacher, predict as teacher_predict,
                  pretrain_subnet, sample_arrays, teacher_accuracy,
                  train_teacher)
from .seeding import derive_seed, rng_from

MODELS = ("DNN", "PK", "PKN", "PKDN")
NOISE_GRID = (0.0, 1.0, 2.0, 5.0, 10.0)
LAG_NOISE_GRID = (0, 2, 5, 10)
LAG_GRID = (5, 10, 15, 20, 25, 30, 35, 40, 45)
HORIZONS = (1, 3, 6, 9, 12)
DNN_WIDTHS = (50, 32, 16, 2)

# The teacher's built-in prior: canonical crossover and momentum lags,
# fixed up front. Only the PK baseline re-fits lags per dataset.
PRIOR_SPECS = (IndicatorSpec(SMA_CROSS, lag_fast=15, lag_slow=30),
               IndicatorSpec(ROC, lag=15))


# ------------------------------------------------------------------ configs

@dataclass
class DnnConfig:
    learning_rate: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    dropout: float = 0.2
    l2: float = 1e-4
    patience: int = 10


@dataclass
class PkConfig:
    lag_grid: tuple = LAG_GRID
    learning_rate: float = 0.1
    epochs: int = 60
    batch_size: int = 32
    patience: int = 10

    def __post_init__(self):
        self.lag_grid = tuple(int(x) for x in self.lag_grid)
        if not self.lag_grid:
            raise ValueError("empty lag grid")


@dataclass
class PknConfig:
    pretrain_lr: float = 0.05
    pretrain_epochs: int = 40
    constriction: str = "slight"
    head_hidden: tuple = (8,)
    head_lr: float = 0.02
    head_epochs: int = 40
    anchor_weight: float = 1.0
    lr_subnets: float = 0.0
    batch_size: int = 32
    patience: int = 10

    def __post_init__(self):
        self.head_hidden = tuple(int(x) for x in self.head_hidden)


@dataclass
class PkdnConfig:
    solo_epochs: int = 15
    solo_lr: float = 0.05
    epochs: int = 80
    learning_rate: float = 0.05
    peer_weight: float = 1.0
    temperature: float = 1.0
    anchor_weight: float = 1.0
    lr_teacher: float = -1.0
    lr_subnets: float = 5e-3
    batch_size: int = 32


def default_pkdn(regime: str) -> PkdnConfig:
    """Regime-keyed co-distillation preset.

    Shifted regimes (the price-difference term flips sign at test time)
    get a hard peer weight with sharply sharpened teacher targets and no
    solo warm-up: hard labels mislead there, so the student should lean
    on the teacher. Stationary-law regimes keep soft peers and let the
    sub-nets drift slowly toward the perturbed generating lags.
    """
    if regime in ("nonstationary", "combined"):
        # temperature near the argmax limit: the teacher's soft scores
        # on these regimes encode the train-law term that flips at test
        return PkdnConfig(solo_epochs=0, epochs=30, peer_weight=8.0,
                          temperature=0.005, lr_teacher=0.002,
                          lr_subnets=0.0)
    return PkdnConfig()


@dataclass
class ExperimentConfig:
    regime: str = "stationary"
    noise_grid: tuple = None        # None: regime default grid
    data_path: str = ""             # real series; overrides regime
    horizons: tuple = HORIZONS
    models: tuple = MODELS
    n_repeats: int = 10
    base_seed: int = 0
    sizes: tuple = (3000, 300, 300)
    window_len: int = 50
    latency_n: int = 1000
    dnn: DnnConfig = field(default_factory=DnnConfig)
    pk: PkConfig = field(default_factory=PkConfig)
    pkn: PknConfig = field(default_factory=PknConfig)
    pkdn: PkdnConfig = None         # None: preset chosen by regime

    def __post_init__(self):
        for name, cls in (("dnn", DnnConfig), ("pk", PkConfig),
                          ("pkn", PknConfig), ("pkdn", PkdnConfig)):
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, cls(**val))
        unknown = set(self.models) - set(MODELS)
        if unknown or not self.models:
            raise ValueError(f"models must be a nonempty subset of {MODELS}")
        self.models = tuple(m for m in MODELS if m in set(self.models))
        self.sizes = tuple(int(x) for x in self.sizes)
        if len(self.sizes) != 3 or min(self.sizes) < 1:
            raise ValueError("sizes must be three positive counts")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be positive")
        self.horizons = tuple(int(k) for k in self.horizons)
        if self.data_path:
            if not self.horizons or not set(self.horizons) <= set(HORIZONS):
                raise ValueError(f"horizons must be a nonempty subset "
                                 f"of {HORIZONS}")
        else:
            if self.regime not in REGIMES:
                raise ValueError(f"unknown regime {self.regime!r}")
            if self.noise_grid is None:
                self.noise_grid = (LAG_NOISE_GRID
                                   if self.regime == "lag_perturbed"
                                   else NOISE_GRID)
            if self.regime == "lag_perturbed":
                self.noise_grid = tuple(int(x) for x in self.noise_grid)
            else:
                self.noise_grid = tuple(float(x) for x in self.noise_grid)
            if not self.noise_grid:
                raise ValueError("empty noise grid")
        if self.pkdn is None:
            self.pkdn = default_pkdn(self.regime if not self.data_path
                                     else "stationary")

    def levels(self) -> tuple:
        return self.horizons if self.data_path else self.noise_grid

    def tag(self) -> str:
        return "real" if self.data_path else self.regime


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def config_from_dict(doc: dict) -> ExperimentConfig:
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**doc)


# ------------------------------------------------------------------ results

@dataclass
class CellResult:
    model: str
    noise_level: float      # lag perturbation or horizon on those axes
    seed_index: int
    accuracy: float = None  # None when the cell failed
    failed: bool = False
    error: str = ""


@dataclass
class Aggregate:
    model: str
    noise_level: float
    mean_acc: float         # None when every cell at this point failed
    std_acc: float
    n_seeds: int


@dataclass
class LatencyStats:
    mean_us: float
    std_us: float
    n: int


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    cells: list
    aggregates: list
    param_counts: dict      # model name -> parameter count
    latency: dict           # model name -> LatencyStats
    n_failures: int = 0


def aggregate(cells) -> list:
    """Mean and sample std (n-1) per (model, level), failures excluded."""
    groups, order = {}, []
    for c in cells:
        key = (c.model, c.noise_level)
        if key not in groups:
            groups[key] = []
            order.append(key)
        if not c.failed:
            groups[key].append(c.accuracy)
    out = []
    for model, level in sorted(order, key=lambda k: (MODELS.index(k[0]),
                                                     k[1])):
        accs = groups[(model, level)]
        if not accs:
            out.append(Aggregate(model, level, None, None, 0))
            continue
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        out.append(Aggregate(model, level, float(np.mean(accs)), std,
                             len(accs)))
    return out


# ------------------------------------------------------------------ models

@dataclass
class PkModel:
    cross_spec: IndicatorSpec
    roc_spec: IndicatorSpec
    net: nn.Mlp             # single softmax layer over the two values


def pk_predict(model: PkModel, window):
    x = np.array([[indicator_value(model.cross_spec, window),
                   indicator_value(model.roc_spec, window)]])
    probs, _ = nn.forward(model.net, x)
    return float(probs[0, 0]), float(probs[0, 1])


def _pk_features(model: PkModel, part):
    w = [s.window for s in part]
    return np.column_stack([evaluate(model.cross_spec, w),
                            evaluate(model.roc_spec, w)])


def _dnn_cell(data, cfg: DnnConfig, seed):
    _, v_train, y_train = sample_arrays(data.train)
    _, v_valid, y_valid = sample_arrays(data.valid)
    _, v_test, y_test = sample_arrays(data.test)
    widths = (v_train.shape[1],) + DNN_WIDTHS[1:]
    net = nn.init_mlp(list(widths), ["tanh"] * (len(widths) - 2) + ["softmax"],
                      rng_from(seed, "dnn-init"), dropout_rate=cfg.dropout,
                      l2_coeff=cfg.l2)
    tc = TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                     batch_size=cfg.batch_size, patience=cfg.patience,
                     seed=derive_seed(seed, "dnn-train"))
    net, _ = train_classifier(net, v_train, y_train, v_valid, y_valid, tc)
    return eval_accuracy(net, v_test, y_test), net


def _pk_cell(data, cfg: PkConfig, seed):
    w_train = [s.window for s in data.train]
    ys = np.array([s.y for s in data.train])
    cross_grid = [(f, s) for f in cfg.lag_grid for s in cfg.lag_grid if f < s]
    cross = grid_search(w_train, ys, SMA_CROSS, cross_grid).best_spec
    roc = grid_search(w_train, ys, ROC, list(cfg.lag_grid)).best_spec
    model = PkModel(cross_spec=cross, roc_spec=roc,
                    net=nn.init_mlp([2, 2], ["softmax"],
                                    rng_from(seed, "pk-init")))
    _, _, y_train = sample_arrays(data.train)
    _, _, y_valid = sample_arrays(data.valid)
    _, _, y_test = sample_arrays(data.test)
    tc = TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                     batch_size=cfg.batch_size, patience=cfg.patience,
                     seed=derive_seed(seed, "pk-train"))
    net, _ = train_classifier(model.net, _pk_features(model, data.train),
                              y_train, _pk_features(model, data.valid),
                              y_valid, tc)
    model.net = net
    acc = eval_accuracy(net, _pk_features(model, data.test), y_test)
    return acc, model


def train_pkn_teacher(data, cfg: PknConfig, stage_seed=0) -> PknModel:
    """Pretrained indicator sub-nets, fused head, anchored fine-tune."""
    w_train = [s.window for s in data.train]
    pre = TrainConfig(learning_rate=cfg.pretrain_lr, epochs=cfg.pretrain_epochs,
                      batch_size=cfg.batch_size, constriction=cfg.constriction,
                      seed=derive_seed(stage_seed, "subnet"))
    subnets = [pretrain_subnet(sp, w_train, pre)[0] for sp in PRIOR_SPECS]
    head_cfg = TrainConfig(learning_rate=cfg.head_lr, epochs=cfg.head_epochs,
                           batch_size=cfg.batch_size,
                           anchor_weight=cfg.anchor_weight,
                           lr_subnets=cfg.lr_subnets, patience=cfg.patience,
                           seed=derive_seed(stage_seed, "teacher"))
    model = assemble_teacher(subnets,
                             (len(PRIOR_SPECS), *cfg.head_hidden, 2),
                             head_cfg, w_train)
    model, _ = train_teacher(model, data, head_cfg)
    return model


def _pkdn_cell(data, teacher: PknModel, cfg: PkdnConfig, seed):
    model = clone_teacher(teacher)
    student = new_student(window_len=len(data.train[0].window),
                          seed=derive_seed(seed, "student"), teacher=model)
    if cfg.solo_epochs > 0:
        solo = TrainConfig(learning_rate=cfg.solo_lr, epochs=cfg.solo_epochs,
                           batch_size=cfg.batch_size,
                           seed=derive_seed(seed, "solo"))
        student, _ = train_student_solo(student, data, solo)
    ccfg = CodistillConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                           learning_rate=cfg.learning_rate,
                           peer_weight=cfg.peer_weight,
                           anchor_weight=cfg.anchor_weight,
                           temperature=cfg.temperature,
                           lr_teacher=cfg.lr_teacher,
                           lr_subnets=cfg.lr_subnets,
                           seed=derive_seed(seed, "codistill"))
    model, student, _ = codistill(model, student, data, ccfg)
    return student_accuracy(student, data.test), student


def run_dnn_baseline(data, cfg: DnnConfig, seed=0) -> float:
    return _dnn_cell(data, cfg, seed)[0]


def run_pk_baseline(data, cfg: PkConfig, seed=0) -> float:
    return _pk_cell(data, cfg, seed)[0]


def run_pkn(data, cfg: PknConfig, stage_seed=0) -> float:
    return teacher_accuracy(train_pkn_teacher(data, cfg, stage_seed),
                            data.test)


def run_pkdn(data, pkn_cfg: PknConfig, pkdn_cfg: PkdnConfig, stage_seed=0,
             seed=0) -> float:
    teacher = train_pkn_teacher(data, pkn_cfg, stage_seed)
    return _pkdn_cell(data, teacher, pkdn_cfg, seed)[0]


# ------------------------------------------------------------------ sweep

def _column(cfg: ExperimentConfig, level, seed_idx, real_data=None,
            capture=None):
    """All requested models on one (level, seed) column.

    The column shares one dataset draw, and PKN/PKDN share one trained
    teacher, so their per-seed comparison is paired.
    """
    lv = float(level)
    if real_data is not None:
        data = real_data
    else:
        data = gen_split(
            cfg.regime,
            noise_level=lv if cfg.regime != "lag_perturbed" else 0.0,
            lag_noise=int(level) if cfg.regime == "lag_perturbed" else 0,
            seed=derive_seed(cfg.base_seed, "data", lv, seed_idx),
            sizes=cfg.sizes, window_len=cfg.window_len)
    stage_seed = derive_seed(cfg.base_seed, "teacher-stage", lv, seed_idx)
    teacher_slot = []

    def teacher():
        if not teacher_slot:
            teacher_slot.append(train_pkn_teacher(data, cfg.pkn, stage_seed))
        return teacher_slot[0]

    cells = []
    for model in cfg.models:
        cell_seed = derive_seed(cfg.base_seed, model, lv, seed_idx)
        try:
            if model == "DNN":
                acc, obj = _dnn_cell(data, cfg.dnn, cell_seed)
            elif model == "PK":
                acc, obj = _pk_cell(data, cfg.pk, cell_seed)
            elif model == "PKN":
                obj = teacher()
                acc = teacher_accuracy(obj, data.test)
            else:
                acc, obj = _pkdn_cell(data, teacher(), cfg.pkdn, cell_seed)
            cells.append(CellResult(model, lv, seed_idx, float(acc)))
            if capture is not None and model not in capture:
                capture[model] = obj
        except (RuntimeError, ValueError) as exc:
            cells.append(CellResult(model, lv, seed_idx, failed=True,
                                    error=str(exc)))
    return cells


def run_sweep(cfg: ExperimentConfig, threads=1, log=None) -> ExperimentReport:
    levels = cfg.levels()
    real = {}
    if cfg.data_path:
        prices, _ = load_csv(cfg.data_path)
        for k in levels:
            real[k] = chrono_split(
                window_real_series(prices, window_len=cfg.window_len,
                                   horizon=int(k)), cfg.sizes)
    capture = {}
    columns = [(level, si) for level in levels for si in range(cfg.n_repeats)]

    def job(col):
        level, si = col
        cap = capture if (level == levels[0] and si == 0) else None
        got = _column(cfg, level, si, real_data=real.get(level), capture=cap)
        if log:
            log(f"level={level} seed={si} " +
                " ".join(f"{c.model}={'fail' if c.failed else f'{c.accuracy:.3f}'}"
                         for c in got))
        return got

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, columns))
    else:
        results = [job(col) for col in columns]
    cells = [c for col in results for c in col]
    params, latency = {}, {}
    for model in cfg.models:
        if model in capture:
            params[model] = _param_count_any(capture[model])
            latency[model] = measure_latency(capture[model], n=cfg.latency_n)
    return ExperimentReport(config=cfg, cells=cells,
                            aggregates=aggregate(cells),
                            param_counts=params, latency=latency,
                            n_failures=sum(c.failed for c in cells))


# ------------------------------------------------------------------ timing

def _param_count_any(model) -> int:
    if isinstance(model, PknModel):
        return param_count_teacher(model)
    if isinstance(model, (StudentModel, PkModel)):
        return nn.param_count(model.net)
    if isinstance(model, nn.Mlp):
        return nn.param_count(model)
    raise TypeError(f"no parameter count for {type(model).__name__}")


def _predict_fn(model):
    if isinstance(model, PknModel):
        return lambda w: teacher_predict(model, w)
    if isinstance(model, StudentModel):
        return lambda w: student_predict(model, w)
    if isinstance(model, PkModel):
        return lambda w: pk_predict(model, w)
    if isinstance(model, nn.Mlp):
        return lambda w: nn.forward(model, normalize(w).reshape(1, -1))[0]
    raise TypeError(f"cannot time {type(model).__name__}")


def measure_latency(model, n=1000, warmup=100, window=None) -> LatencyStats:
    """Single-window eval-mode forward timing, microseconds."""
    if n < 1:
        raise ValueError("need n >= 1")
    fn = _predict_fn(model)
    if window is None:
        window = gen_window(rng_from(0, "latency-window"))
    for _ in range(warmup):
        fn(window)
    ticks = np.empty(n)
    for i in range(n):
        t0 = time.perf_counter_ns()
        fn(window)
        ticks[i] = time.perf_counter_ns() - t0
    us = ticks / 1000.0
    std = float(np.std(us, ddof=1)) if n > 1 else 0.0
    return LatencyStats(mean_us=float(np.mean(us)), std_us=std, n=n)


# ------------------------------------------------------------------ reports

def report_to_dict(report: ExperimentReport) -> dict:
    return {"config": config_to_dict(report.config),
            "cells": [asdict(c) for c in report.cells],
            "aggregates": [asdict(a) for a in report.aggregates],
            "param_counts": dict(report.param_counts),
            "latency": {m: asdict(s) for m, s in report.latency.items()},
            "n_failures": report.n_failures}


def report_from_dict(doc: dict) -> ExperimentReport:
    return ExperimentReport(
        config=config_from_dict(doc["config"]),
        cells=[CellResult(**c) for c in doc["cells"]],
        aggregates=[Aggregate(**a) for a in doc["aggregates"]],
        param_counts={m: int(v) for m, v in doc["param_counts"].items()},
        latency={m: LatencyStats(**s) for m, s in doc["latency"].items()},
        n_failures=int(doc["n_failures"]))


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def emit_report(report: ExperimentReport, out_dir) -> dict:
    """summary/cells/fig4 CSVs, report.json, and the rendered figure."""
    import csv
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = report.config.tag()
    paths = {"summary": out / "summary.csv", "cells": out / "cells.csv",
             "fig4": out / f"fig4_{tag}.csv", "json": out / "report.json"}

    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "regime", "noise_level", "mean_acc", "std_acc",
                    "n_seeds"])
        for a in report.aggregates:
            w.writerow([a.model, tag, _fmt(a.noise_level), _fmt(a.mean_acc),
                        _fmt(a.std_acc), a.n_seeds])

    with open(paths["cells"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "regime", "noise_level", "seed_index",
                    "accuracy", "failed", "error"])
        for c in report.cells:
            w.writerow([c.model, tag, _fmt(c.noise_level), c.seed_index,
                        _fmt(c.accuracy), int(c.failed), c.error])

    by_key = {(a.model, a.noise_level): a for a in report.aggregates}
    models = report.config.models
    with open(paths["fig4"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["noise_level"]
                   + [f"{m}_{s}" for m in models for s in ("mean", "std")])
        for level in report.config.levels():
            row = [_fmt(float(level))]
            for m in models:
                a = by_key.get((m, float(level)))
                row += [_fmt(a.mean_acc if a else None),
                        _fmt(a.std_acc if a else None)]
            w.writerow(row)

    with open(paths["json"], "w") as fh:
        json.dump(report_to_dict(report), fh, indent=2)

    from . import plots
    paths["figure"] = plots.render_curves(report, out / f"fig4_{tag}.png")
    return paths


def load_report(path) -> ExperimentReport:
    import json
    with open(path) as fh:
        return report_from_dict(json.load(fh))
