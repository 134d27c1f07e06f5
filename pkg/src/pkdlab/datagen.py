"""Synthetic regimes, real-series windowing, splits, and CSV ingestion.

Windows are arithmetic random walks started at 100 with unit Gaussian
steps. The latent target y is always signal (SMA crossover + ROC) plus
a regime-specific noise term; label = 1 iff y > 0, strictly.

Window draws and Gaussian noise draws come from separate sub-seeded
streams so regimes that share a seed also share windows bit for bit;
the degeneracy checks between regimes rely on that.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .indicators import roc, sma_cross
from .seeding import derive_seed, rng_from

REGIMES = ("stationary", "nonstationary", "lag_perturbed", "combined")
PHASES = ("train", "test")

SIGNAL_FAST = 15
SIGNAL_SLOW = 30
SIGNAL_ROC = 15


@dataclass
class SyntheticSpec:
    regime: str
    noise_level: float = 0.0
    lag_noise: int = 0
    n_samples: int = 1
    window_len: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.window_len < 31:        # must fit the slow SMA lag
            raise ValueError("window_len must be >= 31")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise_level < 0.0:
            raise ValueError("noise_level must be nonnegative")


@dataclass
class LabeledSample:
    window: np.ndarray
    y: float
    label: int
    horizon: int = 0
    gauss: float = 0.0      # logged N(0,1) draw, 0 where the regime has none


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list


def gen_window(rng, window_len=50) -> np.ndarray:
    """Random-walk price window; redrawn if any price dips to <= 0."""
    while True:
        prices = np.empty(window_len)
        prices[0] = 100.0
        prices[1:] = 100.0 + np.cumsum(rng.standard_normal(window_len - 1))
        if np.all(prices > 0.0):
            return prices


def signal_value(window) -> float:
    return sma_cross(window, SIGNAL_FAST, SIGNAL_SLOW) + roc(window, SIGNAL_ROC)


def _phase_sign(phase) -> float:
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    return 1.0 if phase == "train" else -1.0


def eq4_y(window, noise_level, phase) -> float:
    """Non-stationary rule: the price-difference term flips sign at test time."""
    sign = _phase_sign(phase)
    return signal_value(window) + sign * noise_level * (window[9] - window[14])


def _generate(spec, phase, y_fn, uses_gauss):
    _phase_sign(phase)
    rng_w = rng_from(spec.seed, phase, "windows")
    rng_g = rng_from(spec.seed, phase, "noise")
    samples = []
    for _ in range(spec.n_samples):
        w = gen_window(rng_w, spec.window_len)
        g = float(rng_g.standard_normal()) if uses_gauss else 0.0
        y = float(y_fn(w, g))
        samples.append(LabeledSample(window=w, y=y, label=int(y > 0.0),
                                     gauss=g))
    return samples


def gen_stationary(spec: SyntheticSpec, phase) -> list:
    if spec.regime != "stationary":
        raise ValueError("spec regime is not stationary")
    return _generate(spec, phase,
                     lambda w, g: signal_value(w) + spec.noise_level * g,
                     uses_gauss=True)


def gen_nonstationary(spec: SyntheticSpec, phase) -> list:
    if spec.regime != "nonstationary":
        raise ValueError("spec regime is not nonstationary")
    if spec.window_len < 15:
        raise ValueError("window too short for the price-difference term")
    return _generate(spec, phase,
                     lambda w, g: eq4_y(w, spec.noise_level, phase),
                     uses_gauss=False)


def perturbed_lags(lag_noise, window_len=50):
    """Generating lags under lag perturbation, rounded and clamped."""
    slow = int(np.clip(round(SIGNAL_SLOW + lag_noise), 2, window_len))
    roc_lag = int(np.clip(round(SIGNAL_ROC + lag_noise), 2, window_len - 1))
    if SIGNAL_FAST >= slow:
        raise ValueError("lag perturbation collapses the crossover lags")
    return SIGNAL_FAST, slow, roc_lag


def gen_lag_perturbed(spec: SyntheticSpec, phase) -> list:
    if spec.regime != "lag_perturbed":
        raise ValueError("spec regime is not lag_perturbed")
    fast, slow, roc_lag = perturbed_lags(spec.lag_noise, spec.window_len)
    return _generate(spec, phase,
                     lambda w, g: sma_cross(w, fast, slow) + roc(w, roc_lag) + g,
                     uses_gauss=True)


def gen_combined(spec: SyntheticSpec, phase) -> list:
    if spec.regime != "combined":
        raise ValueError("spec regime is not combined")
    sign = _phase_sign(phase)
    return _generate(
        spec, phase,
        lambda w, g: signal_value(w)
        + sign * spec.noise_level * (w[9] - w[14]) + g,
        uses_gauss=True)


GENERATORS = {
    "stationary": gen_stationary,
    "nonstationary": gen_nonstationary,
    "lag_perturbed": gen_lag_perturbed,
    "combined": gen_combined,
}


def generate(spec: SyntheticSpec, phase) -> list:
    return GENERATORS[spec.regime](spec, phase)


def gen_split(regime, noise_level=0.0, lag_noise=0, seed=0,
              sizes=(3000, 300, 300), window_len=50) -> DatasetSplit:
    """Independent sub-seeded draws per part; valid follows the train law."""
    def part(name, n, phase):
        spec = SyntheticSpec(regime, noise_level, lag_noise, n, window_len,
                             derive_seed(seed, name))
        return generate(spec, phase)

    return DatasetSplit(train=part("train", sizes[0], "train"),
                        valid=part("valid", sizes[1], "train"),
                        test=part("test", sizes[2], "test"))


def window_real_series(prices, timestamps=None, window_len=50, horizon=1) -> list:
    """Sliding windows over a real price series; label = forward rise over k steps."""
    prices = np.asarray(prices, dtype=float)
    if prices.size < window_len + horizon:
        raise ValueError("series too short for one window plus horizon")
    samples = []
    for t in range(window_len - 1, prices.size - horizon):
        w = prices[t - window_len + 1:t + 1].copy()
        y = float(prices[t + horizon] / prices[t] - 1.0)
        samples.append(LabeledSample(window=w, y=y, label=int(y > 0.0),
                                     horizon=horizon))
    return samples


def split(samples, sizes=(3000, 300, 300)) -> DatasetSplit:
    """Contiguous chronological split into train/valid/test."""
    need = sum(sizes)
    if len(samples) < need:
        raise ValueError(f"need {need} samples, have {len(samples)}")
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(train=list(samples[:a]), valid=list(samples[a:b]),
                        test=list(samples[b:need]))


def load_csv(path):
    """Read a `timestamp,price` CSV; timestamps ISO-8601, strictly ascending."""
    prices, times = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp", "price"]:
            raise ValueError("expected header 'timestamp,price'")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = datetime.fromisoformat(row[0])
                price = float(row[1])
                if len(row) != 2:
                    raise ValueError
            except (ValueError, IndexError):
                raise ValueError(f"line {lineno}: malformed row {row!r}")
            if times and ts <= times[-1]:
                raise ValueError(f"line {lineno}: timestamps not strictly "
                                 "increasing")
            times.append(ts)
            prices.append(price)
    return np.array(prices), times


def write_price_csv(path, prices, timestamps):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "price"])
        for ts, price in zip(timestamps, prices):
            writer.writerow([ts.isoformat(), repr(float(price))])


def dump_split_csv(data: DatasetSplit, path):
    """Dataset dump: sample_id, x_1..x_n, y, label, phase."""
    window_len = len(data.train[0].window) if data.train else 0
    header = ["sample_id"] + [f"x_{i}" for i in range(1, window_len + 1)] \
        + ["y", "label", "phase"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        sid = 0
        for phase, part in (("train", data.train), ("valid", data.valid),
                            ("test", data.test)):
            for s in part:
                writer.writerow([sid, *[repr(float(x)) for x in s.window],
                                 repr(s.y), s.label, phase])
                sid += 1
