"""Synthetic multivariate short time series and missing-data simulation."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, Sample
from .errors import InvalidPolicy, UnknownFunction, ValidationError
from .numkernels import sample_matrix_normal

FUNCTION_LIBRARY = {
    1: lambda t: t,
    2: lambda t: t**2,
    3: lambda t: np.sin(np.pi * t),
    4: lambda t: (1 - np.cos(2 * np.pi * t)) / 2,
    5: lambda t: 1 / (1 + np.exp(-10 * (t - 0.5))),
    6: lambda t: np.sqrt(t),
}


def function_library(func_id, t):
    """Evaluate library function ``func_id`` (1..6) at normalized times in [0, 1]."""
    try:
        f = FUNCTION_LIBRARY[int(func_id)]
    except (KeyError, TypeError, ValueError):
        raise UnknownFunction(f"function id must be in 1..6, got {func_id!r}") from None
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValidationError("library functions take times in [0, 1]")
    return f(t)


@dataclass
class SynthConfig:
    """Synthetic generator settings.

    ``Sigma_T`` / ``Psi_F`` default to a random AR(1) time covariance with
    standard deviation ``ar_scale`` and a random unit-diagonal feature
    correlation; ``function_assignment`` defaults to a seeded draw in which no
    two classes share all their curves.
    """

    K: int = 3
    F: int = 2
    T: int = 12
    m: int = 100
    function_assignment: Optional[np.ndarray] = None  # (K, F) ids in 1..6
    Sigma_T: Optional[np.ndarray] = None
    Psi_F: Optional[np.ndarray] = None
    ar_scale: float = 0.1
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("K", "F", "T", "m"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")


@dataclass
class GroundTruth:
    cls: int
    feature: int
    function_id: int
    grid: np.ndarray
    values: np.ndarray

    def to_dict(self):
        return {
            "class": self.cls,
            "feature": self.feature,
            "function_id": self.function_id,
            "grid": self.grid.tolist(),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["class"]), int(d["feature"]), int(d["function_id"]),
            np.asarray(d["grid"], dtype=float), np.asarray(d["values"], dtype=float),
        )


def draw_assignment(k_classes, n_features, rng):
    """Seeded (class, feature) -> function map with pairwise distinct class rows."""
    n_funcs = len(FUNCTION_LIBRARY)
    if k_classes > n_funcs**n_features:
        raise ValidationError("too many classes for distinct function assignments")
    while True:
        assign = rng.integers(1, n_funcs + 1, size=(k_classes, n_features))
        if len({tuple(row) for row in assign.tolist()}) == k_classes:
            return assign


def ar1_covariance(n, rho, scale=1.0):
    idx = np.arange(n)
    return scale**2 * rho ** np.abs(idx[:, None] - idx[None, :])


def random_correlation(n, rng):
    g = rng.standard_normal((n, n + 1))
    cov = g @ g.T
    d = np.sqrt(np.diag(cov))
    return cov / np.outer(d, d)


def resolve_config(config):
    """Fill in the random parts of ``config`` deterministically from its seed."""
    rng = np.random.default_rng([config.seed, 1])
    assign = config.function_assignment
    if assign is None:
        assign = draw_assignment(config.K, config.F, rng)
    assign = np.asarray(assign, dtype=int)
    if assign.shape != (config.K, config.F):
        raise ValidationError(f"function_assignment must be {config.K}x{config.F}")
    sigma_t = config.Sigma_T
    if sigma_t is None:
        sigma_t = ar1_covariance(config.T, rng.uniform(0.3, 0.9), config.ar_scale)
    psi_f = config.Psi_F
    if psi_f is None:
        psi_f = random_correlation(config.F, rng)
    return replace(config, function_assignment=assign, Sigma_T=np.asarray(sigma_t, float),
                   Psi_F=np.asarray(psi_f, float))


def time_grid(n_times):
    """Integer sampling times ``1..T`` and their positions in [0, 1]."""
    times = np.arange(1, n_times + 1, dtype=float)
    unit = (times - 1) / (n_times - 1) if n_times > 1 else np.zeros(1)
    return times, unit


def generate_synthetic(config, rng=None):
    """Draw ``m`` complete samples per class.

    Each sample is its class's curves on the grid plus matrix-normal
    autoregressive noise ``MN(0, Sigma_T, Psi_F)`` plus measurement error
    ``noise_scale * MN(0, I, I)``.

    Returns
    -------
    dataset : Dataset
    truth : list of GroundTruth
        One entry per (class, feature).
    """
    config = resolve_config(config)
    rng = np.random.default_rng(config.seed if rng is None else rng)
    times, unit = time_grid(config.T)
    assign = config.function_assignment
    curves = np.stack(
        [np.column_stack([function_library(assign[k, f], unit) for f in range(config.F)])
         for k in range(config.K)]
    )
    features = np.arange(1, config.F + 1)
    zeros = np.zeros((config.T, config.F))
    samples = []
    for k in range(config.K):
        ar = sample_matrix_normal(zeros, config.Sigma_T, config.Psi_F, rng, size=config.m)
        meas = rng.standard_normal((config.m, config.T, config.F))
        values = curves[k] + ar + config.noise_scale * meas
        for j in range(config.m):
            samples.append(Sample(f"c{k + 1}_{j}", times, features, values[j], label=k + 1))
    dataset = Dataset(samples, num_classes=config.K, feature_count=config.F,
                      meta={"function_assignment": assign.tolist()})
    truth = [
        GroundTruth(k + 1, f + 1, int(assign[k, f]), times, curves[k][:, f])
        for k in range(config.K)
        for f in range(config.F)
    ]
    return dataset, truth


@dataclass
class MissingnessPolicy:
    """How to delete time points and features from complete samples.

    ``per-sample-counts`` draws the retained counts uniformly from the keep
    ranges; ``capped-proportions`` deletes a uniform number of time points
    (features) up to ``floor(cap * T)`` (``floor(cap * F)``).
    """

    mode: str = "per-sample-counts"
    time_keep_range: tuple = (1, 11)
    feature_keep_range: tuple = (1, 2)
    time_cap: float = 0.5
    feature_cap: float = 0.55
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("per-sample-counts", "capped-proportions"):
            raise InvalidPolicy(f"unknown missingness mode {self.mode!r}")
        if self.mode == "per-sample-counts":
            for name in ("time_keep_range", "feature_keep_range"):
                lo, hi = getattr(self, name)
                if lo < 1 or hi < lo:
                    raise InvalidPolicy(f"{name}={getattr(self, name)} must satisfy 1 <= lo <= hi")
        elif not (0 < self.time_cap <= 1 and 0 < self.feature_cap <= 1):
            raise InvalidPolicy("caps must lie in (0, 1]")


def _keep_count(rng, policy, n, kind):
    if policy.mode == "per-sample-counts":
        lo, hi = getattr(policy, f"{kind}_keep_range")
        if lo > n:
            raise InvalidPolicy(f"cannot keep {lo} {kind} points out of {n}")
        return int(rng.integers(lo, min(hi, n) + 1))
    cap = getattr(policy, f"{kind}_cap")
    max_drop = min(int(np.floor(cap * n)), n - 1)
    return n - int(rng.integers(0, max_drop + 1))


def apply_missingness(dataset, policy, rng=None):
    """Randomly delete time points and features from every sample.

    Every output sample keeps at least one time point and one feature, and
    retained indices stay sorted.
    """
    rng = np.random.default_rng(policy.seed if rng is None else rng)
    out = []
    for s in dataset:
        n_t = _keep_count(rng, policy, s.n_times, "time")
        n_f = _keep_count(rng, policy, s.n_features, "feature")
        ti = np.sort(rng.choice(s.n_times, size=n_t, replace=False))
        fi = np.sort(rng.choice(s.n_features, size=n_f, replace=False))
        out.append(Sample(s.id, s.times[ti], s.features[fi], s.values[np.ix_(ti, fi)], s.label))
    return dataset.replace_samples(out)


def downsample(dataset, stride):
    """Keep time indices ``0, stride, 2*stride, ...`` of every sample."""
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    out = [
        Sample(s.id, s.times[::stride], s.features, s.values[::stride], s.label)
        for s in dataset
    ]
    return dataset.replace_samples(out)


def write_truth(truth, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for g in truth:
            fh.write(json.dumps(g.to_dict()) + "\n")


def read_truth(path):
    with open(path) as fh:
        return [GroundTruth.from_dict(json.loads(line)) for line in fh if line.strip()]
