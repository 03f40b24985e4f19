"""Samples, datasets and their JSON-lines representation.

Class labels and feature ids are 1-based throughout the public API, matching
the on-disk format.  One sample per line::

    {"id": "s0", "class": 2, "times": [1, 4, 7], "features": [1, 2],
     "values": [[0.1, 0.3], [0.2, 0.5], [0.4, 0.4]]}

``values`` has one row per time point and one entry per listed feature.
``class`` may be ``null`` for unlabeled samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, EmptyClass, ValidationError


@dataclass(frozen=True)
class Sample:
    """One subject: a ``T x F`` block of measurements at known times and features."""

    id: str
    times: np.ndarray
    features: np.ndarray
    values: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        features = np.atleast_1d(np.asarray(self.features, dtype=int))
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(times), -1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "values", values)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

        if times.size < 1 or features.size < 1:
            raise ValidationError(f"sample {self.id!r} needs at least one time and one feature")
        if values.shape != (times.size, features.size):
            raise DimensionMismatch(
                f"sample {self.id!r}: values shape {values.shape} does not match "
                f"{times.size} times x {features.size} features"
            )
        if np.any(np.diff(times) <= 0):
            raise ValidationError(f"sample {self.id!r}: times must be strictly increasing")
        if len(set(features.tolist())) != features.size or features.min() < 1:
            raise ValidationError(f"sample {self.id!r}: feature ids must be distinct and >= 1")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"sample {self.id!r}: values must be finite")

    @property
    def n_times(self):
        return self.times.size

    @property
    def n_features(self):
        return self.features.size

    def with_label(self, label):
        return replace(self, label=label)

    def to_dict(self):
        return {
            "id": self.id,
            "class": self.label,
            "times": self.times.tolist(),
            "features": self.features.tolist(),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=str(d["id"]),
            times=d["times"],
            features=d["features"],
            values=d["values"],
            label=d.get("class"),
        )


@dataclass
class Dataset:
    samples: list
    num_classes: int = 0
    feature_count: int = 0
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.samples = list(self.samples)
        labels = [s.label for s in self.samples if s.label is not None]
        max_feature = max((int(s.features.max()) for s in self.samples), default=0)
        if not self.num_classes:
            self.num_classes = max(labels, default=0)
        if not self.feature_count:
            self.feature_count = max_feature
        if max_feature > self.feature_count:
            raise ValidationError(
                f"feature id {max_feature} exceeds feature_count {self.feature_count}"
            )
        bad = [lab for lab in labels if not 1 <= lab <= self.num_classes]
        if bad:
            raise ValidationError(f"class labels {sorted(set(bad))} outside 1..{self.num_classes}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self):
        return np.array([0 if s.label is None else s.label for s in self.samples], dtype=int)

    @property
    def class_sizes(self):
        return np.bincount(self.labels, minlength=self.num_classes + 1)[1:]

    @property
    def time_range(self):
        lo = min(s.times[0] for s in self.samples)
        hi = max(s.times[-1] for s in self.samples)
        return float(lo), float(hi)

    def require_labeled(self):
        if any(s.label is None for s in self.samples):
            raise ValidationError("every sample must carry a class label")
        sizes = self.class_sizes
        empty = [i + 1 for i, m in enumerate(sizes) if m == 0]
        if empty:
            raise EmptyClass(f"classes {empty} have no samples")

    def replace_samples(self, samples):
        return Dataset(
            samples, num_classes=self.num_classes, feature_count=self.feature_count,
            meta=dict(self.meta),
        )


def read_dataset(path, num_classes=0, feature_count=0):
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(Sample.from_dict(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed sample ({exc})") from exc
    return Dataset(samples, num_classes=num_classes, feature_count=feature_count)


def write_dataset(dataset, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in dataset:
            fh.write(json.dumps(s.to_dict()) + "\n")
