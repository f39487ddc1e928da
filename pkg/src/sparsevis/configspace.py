"""Enumerating and screening self-attention configurations."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import Batch, Configuration, LayerSchedule, ModelParams, accuracy, maximal_config

MAX_EXHAUSTIVE = 20
DEFAULT_THRESHOLD = 0.97

# SA layer lists selected for a 24-layer, 0.5B-parameter backbone
REFERENCE_CONFIGS_24 = (
    (1, 4), (1, 7), (1, 4, 7), (1, 4, 16), (1, 7, 16), (1, 10, 16), (1, 4, 7, 16),
    (1, 4, 7, 22), (1, 4, 10, 16), (1, 4, 7, 10, 16), (1, 4, 7, 16, 22),
    (1, 4, 7, 10, 16, 22), (1, 4, 7, 10, 16, 19, 22),
)


def load_reference_configs() -> list[Configuration]:
    return [Configuration(c, i) for i, c in enumerate(REFERENCE_CONFIGS_24)]


def _unrank(n: int, k: int, rank: int) -> tuple[int, ...]:
    """The ``rank``-th k-subset of ``range(n)`` in lexicographic order."""
    out, start = [], 0
    for slot in range(k):
        for x in range(start, n):
            block = math.comb(n - x - 1, k - slot - 1)
            if rank < block:
                out.append(x)
                start = x + 1
                break
            rank -= block
    return tuple(out)


def enumerate_configurations(sa_indices: Sequence[int], max_count: int | None = None) -> list[Configuration]:
    """All subsets of ``sa_indices`` in lexicographic order, ids 0..n-1.

    With ``max_count`` a size-stratified, evenly spaced sample is returned
    instead; it always contains the empty and the full subset.
    """
    sa = sorted(sa_indices)
    n = len(sa)
    if max_count is None or max_count >= 2**n:
        if n > MAX_EXHAUSTIVE:
            raise ValueError(f"{n} SA layers give 2^{n} configurations; pass max_count")
        subsets = [c for k in range(n + 1) for c in itertools.combinations(range(n), k)]
    else:
        if max_count < 2:
            raise ValueError("max_count must be at least 2 (empty and full subsets)")
        subsets = {(), tuple(range(n))}
        budget = max_count - len(subsets)
        inner = [math.comb(n, k) for k in range(1, n)]
        total = sum(inner)
        quotas = [min(c, int(round(budget * c / total))) for c in inner] if total else []
        # trim rounding overshoot from the largest strata
        while sum(quotas) > budget:
            quotas[int(np.argmax(quotas))] -= 1
        for k, (count, q) in enumerate(zip(inner, quotas), start=1):
            for r in np.linspace(0, count - 1, q).round().astype(int) if q else []:
                subsets.add(_unrank(n, k, int(r)))
        subsets = list(subsets)
    picked = sorted(tuple(sa[i] for i in s) for s in subsets)
    return [Configuration(s, i) for i, s in enumerate(picked)]


@dataclass
class ViabilityReport:
    configs: list[Configuration]
    subsets: list[str]
    accuracy: np.ndarray  # (n_configs, n_subsets)
    reference_accuracy: np.ndarray  # maximal configuration, per subset
    threshold: float
    maximal: tuple[int, ...] = ()  # active SA layers of the maximal configuration

    @property
    def relative(self) -> np.ndarray:
        ref = self.reference_accuracy[None, :]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            rel = np.where(ref > 0, self.accuracy / np.where(ref > 0, ref, 1.0), np.nan)
        for i, c in enumerate(self.configs):
            if self._is_maximal(c):
                rel[i] = 1.0
        return rel

    def _is_maximal(self, c: Configuration) -> bool:
        return c.active_sa == self.maximal

    @property
    def viable(self) -> np.ndarray:
        rel = self.relative
        return np.array([bool(np.any(np.nan_to_num(r, nan=-np.inf) >= self.threshold)) for r in rel])

    def viable_configs(self) -> list[Configuration]:
        return [c for c, ok in zip(self.configs, self.viable) if ok]

    def with_threshold(self, threshold: float) -> "ViabilityReport":
        return ViabilityReport(self.configs, self.subsets, self.accuracy, self.reference_accuracy,
                               threshold, self.maximal)

    def write(self, csv_path, json_path) -> None:
        """CSV: one row per config, one column per subset (relative accuracy).

        The JSON sidecar carries the threshold and the viable list, which is
        what training and routing read back.
        """
        rel = self.relative
        with Path(csv_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_id", "active_sa", *self.subsets])
            for c, row in zip(self.configs, rel):
                w.writerow([c.id, " ".join(map(str, c.active_sa)), *[repr(float(x)) for x in row]])
        Path(json_path).write_text(json.dumps({
            "threshold": self.threshold,
            "subsets": self.subsets,
            "maximal": list(self.maximal),
            "reference_accuracy": self.reference_accuracy.tolist(),
            "accuracy": self.accuracy.tolist(),
            "configs": [c.to_dict() for c in self.configs],
            "viable": [c.to_dict() for c in self.viable_configs()],
        }, indent=2) + "\n")


def read_viable(json_path) -> list[Configuration]:
    data = json.loads(Path(json_path).read_text())
    return [Configuration.from_dict(c) for c in data["viable"]]


def read_report(json_path) -> ViabilityReport:
    data = json.loads(Path(json_path).read_text())
    return ViabilityReport([Configuration.from_dict(c) for c in data["configs"]], data["subsets"],
                           np.array(data["accuracy"], dtype=float),
                           np.array(data["reference_accuracy"], dtype=float),
                           data["threshold"], tuple(data["maximal"]))


def screen_viability(params: ModelParams, schedule: LayerSchedule, eval_subsets: Mapping[str, Batch],
                     configs: Sequence[Configuration], threshold: float = DEFAULT_THRESHOLD,
                     accuracy_fn: Callable[[Configuration, str], float] | None = None) -> ViabilityReport:
    """Evaluate every config on every subset against the maximal configuration.

    A config is viable when its accuracy relative to the maximal one reaches
    ``threshold`` on at least one subset.  Cross-attention layers always run.
    ``accuracy_fn(config, subset_name)`` replaces model evaluation when given.
    """
    for name, b in eval_subsets.items():
        if len(b) == 0:
            raise ValueError(f"evaluation subset {name!r} is empty")
    if accuracy_fn is None:
        def accuracy_fn(config, name):
            return accuracy(params, schedule, config, eval_subsets[name])
    names = list(eval_subsets)
    full = maximal_config(schedule)
    ref = np.array([accuracy_fn(full, n) for n in names], dtype=float)
    acc = np.array([[ref[j] if c.active_sa == full.active_sa else accuracy_fn(c, n)
                     for j, n in enumerate(names)] for c in configs], dtype=float).reshape(len(configs), len(names))
    return ViabilityReport(list(configs), names, acc, ref, threshold, full.active_sa)
