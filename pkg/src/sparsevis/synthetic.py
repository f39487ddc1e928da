"""Procedural cell-grid question answering used as a desk-scale vision task.

A grid of coloured cells plays the image; each cell becomes one visual token.
Questions come in three kinds:

``coarse``
    "Which colour is in the majority?"  Answerable from a global average of
    the cells.
``fine``
    "Which colour does the pointer address?"  The top-left cell is a pointer
    naming one of a few target cells away from the border; the answer is the
    target's colour.  Visual tokens carry no absolute position (the positional
    convolution is translation invariant away from the edges), so the target
    can only be found by position-aware attention after reading the pointer.
``text``
    The question itself names the colour; a control task needing no vision.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import Batch
from .router import ROUTE_TOKEN as ROUTE, attach_routing_token

PAD, BOS, EOS = 0, 1, 2
Q_COARSE, Q_FINE, Q_TEXT, NONE = 4, 5, 6, 7
COLOR0 = 8
QUESTION_TOKEN = {"coarse": Q_COARSE, "fine": Q_FINE, "text": Q_TEXT}
# the question occupies prompt positions 1..2, after BOS
QUESTION_SPAN = (1, 3)


@dataclass(frozen=True)
class TaskSpec:
    height: int = 8
    width: int = 8
    n_classes: int = 4
    pointer: tuple[int, int] = (0, 0)
    # (row, col) cells a pointer may address
    targets: tuple[tuple[int, int], ...] = ((3, 2), (3, 5), (5, 2), (5, 5))

    @property
    def n_cells(self) -> int:
        """Cell vocabulary: colours, then one pointer id per target."""
        return self.n_classes + len(self.targets)

    @property
    def vocab_size(self) -> int:
        return COLOR0 + self.n_classes

    def color_token(self, c: int) -> int:
        return COLOR0 + c


@dataclass
class SyntheticSample:
    cells: np.ndarray  # (H, W) cell ids
    question: list[int]
    answer: list[int]
    kind: str

    @property
    def prompt(self) -> list[int]:
        return attach_routing_token([BOS] + self.question, [QUESTION_SPAN])


def _coarse(rng, spec: TaskSpec):
    n = spec.height * spec.width
    while True:
        major = int(rng.integers(spec.n_classes))
        k = int(rng.integers(int(0.4 * n), int(0.75 * n) + 1))
        others = [c for c in range(spec.n_classes) if c != major]
        flat = rng.choice(others, size=n)
        flat[rng.choice(n, size=k, replace=False)] = major
        counts = np.bincount(flat, minlength=spec.n_classes)
        if counts[major] > np.delete(counts, major).max():
            return flat.reshape(spec.height, spec.width), [Q_COARSE, NONE], major


def _fine(rng, spec: TaskSpec):
    grid = rng.integers(spec.n_classes, size=(spec.height, spec.width))
    k = int(rng.integers(len(spec.targets)))
    grid[spec.pointer] = spec.n_classes + k
    return grid, [Q_FINE, NONE], int(grid[spec.targets[k]])


def _text(rng, spec: TaskSpec):
    cells, _, _ = _coarse(rng, spec)
    c = int(rng.integers(spec.n_classes))
    return cells, [Q_TEXT, spec.color_token(c)], c


_MAKERS = {"coarse": _coarse, "fine": _fine, "text": _text}


def gen_synthetic(kind: str, n: int, seed: int, spec: TaskSpec = TaskSpec()) -> list[SyntheticSample]:
    """``n`` samples of ``kind`` (coarse, fine, text or mixture), fixed by ``seed``.

    ``mixture`` alternates coarse and fine samples.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in (*_MAKERS, "mixture"):
        raise ValueError(f"unknown kind {kind!r}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = ("coarse", "fine")[i % 2] if kind == "mixture" else kind
        cells, question, color = _MAKERS[k](rng, spec)
        out.append(SyntheticSample(cells, question, [spec.color_token(color), EOS], k))
    return out


def interpret(sample: SyntheticSample, spec: TaskSpec = TaskSpec()) -> int:
    """Answer colour recomputed directly from the grid (label oracle)."""
    q = sample.question[0]
    if q == Q_TEXT:
        return sample.question[1] - COLOR0
    if q == Q_FINE:
        (r,), (c,) = np.nonzero(sample.cells >= spec.n_classes)
        return int(sample.cells[spec.targets[int(sample.cells[r, c]) - spec.n_classes]])
    values, counts = np.unique(sample.cells, return_counts=True)
    return int(values[np.argmax(counts)])


def to_batch(samples: Sequence[SyntheticSample]) -> Batch:
    """Teacher-forced batch: input is prompt + answer[:-1]."""
    seqs = [s.prompt + s.answer[:-1] for s in samples]
    n_t = len(seqs[0])
    if any(len(q) != n_t for q in seqs):
        raise ValueError("samples in a batch must share one text length")
    tokens = np.array(seqs, dtype=np.int64)
    targets = np.zeros_like(tokens)
    mask = np.zeros(tokens.shape)
    for i, s in enumerate(samples):
        full = s.prompt + s.answer
        targets[i] = full[1:]
        mask[i, len(s.prompt) - 1 :] = 1.0
    visual = np.stack([s.cells.reshape(-1) for s in samples]).astype(np.int64)
    return Batch(visual, tokens, targets, mask)


def majority_baseline(samples: Iterable[SyntheticSample]) -> float:
    """Accuracy of always answering the most frequent answer."""
    answers = [tuple(s.answer) for s in samples]
    _, counts = np.unique(np.array(answers), axis=0, return_counts=True)
    return counts.max() / len(answers)


def kinds(samples: Sequence[SyntheticSample]) -> np.ndarray:
    return np.array([s.kind for s in samples])
