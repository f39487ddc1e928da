"""Measurement tools: CKA, attention shares, layer-drop sensitivity, oracle, FLOPs."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import (
    CONV_KERNEL,
    Batch,
    Configuration,
    ForwardTrace,
    LayerKind,
    LayerSchedule,
    ModelParams,
    answer_scores,
)

# --------------------------------------------------------------------------
# CKA


def _centered_gram(x: np.ndarray) -> np.ndarray:
    """``H X X^T H``, formed from centred features.

    A gram that is only round-off relative to the raw one (constant
    features) is returned as exact zeros.
    """
    xc = x - x.mean(axis=0, keepdims=True)
    k = xc @ xc.T
    if np.linalg.norm(k) <= 1e-12 * max(np.linalg.norm(x) ** 2, 1e-300):
        return np.zeros_like(k)
    return k


def _alignment(kc: np.ndarray, lc: np.ndarray) -> float:
    nk_, nl = np.linalg.norm(kc), np.linalg.norm(lc)
    if nk_ == 0 or nl == 0:
        return 0.0
    return float(np.sum(kc * lc) / (nk_ * nl))


def cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA between two feature sets sharing the row (token) axis."""
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("need at least two rows")
    return _alignment(_centered_gram(X), _centered_gram(Y))


def cka_matrix(trace: ForwardTrace) -> np.ndarray:
    """Pairwise CKA of the visual states, per sample, averaged over the batch.

    Rows/columns index the states ``V^(0) .. V^(L)``.
    """
    states = trace.visual
    n = len(states)
    first = np.asarray(states[0])
    batch = first.shape[0] if first.ndim == 3 else 1
    out = np.zeros((n, n))
    for b in range(batch):
        grams: dict[int, np.ndarray] = {}
        centered = []
        for s in states:
            arr = np.asarray(s)
            key = id(s)
            if key not in grams:
                grams[key] = _centered_gram(arr[b] if arr.ndim == 3 else arr)
            centered.append(grams[key])
        for i in range(n):
            for j in range(i, n):
                out[i, j] += _alignment(centered[i], centered[j])
    out /= batch
    return np.triu(out) + np.triu(out, 1).T


# --------------------------------------------------------------------------
# attention shares


@dataclass
class AttentionShareRecord:
    layer: int
    kind: str
    query_to_image: float
    answer_to_image: float
    answer_to_query: float


def layer_attention(trace: ForwardTrace, layer: int) -> np.ndarray:
    """Head-averaged attention mass of one layer in ``[V; T]`` coordinates.

    Rows are sources; a row's total is the number of attention maps it took
    part in (1 for SA/text-only layers, 2 for text rows of a CA layer).
    """
    if not trace.keep_attention:
        raise ValueError("trace was recorded without attention weights")
    n_v = trace.n_visual
    n_t = np.asarray(trace.text[0]).shape[-2]
    b = np.asarray(trace.text[0]).shape[0]
    a = np.zeros((b, n_v + n_t, n_v + n_t))
    w_self = trace.self_weights[layer]
    w_cross = trace.cross_weights[layer]
    if trace.kinds[layer] is LayerKind.SELF_ATTN:
        a += w_self.mean(axis=1)
    else:
        a[:, n_v:, n_v:] += w_self.mean(axis=1)
        if w_cross is not None:
            a[:, n_v:, :n_v] += w_cross.mean(axis=1)
    return a


def _segment_share(a: np.ndarray, src: tuple[int, int], tgt: tuple[int, int]) -> float:
    rows = a[:, src[0] : src[1], :]
    total = rows.sum()
    if total == 0:
        return 0.0
    return float(rows[:, :, tgt[0] : tgt[1]].sum() / total)


def _check_spans(segments: Mapping[str, tuple[int, int]]) -> None:
    spans = sorted((tuple(v), k) for k, v in segments.items())
    for (a, ka), (b, kb) in zip(spans, spans[1:]):
        if b[0] < a[1]:
            raise ValueError(f"segments {ka!r} and {kb!r} overlap")


def attention_shares(trace: ForwardTrace, segments: Mapping[str, tuple[int, int]]) -> list[AttentionShareRecord]:
    """Per-layer attention share between image, query and answer segments.

    ``segments`` maps ``image``, ``query`` and ``answer`` to half-open spans in
    ``[V; T]`` coordinates.  A share is the attention mass flowing from the
    source rows to the target columns over the total mass of the source rows.
    """
    _check_spans(segments)
    img, qry, ans = segments["image"], segments["query"], segments["answer"]
    records = []
    for l in range(len(trace.kinds)):
        a = layer_attention(trace, l)
        records.append(AttentionShareRecord(
            l, trace.kinds[l].value,
            _segment_share(a, qry, img), _segment_share(a, ans, img), _segment_share(a, ans, qry),
        ))
    return records


# --------------------------------------------------------------------------
# layer-drop sensitivity


@dataclass
class DropSensitivityRecord:
    dropped: tuple[int, ...]
    accuracy: float
    baseline: float


def layer_drop_sensitivity(params: ModelParams, schedule: LayerSchedule, config: Configuration,
                           eval_set: Batch, num_subsets: int, rng: np.random.Generator) -> list[DropSensitivityRecord]:
    """Accuracy with visual tokens removed from random subsets of layers.

    The first record is the empty subset (the baseline).
    """
    L = schedule.total_layers
    base = _accuracy(params, schedule, config, eval_set, ())
    records = [DropSensitivityRecord((), base, base)]
    for _ in range(num_subsets):
        size = int(rng.integers(1, L + 1))
        dropped = tuple(sorted(int(x) for x in rng.choice(L, size=size, replace=False)))
        records.append(DropSensitivityRecord(dropped, _accuracy(params, schedule, config, eval_set, dropped), base))
    return records


def _accuracy(params, schedule, config, batch, drop) -> float:
    matches, n_ans, _ = answer_scores(params, schedule, config, batch, drop_visual=drop)
    return float(np.mean(matches == n_ans))


# --------------------------------------------------------------------------
# oracle selection


def oracle_rule(scores: Sequence[int], configs: Sequence[Configuration]) -> int:
    """Index of the best config: most matches, then fewest SA layers, then lowest id."""
    return min(range(len(configs)), key=lambda i: (-scores[i], configs[i].n_layers, configs[i].id))


def config_score_table(params: ModelParams, schedule: LayerSchedule, batch: Batch,
                       configs: Sequence[Configuration]):
    """Prefix-match scores ``(n_samples, n_configs)`` and answer lengths."""
    cols, n_ans = [], None
    for c in configs:
        m, n_ans, _ = answer_scores(params, schedule, c, batch)
        cols.append(m)
    return np.stack(cols, axis=1), n_ans


def oracle_select(params: ModelParams, schedule: LayerSchedule, batch: Batch,
                  configs: Sequence[Configuration]):
    """Per-sample oracle configuration.

    Returns ``(chosen, scores, n_ans)`` where ``chosen`` lists one
    :class:`Configuration` per sample.
    """
    scores, n_ans = config_score_table(params, schedule, batch, configs)
    chosen = [configs[oracle_rule(row, configs)] for row in scores]
    return chosen, scores, n_ans


# --------------------------------------------------------------------------
# FLOPs
#
# One multiply-accumulate is 2 FLOPs.  Counted: q/k/v/o projections, score and
# value products, feed-forward products, and the positional convolution.
# Not counted: softmax, normalisation, activations, embeddings, output head.


@dataclass
class CostReport:
    per_layer: list[int]
    kinds: list[str]
    positional: int
    total: int
    dense_total: int
    savings: float

    def to_dict(self) -> dict:
        return asdict(self)


def layer_flops(n: int, d: int, d_ff: int) -> int:
    """A full transformer layer over ``n`` tokens."""
    return 8 * n * d * d + 4 * n * n * d + 4 * n * d * d_ff


def cross_flops(n_t: int, n_v: int, d: int) -> int:
    """The cross-attention block alone (skipped when there are no visual tokens)."""
    if n_v == 0:
        return 0
    return 4 * n_t * d * d + 4 * n_v * d * d + 4 * n_t * n_v * d


def flops_report(schedule: LayerSchedule, config: Configuration, N_t: int, N_v: int, d: int,
                 d_ff: int) -> CostReport:
    if min(N_t, d, d_ff) <= 0 or N_v < 0:
        raise ValueError("dimensions must be positive")
    active = set(config.active_sa)
    per_layer, kinds = [], []
    for l, kind in enumerate(schedule.kinds):
        if kind is LayerKind.SELF_ATTN and l in active:
            per_layer.append(layer_flops(N_t + N_v, d, d_ff))
        elif kind is LayerKind.CROSS_ATTN:
            per_layer.append(layer_flops(N_t, d, d_ff) + cross_flops(N_t, N_v, d))
        else:
            kind = LayerKind.TEXT_ONLY
            per_layer.append(layer_flops(N_t, d, d_ff))
        kinds.append(kind.value)
    positional = 2 * N_v * d * CONV_KERNEL
    total = sum(per_layer) + positional
    dense = schedule.total_layers * layer_flops(N_t + N_v, d, d_ff) + positional
    return CostReport(per_layer, kinds, positional, total, dense, dense / total)


def config_cost(schedule: LayerSchedule, config: Configuration, N_t: int, N_v: int, d: int, d_ff: int) -> int:
    return flops_report(schedule, config, N_t, N_v, d, d_ff).total


# --------------------------------------------------------------------------
# report files: long-format CSV plus a JSON summary


def write_csv(path, rows: Iterable[Mapping]) -> None:
    rows = list(rows)
    path = Path(path)
    fields: list[str] = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def cka_rows(matrix: np.ndarray) -> list[dict]:
    n = matrix.shape[0]
    return [{"layer_i": i, "layer_j": j, "cka": float(matrix[i, j])} for i in range(n) for j in range(n)]


def share_rows(records: Sequence[AttentionShareRecord]) -> list[dict]:
    rows = []
    for r in records:
        for name in ("query_to_image", "answer_to_image", "answer_to_query"):
            rows.append({"layer": r.layer, "kind": r.kind, "interaction": name, "share": getattr(r, name)})
    return rows


def drop_rows(records: Sequence[DropSensitivityRecord]) -> list[dict]:
    return [{"subset": i, "dropped": " ".join(map(str, r.dropped)), "n_dropped": len(r.dropped),
             "accuracy": r.accuracy, "baseline": r.baseline} for i, r in enumerate(records)]


def flops_rows(report: CostReport) -> list[dict]:
    rows = [{"layer": l, "kind": k, "flops": f} for l, (k, f) in enumerate(zip(report.kinds, report.per_layer))]
    rows.append({"layer": "positional", "kind": "conv", "flops": report.positional})
    return rows
