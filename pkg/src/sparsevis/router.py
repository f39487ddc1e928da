"""Per-sample configuration routing.

A reserved routing token follows every question.  Its hidden state entering
the first self-attention layer feeds a small MLP that scores the viable
configurations.  The head is trained offline on pseudo-labels: for each
training subset, the cheapest configuration that keeps 99% of the maximal
configuration's accuracy.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numkernel as nk
from .analysis import config_cost
from .model import (
    AdamW,
    Batch,
    Configuration,
    LayerSchedule,
    ModelParams,
    answer_scores,
    hidden_before,
    maximal_config,
    resume_forward,
    score_logits,
)

ROUTE_TOKEN = 3
PSEUDO_LABEL_RATIO = 0.99
ROUTER_KEYS = ("router.w1", "router.b1", "router.w2", "router.b2")


# --------------------------------------------------------------------------
# pseudo-labels


@dataclass
class PseudoLabel:
    subset: str
    config_id: int
    config_ids: list[int]
    accuracies: list[float]
    losses: list[float]
    n_layers: list[int]
    reference_accuracy: float
    fallback: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def select_pseudo_label(accuracies: Sequence[float], n_layers: Sequence[int], losses: Sequence[float],
                        config_ids: Sequence[int], reference_accuracy: float,
                        ratio: float = PSEUDO_LABEL_RATIO) -> tuple[int, bool]:
    """Index of the labelled config and whether the fallback was taken.

    Passing configs reach ``ratio * reference_accuracy``; among them the one
    with fewest SA layers wins, then lowest loss, then lowest id.  If none
    pass, the most expensive config (most SA layers, lowest id) is used.
    """
    n = len(accuracies)
    if n == 0:
        raise ValueError("no configurations to choose from")
    bar = ratio * reference_accuracy
    passing = [i for i in range(n) if accuracies[i] >= bar]
    if not passing:
        return min(range(n), key=lambda i: (-n_layers[i], config_ids[i])), True
    return min(passing, key=lambda i: (n_layers[i], losses[i], config_ids[i])), False


def generate_pseudo_labels(params: ModelParams, schedule: LayerSchedule, train_subsets: Mapping[str, Batch],
                           viable_configs: Sequence[Configuration],
                           ratio: float = PSEUDO_LABEL_RATIO) -> list[PseudoLabel]:
    """One label per subset from logged accuracy and mean answer loss per config."""
    if not viable_configs:
        raise ValueError("viable_configs is empty")
    full = maximal_config(schedule)
    labels = []
    for name, batch in train_subsets.items():
        m, n_ans, _ = answer_scores(params, schedule, full, batch)
        ref = float(np.mean(m == n_ans))
        accs, losses = [], []
        for c in viable_configs:
            m, n_ans, l = answer_scores(params, schedule, c, batch)
            accs.append(float(np.mean(m == n_ans)))
            losses.append(float(np.mean(l)))
        ids = [c.id for c in viable_configs]
        sizes = [c.n_layers for c in viable_configs]
        i, fb = select_pseudo_label(accs, sizes, losses, ids, ref, ratio)
        labels.append(PseudoLabel(name, ids[i], ids, accs, losses, sizes, ref, fb))
    return labels


def write_pseudo_labels(path, labels: Sequence[PseudoLabel]) -> None:
    with Path(path).open("w") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_dict()) + "\n")


def read_pseudo_labels(path) -> list[PseudoLabel]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(PseudoLabel(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as e:
            raise ValueError(f"{path}:{n}: bad pseudo-label record ({e})") from None
    return out


# --------------------------------------------------------------------------
# routing token


def attach_routing_token(text_ids: Sequence[int], question_spans: Sequence[tuple[int, int]],
                         token: int = ROUTE_TOKEN) -> list[int]:
    """Insert ``token`` right after each half-open question span."""
    ids = [int(x) for x in text_ids]
    if token in ids:
        raise ValueError(f"reserved routing token {token} already present in the data")
    spans = sorted((int(a), int(b)) for a, b in question_spans)
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ValueError(f"question spans {(a0, a1)} and {(b0, _)} overlap")
    for a, b in spans:
        if not 0 <= a < b <= len(ids):
            raise ValueError(f"question span {(a, b)} out of range for {len(ids)} tokens")
    for _, end in reversed(spans):
        ids.insert(end, token)
    return ids


def routing_positions(text_ids: np.ndarray, token: int = ROUTE_TOKEN) -> list[np.ndarray]:
    """Positions of routing tokens per sequence."""
    text_ids = np.atleast_2d(text_ids)
    return [np.flatnonzero(row == token) for row in text_ids]


# --------------------------------------------------------------------------
# head


def init_router(params: ModelParams, n_configs: int, seed: int = 0) -> None:
    """Fresh 2-layer MLP head (hidden width d) over ``n_configs`` outputs."""
    d = params.dims.d
    rng = np.random.default_rng(seed)
    params.arrays["router.w1"] = rng.normal(0.0, d**-0.5, (d, d))
    params.arrays["router.b1"] = np.zeros(d)
    params.arrays["router.w2"] = rng.normal(0.0, d**-0.5, (d, n_configs))
    params.arrays["router.b2"] = np.zeros(n_configs)


def _head(p: Mapping[str, nk.Tensor], feats) -> nk.Tensor:
    x = nk.rmsnorm(feats, np.ones(np.shape(nk._data(feats))[-1]))
    h = nk.silu(nk.add(nk.matmul(x, p["router.w1"]), p["router.b1"]))
    return nk.add(nk.matmul(h, p["router.w2"]), p["router.b2"])


def _require_head(params: ModelParams, n_configs: int | None = None) -> None:
    if not all(k in params.arrays for k in ROUTER_KEYS):
        raise RuntimeError("router head is not trained; run train_router first")
    k = params.arrays["router.w2"].shape[1]
    if n_configs is not None and k != n_configs:
        raise ValueError(f"router head scores {k} configs but {n_configs} viable configs were given")


def router_logits(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    _require_head(params)
    p = {k: nk.Tensor(params.arrays[k]) for k in ROUTER_KEYS}
    with nk.no_grad():
        return _head(p, np.asarray(feats, dtype=np.float64)).data


def router_features(params: ModelParams, schedule: LayerSchedule, batch: Batch):
    """Routing-token states entering the first SA layer.

    Returns ``(features, owner)``: one row per routing token and the index of
    the sample it came from.  Also returns the prefix states for reuse.
    """
    if not schedule.sa_indices:
        raise ValueError("schedule has no self-attention layers to route over")
    first = min(schedule.sa_indices)
    v, t = hidden_before(params, schedule, batch.visual, batch.tokens, first)
    rows, owner = [], []
    for i, pos in enumerate(routing_positions(batch.tokens)):
        if len(pos) == 0:
            raise ValueError(f"sample {i} carries no routing token")
        rows.append(t[i, pos])
        owner.extend([i] * len(pos))
    return np.concatenate(rows), np.array(owner), (v, t)


@dataclass
class RouterReport:
    train_accuracy: float
    holdout_accuracy: float
    losses: list[float] = field(default_factory=list)


def fit_router_head(params: ModelParams, feats: np.ndarray, targets: np.ndarray, n_configs: int,
                    steps: int, seed: int = 0, lr: float = 1e-2, holdout: float = 0.2) -> RouterReport:
    """Cross-entropy training of the head alone on fixed features.

    ``targets`` are indices into the viable list.  A random ``holdout``
    fraction is kept aside for the reported held-out accuracy.
    """
    feats = np.asarray(feats, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= n_configs):
        raise ValueError(f"label index outside the {n_configs} viable configs")
    rng = np.random.default_rng(seed)
    if not all(k in params.arrays for k in ROUTER_KEYS):
        init_router(params, n_configs, seed)
    _require_head(params, n_configs)
    order = rng.permutation(len(targets))
    n_hold = int(round(holdout * len(targets))) if len(targets) > 1 else 0
    hold, train = order[:n_hold], order[n_hold:]
    opt = AdamW(lr=lr)
    ones = np.ones(len(train))
    losses = []
    for _ in range(steps):
        p = {k: nk.Tensor(params.arrays[k], requires_grad=True) for k in ROUTER_KEYS}
        with nk.GradientTape() as tape:
            loss = nk.cross_entropy(_head(p, feats[train]), targets[train], ones)
        grads = tape.gradient(loss, [p[k] for k in ROUTER_KEYS])
        opt.step(params, dict(zip(ROUTER_KEYS, grads)))
        losses.append(float(loss.data))

    def acc(idx):
        if len(idx) == 0:
            return float("nan")
        return float(np.mean(router_logits(params, feats[idx]).argmax(axis=-1) == targets[idx]))

    return RouterReport(acc(train), acc(hold), losses)


def train_router(params: ModelParams, schedule: LayerSchedule, batch: Batch, label_ids: Sequence[int],
                 viable_configs: Sequence[Configuration], steps: int, seed: int = 0,
                 lr: float = 1e-2, holdout: float = 0.2) -> RouterReport:
    """Train the head on per-sample config ids; the backbone stays frozen.

    ``label_ids`` holds one configuration id per sample (a subset's
    pseudo-label broadcast to its samples).
    """
    index = {c.id: k for k, c in enumerate(viable_configs)}
    bad = sorted({int(i) for i in label_ids} - set(index))
    if bad:
        raise ValueError(f"label config ids {bad} are not in the viable set")
    feats, owner, _ = router_features(params, schedule, batch)
    targets = np.array([index[int(label_ids[i])] for i in owner])
    return fit_router_head(params, feats, targets, len(viable_configs), steps, seed, lr, holdout)


# --------------------------------------------------------------------------
# routing


@dataclass
class RoutingDecision:
    per_question: list[int]
    final: int

    def to_dict(self) -> dict:
        return asdict(self)


def conservative_choice(predicted: Sequence[Configuration], costs: Sequence[int]) -> Configuration:
    """The most expensive prediction, lowest id on ties."""
    k = min(range(len(predicted)), key=lambda i: (-costs[i], predicted[i].id))
    return predicted[k]


def _decide(params, schedule, viable_configs, logits, n_t, n_v) -> tuple[RoutingDecision, Configuration]:
    preds = [viable_configs[int(k)] for k in logits.argmax(axis=-1)]
    dims = params.dims
    costs = [config_cost(schedule, c, n_t, n_v, dims.d, dims.d_ff) for c in preds]
    final = conservative_choice(preds, costs)
    return RoutingDecision([c.id for c in preds], final.id), final


def routed_batch(params: ModelParams, schedule: LayerSchedule, viable_configs: Sequence[Configuration],
                 batch: Batch):
    """Route every sample, then finish each forward pass with its decision.

    Returns ``(decisions, logits)``; the prefix up to the first SA layer is
    computed once and shared with the routed remainder.
    """
    if not viable_configs:
        raise ValueError("viable_configs is empty")
    _require_head(params, len(viable_configs))
    feats, owner, (v, t) = router_features(params, schedule, batch)
    logits = router_logits(params, feats)
    n_t, n_v = batch.tokens.shape[1], batch.visual.shape[1]
    decisions, finals = [], []
    for i in range(len(batch)):
        dec, cfg = _decide(params, schedule, viable_configs, logits[owner == i], n_t, n_v)
        decisions.append(dec)
        finals.append(cfg)
    out = None
    first = min(schedule.sa_indices)
    for cid in sorted({c.id for c in finals}):
        rows = np.array([i for i, c in enumerate(finals) if c.id == cid])
        cfg = finals[rows[0]]
        part = resume_forward(params, schedule, cfg, v[rows], t[rows], first)
        if out is None:
            out = np.empty((len(batch),) + part.shape[1:])
        out[rows] = part
    return decisions, out


def route(params: ModelParams, schedule: LayerSchedule, viable_configs: Sequence[Configuration],
          visual, text_ids) -> RoutingDecision:
    """Routing decision for a single sample."""
    visual = np.asarray(visual)[None]
    tokens = np.asarray(text_ids, dtype=np.int64)[None]
    dummy = np.zeros(tokens.shape)
    decisions, _ = routed_batch(params, schedule, viable_configs, Batch(visual, tokens, tokens, dummy))
    return decisions[0]


def routed_scores(params: ModelParams, schedule: LayerSchedule, viable_configs: Sequence[Configuration],
                  batch: Batch):
    """``(decisions, matches, answer_len, losses)`` under routed execution."""
    decisions, logits = routed_batch(params, schedule, viable_configs, batch)
    matches, losses = score_logits(logits, batch)
    return decisions, matches, batch.loss_mask.sum(axis=1).astype(int), losses
