"""Schedule-compiled decoder with text-only, cross-attention and self-attention layers.

Each layer ``l`` owns one transformer block ``TL_l``.  What the layer does
with it depends on the schedule:

* self-attention (SA): ``TL_l`` runs over ``[V; T]`` and refines both streams;
* cross-attention (CA): text first reads the unchanged visual tokens through a
  residual cross-attention block, then ``TL_l`` runs on the text stream;
* text-only: ``TL_l`` runs on the text stream alone.

An SA layer that is not active in the current :class:`Configuration` falls
back to text-only behaviour.  Visual tokens are only ever rewritten by active
SA layers.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

CONV_KERNEL = 7
CONV_PADDING = 3


class LayerKind(str, enum.Enum):
    TEXT_ONLY = "text"
    CROSS_ATTN = "cross"
    SELF_ATTN = "self"


@dataclass(frozen=True)
class LayerSchedule:
    total_layers: int
    ca_indices: tuple[int, ...]
    sa_indices: tuple[int, ...]
    kinds: tuple[LayerKind, ...]

    def to_dict(self) -> dict:
        return {"layers": self.total_layers, "ca": list(self.ca_indices), "sa": list(self.sa_indices)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSchedule":
        return build_schedule(d["layers"], d["ca"], d["sa"])


def build_schedule(L: int, ca: Iterable[int], sa: Iterable[int]) -> LayerSchedule:
    ca, sa = sorted(set(ca)), sorted(set(sa))
    for idx in ca + sa:
        if not 0 <= idx < L:
            raise ValueError(f"layer index {idx} out of range [0, {L})")
    both = sorted(set(ca) & set(sa))
    if both:
        raise ValueError(f"index {both[0]} in both sets")
    kinds = []
    for l in range(L):
        if l in sa:
            kinds.append(LayerKind.SELF_ATTN)
        elif l in ca:
            kinds.append(LayerKind.CROSS_ATTN)
        else:
            kinds.append(LayerKind.TEXT_ONLY)
    return LayerSchedule(L, tuple(ca), tuple(sa), tuple(kinds))


def uniform_schedule(L: int) -> LayerSchedule:
    """CA and SA layers spread uniformly, a third of the layers each.

    SA sits at ``1, 4, 7, ...`` and CA at ``0, 3, 6, ...``.
    """
    k = L // 3
    return build_schedule(L, [3 * i for i in range(k)], [3 * i + 1 for i in range(k)])


@dataclass(frozen=True)
class Configuration:
    active_sa: tuple[int, ...]
    id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "active_sa", tuple(sorted(self.active_sa)))

    @property
    def n_layers(self) -> int:
        return len(self.active_sa)

    def to_dict(self) -> dict:
        return {"id": self.id, "active_sa": list(self.active_sa)}

    @classmethod
    def from_dict(cls, d: dict) -> "Configuration":
        return cls(tuple(d["active_sa"]), d.get("id", -1))


def maximal_config(schedule: LayerSchedule, id: int = -1) -> Configuration:
    return Configuration(schedule.sa_indices, id)


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    n_cells: int
    d: int = 64
    heads: int = 4
    layers: int = 12
    d_ff: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d)
        if self.d % self.heads or (self.d // self.heads) % 2:
            raise ValueError(f"d={self.d} must split into {self.heads} even-width heads")


@dataclass
class ModelParams:
    dims: ModelDims
    arrays: dict[str, np.ndarray]
    seed: int = 0
    # fixed linear map applied to embedded visual tokens (token packing):
    # (N', N_v) for a parameter-free projector, or (s*s, N', N_v) sub-position
    # selectors whose concatenated outputs go through the learned "pack_proj"
    visual_map: np.ndarray | None = None

    def copy(self) -> "ModelParams":
        vm = None if self.visual_map is None else self.visual_map.copy()
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()}, self.seed, vm)

    @property
    def ca_layers(self) -> set[int]:
        return {int(k[5:].split(".")[0]) for k in self.arrays if ".ca_wq" in k}

    @property
    def has_router(self) -> bool:
        return "router.w1" in self.arrays


def init_params(dims: ModelDims, schedule: LayerSchedule, seed: int = 0) -> ModelParams:
    """Random initial weights; every cross-attention output projection is zero."""
    if dims.layers != schedule.total_layers:
        raise ValueError(f"dims has {dims.layers} layers, schedule has {schedule.total_layers}")
    rng = np.random.default_rng(seed)
    d, f = dims.d, dims.d_ff
    out_std = 1.0 / math.sqrt(2 * dims.layers)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    a: dict[str, np.ndarray] = {
        "tok_embed": normal((dims.vocab_size, d), 1.0),
        "cell_embed": normal((dims.n_cells, d), 1.0),
        "pos_conv": normal((d, CONV_KERNEL), 0.1),
    }
    for l in range(dims.layers):
        p = f"layer{l}."
        a[p + "attn_norm"] = np.ones(d)
        for name in ("wq", "wk", "wv"):
            a[p + name] = normal((d, d), 1 / math.sqrt(d))
        a[p + "wo"] = normal((d, d), out_std / math.sqrt(d))
        a[p + "ffn_norm"] = np.ones(d)
        a[p + "w_up"] = normal((d, f), 1 / math.sqrt(d))
        a[p + "w_down"] = normal((f, d), out_std / math.sqrt(f))
        if l in schedule.ca_indices:
            a[p + "ca_norm_q"] = np.ones(d)
            a[p + "ca_norm_kv"] = np.ones(d)
            for name in ("ca_wq", "ca_wk", "ca_wv"):
                a[p + name] = normal((d, d), 1 / math.sqrt(d))
            a[p + "ca_wo"] = np.zeros((d, d))
    a["final_norm"] = np.ones(d)
    a["head"] = normal((d, dims.vocab_size), 1 / math.sqrt(d))
    return ModelParams(dims, a, seed)


@dataclass
class ForwardTrace:
    """Per-layer states; ``visual[l]`` is the visual state after ``l`` layers."""

    visual: list[np.ndarray] = field(default_factory=list)
    text: list[np.ndarray] = field(default_factory=list)
    kinds: list[LayerKind] = field(default_factory=list)
    self_weights: list[np.ndarray | None] = field(default_factory=list)
    cross_weights: list[np.ndarray | None] = field(default_factory=list)
    n_visual: int = 0
    keep_attention: bool = False


@dataclass
class Batch:
    """Teacher-forced inputs; ``loss_mask`` marks positions predicting answer tokens."""

    visual: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.visual[idx], self.tokens[idx], self.targets[idx], self.loss_mask[idx])


# --------------------------------------------------------------------------
# blocks


def _heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return nk.transpose(nk.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return nk.reshape(nk.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _transformer_layer(p, l: int, x: Tensor, positions: np.ndarray, dims: ModelDims):
    pre = f"layer{l}."
    h = nk.rmsnorm(x, p[pre + "attn_norm"])
    cos, sin = nk.rope_tables(positions, dims.d // dims.heads, dims.rope_base)
    q = nk.rope(_heads(nk.matmul(h, p[pre + "wq"]), dims.heads), cos, sin)
    k = nk.rope(_heads(nk.matmul(h, p[pre + "wk"]), dims.heads), cos, sin)
    v = _heads(nk.matmul(h, p[pre + "wv"]), dims.heads)
    o, w = nk.scaled_dot_attention(q, k, v, nk.causal_mask(len(positions)))
    x = nk.add(x, nk.matmul(_merge(o), p[pre + "wo"]))
    h = nk.rmsnorm(x, p[pre + "ffn_norm"])
    x = nk.add(x, nk.matmul(nk.silu(nk.matmul(h, p[pre + "w_up"])), p[pre + "w_down"]))
    return x, w


def _cross_block(p, l: int, t: Tensor, v: Tensor, dims: ModelDims):
    if v.shape[-2] == 0:
        return t, None
    pre = f"layer{l}."
    hq = nk.rmsnorm(t, p[pre + "ca_norm_q"])
    hv = nk.rmsnorm(v, p[pre + "ca_norm_kv"])
    q = _heads(nk.matmul(hq, p[pre + "ca_wq"]), dims.heads)
    k = _heads(nk.matmul(hv, p[pre + "ca_wk"]), dims.heads)
    vv = _heads(nk.matmul(hv, p[pre + "ca_wv"]), dims.heads)
    o, w = nk.scaled_dot_attention(q, k, vv)
    return nk.add(t, nk.matmul(_merge(o), p[pre + "ca_wo"])), w


def _bind(params: ModelParams, grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=grad) for k, v in params.arrays.items()}


def _embed_visual(p, params: ModelParams, visual: np.ndarray) -> Tensor:
    visual = np.asarray(visual)
    if np.issubdtype(visual.dtype, np.integer):
        v = nk.embedding(p["cell_embed"], visual)
    else:
        v = Tensor(visual)
    vm = params.visual_map
    if vm is not None:
        with nk.uncounted():
            if vm.ndim == 2:
                v = nk.matmul(vm, v)
            else:
                v = nk.matmul(nk.concat([nk.matmul(m, v) for m in vm], axis=-1), p["pack_proj"])
    return conditional_pos_embed(v, p["pos_conv"])


def conditional_pos_embed(v, kernels) -> Tensor:
    """``V + depthwise_conv1d(V)`` with kernel 7 and padding 3."""
    return nk.add(v, nk.depthwise_conv1d(v, kernels, CONV_PADDING))


def cross_attention_block(params: ModelParams, layer: int, T, V) -> Tensor:
    """Residual cross-attention of text over visual tokens for one CA layer."""
    p = _bind(params)
    T = np.asarray(nk._data(T))
    V = np.asarray(nk._data(V))
    unbatched = T.ndim == 2
    if unbatched:
        T, V = T[None], V[None]
    z, _ = _cross_block(p, layer, Tensor(T), Tensor(V), params.dims)
    return z.data[0] if unbatched else z.data


def _check_config(schedule: LayerSchedule, config: Configuration) -> None:
    extra = set(config.active_sa) - set(schedule.sa_indices)
    if extra:
        raise ValueError(f"config activates SA layers {sorted(extra)} not in schedule SA set {list(schedule.sa_indices)}")


def _run_layers(p, params, schedule, active, v, t, start, stop, drop, trace):
    dims = params.dims
    n_v, n_t = v.shape[-2], t.shape[-2]
    text_pos = np.arange(n_v, n_v + n_t)
    all_pos = np.arange(n_v + n_t)
    for l in range(start, stop):
        kind = schedule.kinds[l]
        if kind is LayerKind.SELF_ATTN and l not in active:
            kind = LayerKind.TEXT_ONLY
        if l in drop:
            kind = LayerKind.TEXT_ONLY
        w_self = w_cross = None
        if kind is LayerKind.SELF_ATTN:
            x, w_self = _transformer_layer(p, l, nk.concat([v, t], axis=1), all_pos, dims)
            v = nk.slice_axis(x, 0, n_v, axis=1)
            t = nk.slice_axis(x, n_v, n_v + n_t, axis=1)
        else:
            if kind is LayerKind.CROSS_ATTN:
                t, w_cross = _cross_block(p, l, t, v, dims)
            t, w_self = _transformer_layer(p, l, t, text_pos, dims)
        if trace is not None:
            trace.visual.append(v.data)
            trace.text.append(t.data)
            trace.kinds.append(kind)
            trace.self_weights.append(w_self if trace.keep_attention else None)
            trace.cross_weights.append(w_cross if trace.keep_attention else None)
    return v, t


def _logits(p, t: Tensor) -> Tensor:
    with nk.uncounted():
        return nk.matmul(nk.rmsnorm(t, p["final_norm"]), p["head"])


def _as_batch(visual, text_ids):
    visual = np.asarray(visual)
    text_ids = np.asarray(text_ids)
    unbatched = text_ids.ndim == 1
    if unbatched:
        visual, text_ids = visual[None], text_ids[None]
    return visual, text_ids, unbatched


def _forward_tensors(p, params, schedule, config, visual, text_ids, *, keep_attention=False,
                     drop_visual=(), stop=None, trace=True):
    _check_config(schedule, config)
    missing = set(schedule.ca_indices) - params.ca_layers
    if missing:
        raise ValueError(f"params lack cross-attention weights for layers {sorted(missing)}")
    v = _embed_visual(p, params, visual)
    t = nk.embedding(p["tok_embed"], text_ids)
    tr = None
    if trace:
        tr = ForwardTrace(visual=[v.data], text=[t.data], n_visual=v.shape[-2],
                          keep_attention=keep_attention)
    stop = schedule.total_layers if stop is None else stop
    v, t = _run_layers(p, params, schedule, set(config.active_sa), v, t, 0, stop, set(drop_visual), tr)
    return v, t, tr


def forward(params: ModelParams, schedule: LayerSchedule, config: Configuration, visual, text_ids,
            *, keep_attention: bool = False, drop_visual: Iterable[int] = ()):
    """Next-token logits for every text position, plus the per-layer trace.

    ``visual`` is either integer cell ids ``(N_v,)`` or embedded tokens
    ``(N_v, d)`` (optionally with a leading batch axis).  ``drop_visual``
    lists layers that lose all visual interaction for this pass.
    """
    visual, text_ids, unbatched = _as_batch(visual, text_ids)
    p = _bind(params)
    _, t, tr = _forward_tensors(p, params, schedule, config, visual, text_ids,
                                keep_attention=keep_attention, drop_visual=drop_visual)
    logits = _logits(p, t).data
    return (logits[0] if unbatched else logits), tr


def dense_forward(params: ModelParams, visual, text_ids, *, drop_visual: Iterable[int] = ()):
    """Reference model: every layer is a full transformer layer over ``[V; T]``."""
    L = params.dims.layers
    visual, text_ids, unbatched = _as_batch(visual, text_ids)
    p = _bind(params)
    v = _embed_visual(p, params, visual)
    t = nk.embedding(p["tok_embed"], text_ids)
    drop = set(drop_visual)
    n_v, n_t = v.shape[-2], t.shape[-2]
    for l in range(L):
        if l in drop:
            t, _ = _transformer_layer(p, l, t, np.arange(n_v, n_v + n_t), params.dims)
            continue
        x, _ = _transformer_layer(p, l, nk.concat([v, t], axis=1), np.arange(n_v + n_t), params.dims)
        v, t = nk.slice_axis(x, 0, n_v, 1), nk.slice_axis(x, n_v, n_v + n_t, 1)
    logits = _logits(p, t).data
    return logits[0] if unbatched else logits


def hidden_before(params: ModelParams, schedule: LayerSchedule, visual, text_ids, layer: int):
    """Text and visual states entering ``layer`` (config independent below the first SA)."""
    visual, text_ids, _ = _as_batch(visual, text_ids)
    p = _bind(params)
    first_sa = min(schedule.sa_indices, default=schedule.total_layers)
    if layer > first_sa:
        raise ValueError(f"layer {layer} lies past the first SA layer {first_sa}")
    v, t, _ = _forward_tensors(p, params, schedule, Configuration(()), visual, text_ids,
                               stop=layer, trace=False)
    return v.data, t.data


def resume_forward(params: ModelParams, schedule: LayerSchedule, config: Configuration, v, t, start: int):
    """Finish a forward pass from states entering layer ``start``; returns logits."""
    _check_config(schedule, config)
    p = _bind(params)
    _, t = _run_layers(p, params, schedule, set(config.active_sa), Tensor(v), Tensor(t),
                       start, schedule.total_layers, set(), None)
    return _logits(p, t).data


# --------------------------------------------------------------------------
# scoring


def loss_tensor(p, params, schedule, config, batch: Batch) -> Tensor:
    _, t, _ = _forward_tensors(p, params, schedule, config, batch.visual, batch.tokens, trace=False)
    return nk.cross_entropy(_logits(p, t), batch.targets, batch.loss_mask)


def answer_scores(params: ModelParams, schedule: LayerSchedule, config: Configuration, batch: Batch,
                  *, drop_visual: Iterable[int] = (), chunk: int = 256):
    """Greedy-decoding prefix matches and mean answer-token loss per sample.

    Under greedy decoding the generated prefix equals the ground-truth prefix
    up to the first wrong token, so the count of matches before the first
    error is read off a single teacher-forced pass.  Returns
    ``(matches, answer_len, losses)``.
    """
    matches, losses = [], []
    for s in range(0, len(batch), chunk):
        b = batch.take(slice(s, s + chunk))
        logits, _ = forward(params, schedule, config, b.visual, b.tokens, drop_visual=drop_visual)
        m, l = score_logits(logits, b)
        matches.append(m)
        losses.append(l)
    return np.concatenate(matches), batch.loss_mask.sum(axis=1).astype(int), np.concatenate(losses)


def score_logits(logits: np.ndarray, batch: Batch):
    """Prefix matches and mean answer loss per sample from teacher-forced logits."""
    n_ans = batch.loss_mask.sum(axis=1).astype(int)
    pred = logits.argmax(axis=-1)
    ok = (pred == batch.targets) | (batch.loss_mask == 0)
    first_bad = np.where(ok.all(axis=1), batch.tokens.shape[1], np.argmin(ok, axis=1))
    start = np.argmax(batch.loss_mask > 0, axis=1)
    matches = np.minimum(np.maximum(first_bad - start, 0), n_ans)
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    tok = -np.take_along_axis(logp, batch.targets[..., None], axis=-1)[..., 0]
    return matches, (tok * batch.loss_mask).sum(axis=1) / batch.loss_mask.sum(axis=1)


def accuracy(params, schedule, config, batch: Batch, **kw) -> float:
    matches, n_ans, _ = answer_scores(params, schedule, config, batch, **kw)
    return float(np.mean(matches == n_ans))


def greedy_decode(params: ModelParams, schedule: LayerSchedule, config: Configuration, visual,
                  prompt_ids: Sequence[int], n_tokens: int) -> list[int]:
    """Generate ``n_tokens`` tokens greedily after ``prompt_ids``."""
    ids = list(prompt_ids)
    for _ in range(n_tokens):
        logits, _ = forward(params, schedule, config, visual, np.asarray(ids))
        ids.append(int(np.argmax(logits[-1])))
    return ids[len(prompt_ids):]


# --------------------------------------------------------------------------
# training


class AdamW:
    """AdamW with decoupled weight decay (default 0) and optional global-norm clipping."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip: float | None = 1.0,
                 trainable: Callable[[str], bool] | None = None):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.clip = weight_decay, clip
        self.trainable = trainable
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def names(self, params: ModelParams) -> list[str]:
        keys = sorted(params.arrays)
        return [k for k in keys if self.trainable is None or self.trainable(k)]

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        if self.clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        for k, g in grads.items():
            w = params.arrays[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(w)
                self.v[k] = np.zeros_like(w)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            if self.weight_decay:
                w -= self.lr * self.weight_decay * w
            w -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def loss_and_grads(params: ModelParams, schedule, config, batch: Batch, names: Sequence[str]):
    p = _bind(params)
    for k in names:
        p[k].requires_grad = True
    with nk.GradientTape() as tape:
        loss = loss_tensor(p, params, schedule, config, batch)
    grads = tape.gradient(loss, [p[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


def train_step(params: ModelParams, schedule: LayerSchedule, batch: Batch, config: Configuration,
               opt: AdamW):
    """One optimizer update on the answer-token cross-entropy; params change in place."""
    loss, grads = loss_and_grads(params, schedule, config, batch, opt.names(params))
    if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        raise FloatingPointError(f"non-finite loss {loss} (non-finite grads: {bad[:5]}) at step {opt.t}")
    opt.step(params, grads)
    return params, loss


def _streams(seed: int):
    batch_seq, config_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(batch_seq), np.random.default_rng(config_seq)


def train_universal(params: ModelParams, schedule: LayerSchedule, dataset: Batch,
                    viable_configs: Sequence[Configuration], steps: int, seed: int = 0, *,
                    batch_size: int = 32, lr: float = 1e-3, opt: AdamW | None = None,
                    log: Callable[[int, float, Configuration], None] | None = None):
    """Train with one viable configuration drawn uniformly per step.

    Config draws and batch draws use independent streams derived from
    ``seed``, so a single-config run is identical to fixed-config training.
    Returns ``(params, losses)``.
    """
    if not viable_configs:
        raise ValueError("viable_configs is empty")
    opt = opt or AdamW(lr=lr)
    batch_rng, config_rng = _streams(seed)
    losses = []
    for step in range(steps):
        config = viable_configs[int(config_rng.integers(len(viable_configs)))]
        idx = batch_rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        _, loss = train_step(params, schedule, dataset.take(np.sort(idx)), config, opt)
        losses.append(loss)
        if log is not None:
            log(step, loss, config)
    return params, losses


def train_fixed(params, schedule, dataset, config, steps, seed=0, **kw):
    return train_universal(params, schedule, dataset, [config], steps, seed, **kw)


def config_draws(n_configs: int, n: int, seed: int) -> np.ndarray:
    """The config index sequence :func:`train_universal` would draw."""
    _, config_rng = _streams(seed)
    return np.array([int(config_rng.integers(n_configs)) for _ in range(n)])


# --------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a single ``.npz`` archive.  The entry ``__meta__`` holds a
# UTF-8 JSON document:
#   {"format": "sparsevis-checkpoint", "version": 1, "dims": {...},
#    "seed": int, "schedule": {"layers", "ca", "sa"} | null,
#    "viable_configs": [{"id", "active_sa"}, ...], "extra": {...}}
# Every other entry is a float64 parameter array keyed by name.  Router head
# weights live under the ``router.`` prefix; a packing map, if any, under
# ``__visual_map__``.

CHECKPOINT_FORMAT = "sparsevis-checkpoint"


def save_checkpoint(path, params: ModelParams, schedule: LayerSchedule | None = None,
                    viable_configs: Sequence[Configuration] = (), extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dims": params.dims.__dict__,
        "seed": params.seed,
        "schedule": None if schedule is None else schedule.to_dict(),
        "viable_configs": [c.to_dict() for c in viable_configs],
        "extra": extra or {},
    }
    blob = dict(params.arrays)
    blob["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    if params.visual_map is not None:
        blob["__visual_map__"] = params.visual_map
    with open(path, "wb") as fh:
        np.savez(fh, **blob)


def load_checkpoint(path):
    """Returns ``(params, schedule, viable_configs, extra)``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        arrays = {k: z[k].astype(np.float64) for k in z.files if not k.startswith("__")}
        vmap = z["__visual_map__"] if "__visual_map__" in z.files else None
    dims = ModelDims(**meta["dims"])
    params = ModelParams(dims, arrays, meta["seed"], vmap)
    schedule = None if meta["schedule"] is None else LayerSchedule.from_dict(meta["schedule"])
    configs = [Configuration.from_dict(c) for c in meta["viable_configs"]]
    return params, schedule, configs, meta["extra"]
