"""Experiment configuration, dataset files and run orchestration."""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import synthetic as S
from .configspace import enumerate_configurations, read_viable, screen_viability
from .model import (
    Batch,
    Configuration,
    LayerSchedule,
    ModelDims,
    ModelParams,
    build_schedule,
    init_params,
    maximal_config,
    uniform_schedule,
)
from .packing import averaging_projector, pack_matrix, pack_selectors, packed_count


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field and line."""


@dataclass
class ExperimentConfig:
    layers: int = 12
    d: int = 64
    heads: int = 4
    d_ff: int = 256
    rope_base: float = 100.0
    # None selects the uniform schedule (CA at 0, 3, 6, ..., SA at 1, 4, 7, ...)
    ca_layers: list[int] | None = None
    sa_layers: list[int] | None = None
    # explicit viable SA subsets; None means read the screening result
    viable_configs: list[list[int]] | None = None
    viability_threshold: float = 0.97
    max_configs: int | None = None
    task: str = "mixture"
    grid: list[int] = field(default_factory=lambda: [8, 8])
    n_classes: int = 4
    train_size: int = 4000
    eval_size: int = 500
    steps: int = 2000
    universal_steps: int = 1000
    lr: float = 3e-3
    batch_size: int = 32
    router_steps: int = 300
    router_lr: float = 1e-2
    drop_subsets: int = 20
    seed: int = 0
    pack_reduction: float = 1.0
    pack_block: int = 1
    # "average" (parameter-free) or "learned" (s*s*d -> d map trained with the model)
    pack_projector: str = "average"
    out_dir: str = "runs/default"

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict, text: str = "", source: str = "<config>") -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            where = f"{source}:{_line_of(text, key)}"
            if key not in fields:
                raise ConfigError(f"{where}: unknown field {key!r}")
            kwargs[key] = _coerce(key, value, fields[key].type, where)
        cfg = cls(**kwargs)
        cfg._validate(text, source)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
        return cls.from_dict(data, text, str(path))

    def _validate(self, text: str, source: str) -> None:
        def fail(key, msg):
            raise ConfigError(f"{source}:{_line_of(text, key)}: field {key!r}: {msg}")

        for key in ("layers", "d", "heads", "d_ff", "train_size", "eval_size", "batch_size", "n_classes",
                    "pack_block"):
            if getattr(self, key) < 1:
                fail(key, "must be >= 1")
        for key in ("steps", "universal_steps", "router_steps", "drop_subsets"):
            if getattr(self, key) < 0:
                fail(key, "must be >= 0")
        if self.d % self.heads or (self.d // self.heads) % 2:
            fail("heads", f"d={self.d} must split into {self.heads} even-width heads")
        if self.task not in ("coarse", "fine", "text", "mixture"):
            fail("task", f"unknown task {self.task!r}")
        if len(self.grid) != 2 or min(self.grid) < 1:
            fail("grid", "must be [height, width] with positive entries")
        if self.pack_reduction < 1:
            fail("pack_reduction", "must be >= 1")
        if self.pack_projector not in ("average", "learned"):
            fail("pack_projector", f"unknown projector {self.pack_projector!r}")
        if not 0 < self.viability_threshold <= 1:
            fail("viability_threshold", "must lie in (0, 1]")
        if (self.ca_layers is None) != (self.sa_layers is None):
            fail("ca_layers" if self.ca_layers is None else "sa_layers",
                 "ca_layers and sa_layers must be given together")
        try:
            self.schedule()
        except ValueError as e:
            fail("sa_layers", str(e))
        try:
            self.task_spec()
        except ValueError as e:
            fail("grid", str(e))
        if self.viable_configs is not None:
            sa = set(self.schedule().sa_indices)
            for c in self.viable_configs:
                if not set(c) <= sa:
                    fail("viable_configs", f"{c} uses layers outside the SA set {sorted(sa)}")

    # ------------------------------------------------------------------
    def schedule(self) -> LayerSchedule:
        if self.ca_layers is None:
            return uniform_schedule(self.layers)
        return build_schedule(self.layers, self.ca_layers, self.sa_layers)

    def task_spec(self) -> S.TaskSpec:
        spec = S.TaskSpec(self.grid[0], self.grid[1], self.n_classes)
        for r, c in (spec.pointer, *spec.targets):
            if not (0 <= r < spec.height and 0 <= c < spec.width):
                raise ValueError(f"grid {self.grid} is too small for the pointer task")
        return spec

    def dims(self) -> ModelDims:
        spec = self.task_spec()
        return ModelDims(spec.vocab_size, spec.n_cells, self.d, self.heads, self.layers, self.d_ff,
                         self.rope_base)

    def packing(self) -> bool:
        return self.pack_reduction != 1 or self.pack_block != 1

    def n_visual(self) -> int:
        h, w = self.grid
        if not self.packing():
            return h * w
        return packed_count(h, w, self.pack_reduction, self.pack_block)

    def fresh_params(self, schedule: LayerSchedule | None = None) -> ModelParams:
        params = init_params(self.dims(), schedule or self.schedule(), derive_seed(self.seed, "init"))
        if self.packing():
            h, w = self.grid
            if self.pack_projector == "learned":
                params.visual_map = pack_selectors(h, w, self.pack_reduction, self.pack_block)
                params.arrays["pack_proj"] = averaging_projector(self.pack_block, self.d)
            else:
                params.visual_map = pack_matrix(h, w, self.pack_reduction, self.pack_block)
        return params



def _coerce(key: str, value: Any, annotation: str, where: str):
    """Check a JSON value against a field annotation (written as a string)."""
    ann = annotation.replace(" ", "")
    if ann.endswith("|None"):
        if value is None:
            return None
        ann = ann[: -len("|None")]
    if value is None:
        raise ConfigError(f"{where}: field {key!r} may not be null")

    def scalar(v, t):
        if t == "float" and isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        if t == "int" and isinstance(v, int) and not isinstance(v, bool):
            return v
        if t == "str" and isinstance(v, str):
            return v
        raise ConfigError(f"{where}: field {key!r} expects {t}, got {json.dumps(v)}")

    m = re.fullmatch(r"list\[(.*)\]", ann)
    if m is None:
        return scalar(value, ann)
    inner = m.group(1)
    if not isinstance(value, list):
        raise ConfigError(f"{where}: field {key!r} expects a list, got {json.dumps(value)}")
    m2 = re.fullmatch(r"list\[(.*)\]", inner)
    if m2:
        out = []
        for v in value:
            if not isinstance(v, list):
                raise ConfigError(f"{where}: field {key!r} expects a list of lists")
            out.append([scalar(x, m2.group(1)) for x in v])
        return out
    return [scalar(v, inner) for v in value]


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def derive_seed(seed: int, purpose: str) -> int:
    """Independent child seed per purpose (init, train data, eval data, ...)."""
    key = [ord(ch) for ch in purpose]
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


# --------------------------------------------------------------------------
# datasets: JSON lines (one sample per line, integer token ids) plus a
# ``.npy`` sidecar holding the cell grids, row i of the sidecar for line i


def write_dataset(path, samples: Sequence[S.SyntheticSample]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for i, s in enumerate(samples):
            fh.write(json.dumps({"index": i, "kind": s.kind, "question": s.question,
                                 "answer": s.answer}) + "\n")
    np.save(_sidecar(path), np.stack([s.cells for s in samples]).astype(np.int64))


def read_dataset(path) -> list[S.SyntheticSample]:
    path = Path(path)
    grids = np.load(_sidecar(path))
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(S.SyntheticSample(grids[rec["index"]], rec["question"], rec["answer"], rec["kind"]))
    if len(out) != len(grids):
        raise ValueError(f"{path}: {len(out)} records but {len(grids)} grids in the sidecar")
    return out


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".grids.npy")


# --------------------------------------------------------------------------
# run helpers


def datasets(cfg: ExperimentConfig):
    """Training and evaluation samples for a config, fixed by its seed."""
    spec = cfg.task_spec()
    train = S.gen_synthetic(cfg.task, cfg.train_size, derive_seed(cfg.seed, "train"), spec)
    evals = S.gen_synthetic(cfg.task, cfg.eval_size, derive_seed(cfg.seed, "eval"), spec)
    return train, evals


def subsets(samples: Sequence[S.SyntheticSample]) -> dict[str, Batch]:
    """Batches grouped by sample kind, in a fixed order."""
    kinds = S.kinds(samples)
    return {k: S.to_batch([s for s, kk in zip(samples, kinds) if kk == k]) for k in sorted(set(kinds))}


def resolve_viable(cfg: ExperimentConfig, run_dir: Path) -> list[Configuration]:
    if cfg.viable_configs is not None:
        configs = [Configuration(c, i) for i, c in enumerate(sorted(tuple(sorted(c)) for c in cfg.viable_configs))]
        return configs
    screen = run_dir / "screen.json"
    if screen.exists():
        return read_viable(screen)
    raise FileNotFoundError(f"no viable configs: set 'viable_configs' or run 'screen' first ({screen} missing)")


def config_by_name(name: str, schedule: LayerSchedule, configs: Sequence[Configuration]) -> Configuration:
    """``max``, ``none`` (CA only) or a config id from ``configs``."""
    if name == "max":
        return maximal_config(schedule)
    if name == "none":
        return Configuration(())
    try:
        cid = int(name)
    except ValueError:
        raise ValueError(f"config id must be an integer, 'max' or 'none', got {name!r}") from None
    for c in configs:
        if c.id == cid:
            return c
    raise ValueError(f"config id {cid} not among {[c.id for c in configs]}")


def run_screen(params, cfg: ExperimentConfig, eval_samples):
    schedule = cfg.schedule()
    configs = enumerate_configurations(schedule.sa_indices, cfg.max_configs)
    return screen_viability(params, schedule, subsets(eval_samples), configs, cfg.viability_threshold)
