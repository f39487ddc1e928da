"""Command line interface: ``python -m sparsevis <command> ...``.

Exit codes: 0 success, 1 usage error, 2 invalid config, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import router as R
from . import synthetic as S
from .harness import (
    ConfigError,
    ExperimentConfig,
    config_by_name,
    datasets,
    derive_seed,
    resolve_viable,
    run_screen,
    subsets,
    write_dataset,
)
from .model import (
    AdamW,
    Configuration,
    answer_scores,
    build_schedule,
    forward,
    load_checkpoint,
    maximal_config,
    save_checkpoint,
    train_universal,
)
from .packing import TokenGrid, pack_tokens, read_grid, resized_shape, write_grid

EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--run-dir", type=Path, help="overrides the config out_dir")
    p.add_argument("--checkpoint", type=Path, help="model file (default: <run-dir>/model.npz)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsevis", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--kind", choices=["coarse", "fine", "text", "mixture"])
    p.add_argument("--n", type=int)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train", help="train dense, fixed-config or universal")
    _common(p)
    p.add_argument("--mode", choices=["dense", "fixed", "universal"], default="fixed")
    p.add_argument("--config-id", default="max", help="fixed mode: config id, 'max' or 'none'")
    p.add_argument("--init", type=Path, help="start from this checkpoint")

    for name, text in (("screen", "viability screening"), ("route-label", "pseudo-labels per subset"),
                       ("route-train", "train the routing head")):
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("eval", help="accuracy and cost of a fixed, routed or oracle config")
    _common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config-id", default="max")
    g.add_argument("--routed", action="store_true")
    g.add_argument("--oracle", action="store_true")

    p = sub.add_parser("analyze", help="cka | shares | drop | flops")
    _common(p)
    p.add_argument("what", choices=["cka", "shares", "drop", "flops"])
    p.add_argument("--config-id", default="max")

    p = sub.add_parser("pack", help="pack a token grid")
    _common(p)
    p.add_argument("--input", type=Path, help="grid dump; default is a random grid")
    p.add_argument("--size", type=int, nargs=3, metavar=("H", "W", "C"), default=(27, 27, 8))
    p.add_argument("--reduction", type=float)
    p.add_argument("--block", type=int)
    p.add_argument("--projector", choices=["none", "average"], default="none")
    p.add_argument("--out", type=Path)
    return parser


# --------------------------------------------------------------------------


def _setup(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    run_dir = args.run_dir or Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.json")
    return cfg, run_dir


def _ckpt(args, run_dir: Path) -> Path:
    return args.checkpoint or run_dir / "model.npz"


def _load(args, run_dir):
    path = _ckpt(args, run_dir)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run 'train' first")
    return load_checkpoint(path)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=A._jsonable))


def cmd_gen_data(args, cfg, run_dir):
    kind = args.kind or cfg.task
    n = args.n or cfg.train_size
    out = args.out or run_dir / f"{kind}.jsonl"
    samples = S.gen_synthetic(kind, n, derive_seed(cfg.seed, "gen-data"), cfg.task_spec())
    write_dataset(out, samples)
    _emit({"path": str(out), "n": n, "kind": kind})


def cmd_train(args, cfg, run_dir):
    train, _ = datasets(cfg)
    batch = S.to_batch(train)
    viable: list[Configuration] = []
    if args.mode == "dense":
        schedule = build_schedule(cfg.layers, [], range(cfg.layers))
        params = cfg.fresh_params(schedule) if args.init is None else load_checkpoint(args.init)[0]
        configs, steps = [maximal_config(schedule)], cfg.steps
    else:
        schedule = cfg.schedule()
        if args.init is not None:
            params = load_checkpoint(args.init)[0]
        elif args.mode == "universal" and _ckpt(args, run_dir).exists():
            params = load_checkpoint(_ckpt(args, run_dir))[0]
        else:
            params = cfg.fresh_params()
        if args.mode == "universal":
            viable = resolve_viable(cfg, run_dir)
            configs, steps = viable, cfg.universal_steps
        else:
            known = resolve_viable(cfg, run_dir) if args.config_id not in ("max", "none") else []
            configs, steps = [config_by_name(args.config_id, schedule, known)], cfg.steps
    log_rows = []
    _, losses = train_universal(params, schedule, batch, configs, steps, derive_seed(cfg.seed, "train-steps"),
                                batch_size=cfg.batch_size, opt=AdamW(lr=cfg.lr),
                                log=lambda s, l, c: log_rows.append({"step": s, "loss": l, "config_id": c.id}))
    A.write_csv(run_dir / "train_log.csv", log_rows)
    save_checkpoint(_ckpt(args, run_dir), params, schedule, viable, {"mode": args.mode})
    summary = {"mode": args.mode, "steps": steps, "final_loss": losses[-1] if losses else None,
               "n_configs": len(configs)}
    A.write_json(run_dir / "train.json", summary)
    _emit(summary)


def cmd_screen(args, cfg, run_dir):
    params, schedule, _, _ = _load(args, run_dir)
    _, evals = datasets(cfg)
    if schedule is not None and schedule != cfg.schedule():
        raise ValueError("checkpoint schedule differs from the config schedule")
    report = run_screen(params, cfg, evals)
    report.write(run_dir / "screen.csv", run_dir / "screen.json")
    _emit({"configs": len(report.configs), "viable": [c.to_dict() for c in report.viable_configs()]})


def _labels(params, schedule, viable, cfg):
    train, _ = datasets(cfg)
    return R.generate_pseudo_labels(params, schedule, subsets(train), viable)


def cmd_route_label(args, cfg, run_dir):
    params, schedule, ckpt_viable, _ = _load(args, run_dir)
    viable = ckpt_viable or resolve_viable(cfg, run_dir)
    labels = _labels(params, schedule, viable, cfg)
    R.write_pseudo_labels(run_dir / "labels.jsonl", labels)
    _emit([{"subset": l.subset, "config_id": l.config_id, "fallback": l.fallback} for l in labels])


def _train_router(params, schedule, viable, labels, cfg):
    train, _ = datasets(cfg)
    by_subset = {l.subset: l.config_id for l in labels}
    kinds = S.kinds(train)
    missing = sorted(set(kinds) - set(by_subset))
    if missing:
        raise ValueError(f"no pseudo-label for subsets {missing}")
    ids = [by_subset[k] for k in kinds]
    return R.train_router(params, schedule, S.to_batch(train), ids, viable, cfg.router_steps,
                          derive_seed(cfg.seed, "router"), cfg.router_lr)


def cmd_route_train(args, cfg, run_dir):
    params, schedule, ckpt_viable, extra = _load(args, run_dir)
    viable = ckpt_viable or resolve_viable(cfg, run_dir)
    path = run_dir / "labels.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run 'route-label' first")
    report = _train_router(params, schedule, viable, R.read_pseudo_labels(path), cfg)
    save_checkpoint(_ckpt(args, run_dir), params, schedule, viable, extra)
    out = {"train_accuracy": report.train_accuracy, "holdout_accuracy": report.holdout_accuracy,
           "final_loss": report.losses[-1] if report.losses else None}
    A.write_json(run_dir / "router.json", out)
    _emit(out)


def _cost(schedule, config, cfg, batch):
    return A.flops_report(schedule, config, batch.tokens.shape[1], cfg.n_visual(), cfg.d, cfg.d_ff)


def cmd_eval(args, cfg, run_dir):
    params, schedule, ckpt_viable, extra = _load(args, run_dir)
    _, evals = datasets(cfg)
    batch = S.to_batch(evals)
    if args.routed:
        viable = ckpt_viable or resolve_viable(cfg, run_dir)
        if not params.has_router:
            print("note: checkpoint has no router head; labelling and training one now", file=sys.stderr)
            _train_router(params, schedule, viable, _labels(params, schedule, viable, cfg), cfg)
            save_checkpoint(_ckpt(args, run_dir), params, schedule, viable, extra)
        decisions, m, n, _ = R.routed_scores(params, schedule, viable, batch)
        by_id = {c.id: c for c in viable}
        flops = [_cost(schedule, by_id[d.final], cfg, batch).total for d in decisions]
        rows = [{"config": "routed", "accuracy": float(np.mean(m == n)), "mean_flops": float(np.mean(flops))}]
        for c in viable:
            mm, nn, _ = answer_scores(params, schedule, c, batch)
            rows.append({"config": f"{c.id}:{list(c.active_sa)}", "accuracy": float(np.mean(mm == nn)),
                         "mean_flops": float(_cost(schedule, c, cfg, batch).total)})
        A.write_csv(run_dir / "eval_routed.csv", rows)
        print(f"{'config':<24}{'accuracy':>10}{'mean FLOPs':>16}")
        for r in rows:
            print(f"{r['config']:<24}{r['accuracy']:>10.4f}{r['mean_flops']:>16.0f}")
        A.write_json(run_dir / "eval.json", {"routed": rows[0], "fixed": rows[1:]})
        return
    if args.oracle:
        viable = ckpt_viable or resolve_viable(cfg, run_dir)
        chosen, scores, n = A.oracle_select(params, schedule, batch, viable)
        index = {c.id: k for k, c in enumerate(viable)}
        acc = float(np.mean([scores[i, index[c.id]] == n[i] for i, c in enumerate(chosen)]))
        flops = float(np.mean([_cost(schedule, c, cfg, batch).total for c in chosen]))
        out = {"oracle_accuracy": acc, "mean_flops": flops,
               "fixed_accuracy": {str(c.id): float(np.mean(scores[:, k] == n)) for k, c in enumerate(viable)}}
    else:
        config = config_by_name(args.config_id, schedule, ckpt_viable)
        m, n, _ = answer_scores(params, schedule, config, batch)
        out = {"config": config.to_dict(), "accuracy": float(np.mean(m == n)),
               "cost": _cost(schedule, config, cfg, batch).to_dict()}
    A.write_json(run_dir / "eval.json", out)
    _emit(out)


def cmd_analyze(args, cfg, run_dir):
    if args.what == "flops":
        schedule = cfg.schedule()
        if _ckpt(args, run_dir).exists():
            schedule = load_checkpoint(_ckpt(args, run_dir))[1] or schedule
        config = config_by_name(args.config_id, schedule, [])
        n_t = len(S.gen_synthetic("coarse", 1, 0, cfg.task_spec())[0].prompt) + 1
        report = A.flops_report(schedule, config, n_t, cfg.n_visual(), cfg.d, cfg.d_ff)
        A.write_csv(run_dir / "flops.csv", A.flops_rows(report))
        A.write_json(run_dir / "flops.json", report.to_dict())
        _emit(report.to_dict())
        return
    params, schedule, viable, _ = _load(args, run_dir)
    config = config_by_name(args.config_id, schedule, viable)
    _, evals = datasets(cfg)
    batch = S.to_batch(evals[:64])
    if args.what == "cka":
        _, trace = forward(params, schedule, config, batch.visual, batch.tokens)
        mat = A.cka_matrix(trace)
        A.write_csv(run_dir / "cka.csv", A.cka_rows(mat))
        A.write_json(run_dir / "cka.json", {"matrix": mat})
        _emit({"matrix": np.round(mat, 4)})
    elif args.what == "shares":
        _, trace = forward(params, schedule, config, batch.visual, batch.tokens, keep_attention=True)
        n_v, n_t = trace.n_visual, batch.tokens.shape[1]
        prompt = len(evals[0].prompt)
        q0, q1 = S.QUESTION_SPAN
        segments = {"image": (0, n_v), "query": (n_v + q0, n_v + q1), "answer": (n_v + prompt - 1, n_v + n_t)}
        records = A.attention_shares(trace, segments)
        A.write_csv(run_dir / "shares.csv", A.share_rows(records))
        A.write_json(run_dir / "shares.json", {"segments": segments, "records": [r.__dict__ for r in records]})
        _emit([r.__dict__ for r in records])
    else:
        rng = np.random.default_rng(derive_seed(cfg.seed, "drop"))
        records = A.layer_drop_sensitivity(params, schedule, config, S.to_batch(evals), cfg.drop_subsets, rng)
        A.write_csv(run_dir / "drop.csv", A.drop_rows(records))
        A.write_json(run_dir / "drop.json", A.drop_rows(records))
        _emit(A.drop_rows(records)[:5])


def cmd_pack(args, cfg, run_dir):
    R_, s = args.reduction or cfg.pack_reduction, args.block or cfg.pack_block
    if args.input:
        grid = read_grid(args.input)
    else:
        h, w, c = args.size
        grid = TokenGrid(np.random.default_rng(derive_seed(cfg.seed, "pack")).normal(size=(h, w, c)))
    h, w, _ = grid.shape
    tokens = pack_tokens(grid, R_, s, None if args.projector == "none" else args.projector)
    oh, ow = resized_shape(h, w, R_, s)
    out = TokenGrid(tokens.reshape(oh // s, ow // s, -1), grid.provenance)
    path = args.out or run_dir / "packed.grid"
    write_grid(path, out)
    _emit({"input_shape": list(grid.shape), "resized": [oh, ow], "output_shape": list(out.shape),
           "tokens": int(tokens.shape[0]), "target": h * w / R_, "path": str(path)})


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "screen": cmd_screen, "route-label": cmd_route_label,
            "route-train": cmd_route_train, "eval": cmd_eval, "analyze": cmd_analyze, "pack": cmd_pack}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, run_dir = _setup(args)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        COMMANDS[args.command](args, cfg, run_dir)
    except (ValueError, RuntimeError, OSError, FloatingPointError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
