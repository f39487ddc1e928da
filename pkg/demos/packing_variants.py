"""Benchmark the two packing pipelines against unpacked visual tokens.

``average`` packs with a parameter-free mean over the s*s sub-positions;
``learned`` concatenates them (s*s*d channels) and trains a projector back to
d together with the model, starting from the mean.  Each variant trains a
small model on the coarse/fine mixture and reports accuracy, visual token
count, FLOPs per sample and wall time.

    python demos/packing_variants.py [--steps 400] [--reduction 4] [--block 2]
"""
import argparse
import time

from sparsevis import analysis as A
from sparsevis import model as M
from sparsevis import synthetic as S
from sparsevis.harness import ExperimentConfig, datasets, derive_seed


def run(cfg: ExperimentConfig, label: str):
    train, evals = datasets(cfg)
    schedule = cfg.schedule()
    params = cfg.fresh_params()
    full = M.maximal_config(schedule)
    t0 = time.time()
    M.train_fixed(params, schedule, S.to_batch(train), full, cfg.steps, derive_seed(cfg.seed, "train-steps"),
                  lr=cfg.lr, batch_size=cfg.batch_size)
    secs = time.time() - t0
    accs = {}
    for kind in ("coarse", "fine"):
        accs[kind] = M.accuracy(params, schedule, full, S.to_batch([s for s in evals if s.kind == kind]))
    n_t = len(evals[0].prompt) + 1
    flops = A.config_cost(schedule, full, n_t, cfg.n_visual(), cfg.d, cfg.d_ff)
    extra = params.arrays["pack_proj"].size if "pack_proj" in params.arrays else 0
    print(f"{label:<10}{cfg.n_visual():>8}{flops:>12}{extra:>10}{accs['coarse']:>9.3f}{accs['fine']:>9.3f}"
          f"{secs:>8.1f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--reduction", type=float, default=4.0)
    ap.add_argument("--block", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    base = dict(layers=6, d=32, heads=2, d_ff=128, train_size=2000, eval_size=400, steps=args.steps,
                seed=args.seed)
    print(f"{'variant':<10}{'N_v':>8}{'FLOPs':>12}{'params':>10}{'coarse':>9}{'fine':>9}{'secs':>8}")
    run(ExperimentConfig(**base), "unpacked")
    for proj in ("average", "learned"):
        run(ExperimentConfig(**base, pack_reduction=args.reduction, pack_block=args.block, pack_projector=proj),
            proj)


if __name__ == "__main__":
    main()
