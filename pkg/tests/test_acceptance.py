"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
without ``-s``.  Criteria 6, 7, 8 and 10 train small models and take several
minutes together.
"""
import itertools
import time

import numpy as np
import pytest

from sparsevis import analysis as A
from sparsevis import configspace as C
from sparsevis import model as M
from sparsevis import numkernel as nk
from sparsevis import packing as P
from sparsevis import router as R
from sparsevis import synthetic as S
from conftest import random_inputs, randomize, tiny_dims


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


def _noisy(schedule, seed, **kw):
    dims = tiny_dims(layers=schedule.total_layers, **kw)
    return randomize(M.init_params(dims, schedule, seed), np.random.default_rng(seed + 1))


# --------------------------------------------------------------------------


def test_c01_dense_equivalence(report):
    t0 = time.time()
    worst = 0.0
    for seed in range(64):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(1, 5))
        s = M.build_schedule(L, [], range(L))
        p = _noisy(s, seed)
        v, t = random_inputs(rng, p.dims, n_v=int(rng.integers(1, 10)), n_t=int(rng.integers(1, 8)), batch=2)
        a, _ = M.forward(p, s, M.maximal_config(s), v, t)
        worst = max(worst, float(np.max(np.abs(a - M.dense_forward(p, v, t)))))
    dt = time.time() - t0
    ok = worst <= 1e-10 and dt < 60
    assert report(1, ok, f"max |logit diff| {worst:.2e} over 64 seeds (<= 1e-10), {dt:.1f}s")


def test_c02_frozen_visual(report):
    bad = 0
    for seed in range(32):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(1, 6))
        ca = sorted(rng.choice(L, size=int(rng.integers(0, L + 1)), replace=False).tolist())
        s = M.build_schedule(L, ca, [])
        p = _noisy(s, seed)
        v, t = random_inputs(rng, p.dims, batch=2)
        _, tr = M.forward(p, s, M.Configuration(()), v, t)
        v0 = np.array(tr.visual[0])
        bad += sum(not np.array_equal(np.array(x), v0) for x in tr.visual)
    assert report(2, bad == 0, f"{bad} layer states differ from V^(0) over 32 seeds")


def test_c03_gradient_fidelity(report):
    s = M.build_schedule(3, [0], [1])
    p = _noisy(s, 0)
    rng = np.random.default_rng(0)
    v, t = random_inputs(rng, p.dims, n_v=5, n_t=4, batch=2)
    mask = np.zeros(t.shape)
    mask[:, 1:] = 1
    b = M.Batch(v, t, rng.integers(p.dims.vocab_size, size=t.shape), mask)
    bound = M._bind(p)
    err = nk.gradient_check(lambda: M.loss_tensor(bound, p, s, M.maximal_config(s), b),
                            [bound[k] for k in sorted(bound)])
    n = sum(x.size for x in p.arrays.values())
    assert report(3, err <= 1e-5, f"max relative error {err:.2e} over all {n} parameters (<= 1e-5)")


def test_c04_flops_oracle(report):
    combos = []
    schedules = [M.build_schedule(4, [], range(4)), M.build_schedule(4, range(4), []),
                 M.build_schedule(4, [0, 2], [1, 3]), M.build_schedule(5, [0], [2, 4])]
    for s, (n_t, n_v), (d, h) in itertools.product(schedules, [(3, 0), (5, 7), (2, 12)], [(8, 2), (12, 3)]):
        combos.append((s, n_t, n_v, d, h))
    mismatches = 0
    for i, (s, n_t, n_v, d, h) in enumerate(combos):
        p = _noisy(s, i, d=d, heads=h, d_ff=2 * d)
        rng = np.random.default_rng(i)
        v, t = random_inputs(rng, p.dims, n_v=n_v, n_t=n_t)
        for cfg in (M.maximal_config(s), M.Configuration(s.sa_indices[:1])):
            with nk.count_macs() as c:
                M.forward(p, s, cfg, v, t)
            mismatches += 2 * c.macs != A.flops_report(s, cfg, n_t, n_v, d, 2 * d).total
    all_sa = A.flops_report(schedules[0], M.maximal_config(schedules[0]), 5, 7, 8, 16).savings
    s = M.uniform_schedule(12)
    sav = [A.flops_report(s, M.Configuration(s.sa_indices[:k]), 5, 64, 64, 256).savings
           for k in range(len(s.sa_indices) + 1)]
    decreasing = all(a > b for a, b in zip(sav, sav[1:]))
    ok = mismatches == 0 and len(combos) >= 20 and all_sa == 1.0 and decreasing
    assert report(4, ok, f"{mismatches} mismatches on {len(combos)} combos x 2 configs; all-SA savings "
                         f"{all_sa}; savings {sav[0]:.2f} -> {sav[-1]:.2f} strictly decreasing={decreasing}")


def _hsic(k, l):
    n = k.shape[0]
    h = np.eye(n) - 1.0 / n
    return np.trace(k @ h @ l @ h)


def test_c05_cka_suite(report):
    rng = np.random.default_rng(5)
    ident = inv = oracle = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 40))
        x, y = rng.normal(size=(n, int(rng.integers(2, 10)))), rng.normal(size=(n, int(rng.integers(2, 10))))
        q, _ = np.linalg.qr(rng.normal(size=(x.shape[1],) * 2))
        ident = max(ident, abs(A.cka(x, x) - 1))
        inv = max(inv, abs(A.cka(x, y) - A.cka(rng.uniform(0.1, 10) * x @ q, y)))
        k, l = x @ x.T, y @ y.T
        oracle = max(oracle, abs(A.cka(x, y) - _hsic(k, l) / np.sqrt(_hsic(k, k) * _hsic(l, l))))
    s = M.build_schedule(4, [0, 2], [])
    p = _noisy(s, 0)
    v, t = random_inputs(rng, p.dims, n_v=9, batch=2)
    _, tr = M.forward(p, s, M.Configuration(()), v, t)
    ones = float(np.max(np.abs(A.cka_matrix(tr) - 1)))
    ok = ident <= 1e-12 and inv <= 1e-10 and oracle <= 1e-12 and ones <= 1e-12
    assert report(5, ok, f"identity {ident:.1e}, invariance {inv:.1e}, oracle {oracle:.1e} on 100 pairs, "
                         f"CA-only matrix max |1 - cka| {ones:.1e}")


# --------------------------------------------------------------------------
# trained models


SPEC = S.TaskSpec()
DIMS = M.ModelDims(SPEC.vocab_size, SPEC.n_cells, d=32, heads=2, layers=6, d_ff=128, rope_base=100.0)
SCHEDULE = M.uniform_schedule(6)  # CA at 0, 3; SA at 1, 4


def _subsets(samples):
    k = S.kinds(samples)
    return {n: S.to_batch([s for s, kk in zip(samples, k) if kk == n]) for n in ("coarse", "fine")}


@pytest.fixture(scope="module")
def data():
    train = S.gen_synthetic("mixture", 4000, 1, SPEC)
    evals = S.gen_synthetic("mixture", 600, 2, SPEC)
    return train, evals


def test_c06_cross_attention_alone_insufficient(report, data):
    t0 = time.time()
    train, evals = data
    batch, subs = S.to_batch(train), _subsets(evals)
    acc = {"ca": [], "sa": []}
    for seed in range(5):
        for which in acc:
            s = SCHEDULE if which == "sa" else M.build_schedule(6, SCHEDULE.ca_indices, [])
            p = M.init_params(DIMS, s, seed)
            cfg = M.maximal_config(s)
            M.train_fixed(p, s, batch, cfg, 800, seed, lr=3e-3)
            acc[which].append({k: M.accuracy(p, s, cfg, b) for k, b in subs.items()})
    mean = {w: {k: float(np.mean([a[k] for a in acc[w]])) for k in subs} for w in acc}
    fine_gap = 100 * (mean["sa"]["fine"] - mean["ca"]["fine"])
    coarse_gap = 100 * abs(mean["sa"]["coarse"] - mean["ca"]["coarse"])
    dt = time.time() - t0
    ok = fine_gap >= 10 and coarse_gap <= 3 and dt <= 1800
    assert report(6, ok, f"fine: CA-only {mean['ca']['fine']:.3f} vs CA+SA {mean['sa']['fine']:.3f} "
                         f"(gap {fine_gap:.1f} pts >= 10); coarse: {mean['ca']['coarse']:.3f} vs "
                         f"{mean['sa']['coarse']:.3f} (gap {coarse_gap:.1f} pts <= 3); 5 seeds, {dt:.0f}s")


@pytest.fixture(scope="module")
def universal(data):
    """Pretrain maximal, screen, fine-tune universally, label and train the router."""
    train, evals = data
    batch = S.to_batch(train)
    p = M.init_params(DIMS, SCHEDULE, 0)
    M.train_fixed(p, SCHEDULE, batch, M.maximal_config(SCHEDULE), 800, 0, lr=3e-3)
    rep = C.screen_viability(p, SCHEDULE, _subsets(evals), C.enumerate_configurations(SCHEDULE.sa_indices))
    viable = rep.viable_configs()
    M.train_universal(p, SCHEDULE, batch, viable, 800, 1, lr=1e-3)
    labels = R.generate_pseudo_labels(p, SCHEDULE, _subsets(train), viable)
    by_subset = {l.subset: l.config_id for l in labels}
    router = R.train_router(p, SCHEDULE, batch, [by_subset[k] for k in S.kinds(train)], viable, 200)
    return p, viable, labels, router


def _table_oracle(rows, ref):
    passing = [r for r in rows if r[1] >= 0.99 * ref]
    if passing:
        return min(passing, key=lambda r: (r[2], r[3], r[0]))[0], False
    top = max(r[2] for r in rows)
    return min(r[0] for r in rows if r[2] == top), True


def test_c07_router_efficacy(report, data, universal):
    p, viable, labels, router = universal
    _, evals = data
    batch = S.to_batch(evals)
    decisions, m, n, _ = R.routed_scores(p, SCHEDULE, viable, batch)
    routed_acc = float(np.mean(m == n))
    full = M.maximal_config(SCHEDULE)
    full_acc = M.accuracy(p, SCHEDULE, full, batch)
    n_t, n_v = batch.tokens.shape[1], batch.visual.shape[1]
    by_id = {c.id: c for c in viable}
    routed_flops = float(np.mean([A.config_cost(SCHEDULE, by_id[d.final], n_t, n_v, DIMS.d, DIMS.d_ff)
                                  for d in decisions]))
    full_flops = A.config_cost(SCHEDULE, full, n_t, n_v, DIMS.d, DIMS.d_ff)

    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        ids = rng.permutation(20)[:k].tolist()
        rows = [(ids[i], float(rng.choice([0.5, 0.8, 0.9, 0.95, 0.99, 1.0])), int(rng.integers(0, 5)),
                 float(rng.choice([0.1, 0.2, 0.3]))) for i in range(k)]
        ref = float(rng.choice([0.8, 0.9, 1.0]))
        i, fb = R.select_pseudo_label([r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows],
                                      [r[0] for r in rows], ref)
        mismatches += (rows[i][0], fb) != _table_oracle(rows, ref)
    ok = routed_acc >= 0.99 * full_acc and routed_flops < full_flops and mismatches == 0
    chosen = {l.subset: l.config_id for l in labels}
    assert report(7, ok, f"routed acc {routed_acc:.3f} vs maximal {full_acc:.3f} (>= 0.99x); mean FLOPs "
                         f"{routed_flops:.0f} < {full_flops}; labels {chosen}, router holdout "
                         f"{router.holdout_accuracy:.3f}; {mismatches}/1000 selector mismatches")


def test_c08_oracle_dominance(report, data, universal):
    p, viable, _, _ = universal
    _, evals = data
    batch = S.to_batch(evals)
    chosen, scores, n = A.oracle_select(p, SCHEDULE, batch, viable)
    index = {c.id: k for k, c in enumerate(viable)}
    oracle_acc = float(np.mean([scores[i, index[c.id]] == n[i] for i, c in enumerate(chosen)]))
    fixed = [float(np.mean(scores[:, k] == n)) for k in range(len(viable))]
    rule_bad = 0
    for row, c in zip(scores, chosen):
        best = row.max()
        cands = [viable[k] for k in range(len(viable)) if row[k] == best]
        expect = min(cands, key=lambda x: (x.n_layers, x.id))
        rule_bad += c != expect
    ok = all(oracle_acc >= f for f in fixed) and rule_bad == 0
    assert report(8, ok, f"oracle acc {oracle_acc:.3f} vs fixed {[round(f, 3) for f in fixed]}; "
                         f"{rule_bad} rule violations over {len(chosen)} samples")


def test_c09_packing_law(report):
    worst = 0.0
    for size, r in itertools.product([16, 27, 32], [2, 4]):
        n = P.packed_count(size, size, r, 2)
        worst = max(worst, abs(n - size * size / r) / (size * size / r))
    rng = np.random.default_rng(9)
    const_ok = all(np.all(P.pack_tokens(P.TokenGrid(np.full((h, h, 3), c)), r, 2, "average") == c)
                   for h, r, c in itertools.product([16, 27, 32], [2, 4], [0.1, -3.7]))
    x = rng.normal(size=(12, 18, 5))
    inv_ok = np.array_equal(P.depth_to_space(P.space_to_depth(x, 2), 2), x) and \
        np.array_equal(P.depth_to_space(P.space_to_depth(x, 3), 3), x)
    n27 = P.packed_count(27, 27, 2, 2)
    ok = worst <= 0.05 and const_ok and inv_ok and abs(n27 - 361) / 361 <= 0.05
    assert report(9, ok, f"max count deviation {100 * worst:.2f}% (<= 5%); 27x27 R=2 -> {n27} tokens; "
                         f"constants exact={const_ok}; depth_to_space inverse exact={inv_ok}")


def test_c10_universal_sanity(report, data, universal):
    p, viable, _, _ = universal
    _, evals = data
    coarse = [s for s in evals if s.kind == "coarse"]
    base = S.majority_baseline(coarse)
    cb = S.to_batch(coarse)
    accs = {c.id: M.accuracy(p, SCHEDULE, c, cb) for c in viable}
    draws = M.config_draws(len(viable), 10000, 1)
    freq = np.bincount(draws, minlength=len(viable)) / 10000
    uniform = 1 / len(viable)
    spread = float(np.max(np.abs(freq - uniform)) / uniform)
    ok = all(a >= base + 0.20 for a in accs.values()) and spread <= 0.20
    assert report(10, ok, f"coarse acc per viable config {{{', '.join(f'{k}: {v:.3f}' for k, v in accs.items())}}}"
                          f" vs majority {base:.3f} (+20 pts); sampler max deviation {100 * spread:.1f}% "
                          f"(<= 20%) over 10000 draws")
