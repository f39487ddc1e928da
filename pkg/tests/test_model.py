import numpy as np
import pytest

from sparsevis import model as M
from sparsevis import numkernel as nk
from sparsevis.model import Configuration, LayerKind, build_schedule

from conftest import random_inputs, randomize, tiny_dims


def test_build_schedule_examples():
    s = build_schedule(3, [], [])
    assert list(s.kinds) == [LayerKind.TEXT_ONLY] * 3
    s = build_schedule(24, range(0, 24, 3), range(1, 24, 3))
    assert [s.kinds.count(k) for k in LayerKind] == [8, 8, 8]
    with pytest.raises(ValueError, match="index 2 in both sets"):
        build_schedule(4, [2], [2])
    with pytest.raises(ValueError):
        build_schedule(4, [4], [])


def test_uniform_schedule_layout():
    s = M.uniform_schedule(12)
    assert s.ca_indices == (0, 3, 6, 9) and s.sa_indices == (1, 4, 7, 10)
    assert M.LayerSchedule.from_dict(s.to_dict()) == s


def test_config_must_fit_schedule(make_params, rng):
    s = build_schedule(3, [0], [1])
    p = make_params(s)
    v, t = random_inputs(rng, p.dims)
    with pytest.raises(ValueError, match="not in schedule"):
        M.forward(p, s, Configuration((2,)), v, t)


def test_dense_equivalence(make_params):
    s = build_schedule(3, [], range(3))
    for seed in range(8):
        p = make_params(s, seed)
        v, t = random_inputs(np.random.default_rng(seed), p.dims, batch=2)
        a, _ = M.forward(p, s, M.maximal_config(s), v, t)
        b = M.dense_forward(p, v, t)
        assert np.max(np.abs(a - b)) <= 1e-10


def test_frozen_visual_identity(make_params, rng):
    s = build_schedule(4, [0, 2], [])
    p = make_params(s)
    v, t = random_inputs(rng, p.dims, batch=3)
    _, tr = M.forward(p, s, Configuration(()), v, t)
    assert len(tr.visual) == 5
    assert all(x is tr.visual[0] for x in tr.visual)


def test_state_reuse_between_sa_layers(make_params, rng):
    s = build_schedule(6, [0, 2, 3, 5], [1, 4])
    p = make_params(s)
    v, t = random_inputs(rng, p.dims)
    _, tr = M.forward(p, s, M.maximal_config(s), v, t)
    # visual[l] is the state after l layers; only SA layers 1 and 4 write it
    assert tr.visual[1] is tr.visual[0]
    assert tr.visual[2] is not tr.visual[1]
    assert tr.visual[3] is tr.visual[2] and tr.visual[4] is tr.visual[2]
    assert tr.visual[5] is not tr.visual[4] and tr.visual[6] is tr.visual[5]


def test_text_only_schedule_ignores_visual(make_params, rng):
    s = build_schedule(3, [], [])
    p = make_params(s)
    v, t = random_inputs(rng, p.dims)
    a, _ = M.forward(p, s, Configuration(()), v, t)
    b, _ = M.forward(p, s, Configuration(()), (v + 1) % p.dims.n_cells, t)
    assert np.array_equal(a, b)
    c, _ = M.forward(p, s, Configuration(()), np.zeros(0, dtype=int), t)
    assert np.max(np.abs(a - c)) < 1e-12


def test_zero_init_transparency(rng):
    with_ca = build_schedule(4, [0, 2], [1])
    text_only = build_schedule(4, [], [])
    p = M.init_params(tiny_dims(layers=4), with_ca, 3)
    v, t = random_inputs(rng, p.dims)
    a, _ = M.forward(p, with_ca, Configuration(()), v, t)
    b, _ = M.forward(p, text_only, Configuration(()), v, t)
    assert np.array_equal(a, b)


def test_demoted_sa_layer_is_text_only(make_params, rng):
    s = build_schedule(3, [0], [1, 2])
    p = make_params(s)
    v, t = random_inputs(rng, p.dims)
    a, tr = M.forward(p, s, Configuration((2,)), v, t)
    b, _ = M.forward(p, build_schedule(3, [0], [2]), Configuration((2,)), v, t)
    assert np.array_equal(a, b)
    assert tr.kinds == [LayerKind.CROSS_ATTN, LayerKind.TEXT_ONLY, LayerKind.SELF_ATTN]


def test_conditional_pos_embed_examples(rng):
    v = rng.normal(size=(5, 3))
    assert np.array_equal(M.conditional_pos_embed(v, np.zeros((3, 7))).data, v)
    k = np.zeros((3, 7))
    k[:, 3] = [0.5, -2.0, 3.0]
    one = rng.normal(size=(1, 3))
    np.testing.assert_allclose(M.conditional_pos_embed(one, k).data, one * (1 + k[:, 3]), rtol=0, atol=1e-15)
    k = rng.normal(size=(3, 7))
    ref = v.copy()
    for t in range(5):
        for j in range(7):
            src = t + j - 3
            if 0 <= src < 5:
                ref[t] += k[:, j] * v[src]
    assert np.max(np.abs(M.conditional_pos_embed(v, k).data - ref)) <= 1e-12


def _rms(x, g):
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-6) * g


def test_cross_attention_block(make_params, rng):
    s = build_schedule(2, [1], [])
    fresh = M.init_params(tiny_dims(layers=2), s, 0)
    T, V = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))
    assert np.array_equal(M.cross_attention_block(fresh, 1, T, V), T)
    p = make_params(s)
    assert np.array_equal(M.cross_attention_block(p, 1, T, np.zeros((6, 8))), T)
    # composition oracle, per head
    a = p.arrays
    hq, hv = _rms(T, a["layer1.ca_norm_q"]), _rms(V, a["layer1.ca_norm_kv"])
    q, k, vv = hq @ a["layer1.ca_wq"], hv @ a["layer1.ca_wk"], hv @ a["layer1.ca_wv"]
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        sc = q[:, sl] @ k[:, sl].T / 2.0
        w = np.exp(sc - sc.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        heads.append(w @ vv[:, sl])
    ref = T + np.concatenate(heads, axis=1) @ a["layer1.ca_wo"]
    assert np.max(np.abs(M.cross_attention_block(p, 1, T, V) - ref)) <= 1e-12


def test_empty_visual_is_legal(make_params, rng):
    s = build_schedule(3, [0], [1])
    p = make_params(s)
    _, t = random_inputs(rng, p.dims)
    a, tr = M.forward(p, s, M.maximal_config(s), np.zeros(0, dtype=int), t)
    b, _ = M.forward(p, build_schedule(3, [], []), Configuration(()), np.zeros(0, dtype=int), t)
    assert np.array_equal(a, b) and tr.n_visual == 0


def test_dense_forward_examples(rng):
    s = build_schedule(1, [], [0])
    p = M.init_params(tiny_dims(layers=1), s, 0)
    for k in p.arrays:
        if k.startswith("layer0.w"):
            p.arrays[k][:] = 0
    v, t = random_inputs(rng, p.dims)
    ref = _rms(p.arrays["tok_embed"][t], p.arrays["final_norm"]) @ p.arrays["head"]
    assert np.max(np.abs(M.dense_forward(p, v, t) - ref)) <= 1e-12
    p = randomize(p, rng)
    swapped = v.copy()
    swapped[[0, 1]] = swapped[[1, 0]]
    if v[0] != v[1]:
        assert not np.array_equal(M.dense_forward(p, v, t), M.dense_forward(p, swapped, t))


def test_prefix_resume_matches_forward(make_params, rng):
    s = build_schedule(5, [0, 3], [2, 4])
    p = make_params(s)
    v, t = random_inputs(rng, p.dims, batch=2)
    for cfg in (Configuration(()), Configuration((4,)), M.maximal_config(s)):
        full, _ = M.forward(p, s, cfg, v, t)
        hv, ht = M.hidden_before(p, s, v, t, 2)
        assert np.max(np.abs(M.resume_forward(p, s, cfg, hv, ht, 2) - full)) <= 1e-12
    with pytest.raises(ValueError):
        M.hidden_before(p, s, v, t, 3)


def _batch(rng, dims, n=6, n_v=6, n_t=5):
    v, t = random_inputs(rng, dims, n_v, n_t, batch=n)
    targets = rng.integers(dims.vocab_size, size=t.shape)
    mask = np.zeros(t.shape)
    mask[:, -2:] = 1
    return M.Batch(v, t, targets, mask)


def test_prefix_match_equals_greedy_decoding(make_params, rng):
    s = build_schedule(3, [0], [1])
    p = make_params(s)
    dims = p.dims
    prompts = rng.integers(dims.vocab_size, size=(8, 4))
    visual = rng.integers(dims.n_cells, size=(8, 6))
    for i in range(8):
        gen = M.greedy_decode(p, s, M.maximal_config(s), visual[i], prompts[i], 3)
        # answers agreeing with greedy output on a prefix of length j
        for j in range(4):
            ans = list(gen)
            if j < 3:
                ans[j] = (gen[j] + 1) % dims.vocab_size
            seq = list(prompts[i]) + ans
            tokens = np.array([seq[:-1]])
            targets = np.array([seq[1:]])
            mask = np.zeros(tokens.shape)
            mask[0, 3:] = 1
            m, n, _ = M.answer_scores(p, s, M.maximal_config(s), M.Batch(visual[i:i + 1], tokens, targets, mask))
            assert m[0] == j and n[0] == 3


def test_model_gradient_check(make_params, rng):
    s = build_schedule(2, [0], [1])
    p = make_params(s, noisy=True)
    b = _batch(rng, p.dims, n=2)
    bound = M._bind(p)
    err = nk.gradient_check(lambda: M.loss_tensor(bound, p, s, M.maximal_config(s), b),
                            [bound[k] for k in sorted(bound)], max_entries=300)
    assert err <= 1e-5


def test_train_step_zero_lr_keeps_params(make_params, rng):
    s = build_schedule(2, [0], [1])
    p = make_params(s)
    before = p.copy()
    M.train_step(p, s, _batch(rng, p.dims), M.maximal_config(s), M.AdamW(lr=0.0))
    assert all(np.array_equal(before.arrays[k], p.arrays[k]) for k in p.arrays)


def test_train_step_reduces_loss_on_repeated_sample(rng):
    s = build_schedule(2, [0], [1])
    p = M.init_params(tiny_dims(layers=2), s, 0)
    b = _batch(rng, p.dims, n=1)
    opt = M.AdamW(lr=1e-2)
    losses = [M.train_step(p, s, b, M.maximal_config(s), opt)[1] for _ in range(60)]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_train_step_aborts_on_nonfinite(make_params, rng):
    s = build_schedule(2, [0], [1])
    p = make_params(s)
    p.arrays["head"][:] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        M.train_step(p, s, _batch(rng, p.dims), M.maximal_config(s), M.AdamW())


def test_universal_single_config_matches_manual_loop(rng):
    s = build_schedule(2, [0], [1])
    data = _batch(rng, tiny_dims(layers=2), n=20)
    a = M.init_params(tiny_dims(layers=2), s, 0)
    b = a.copy()
    cfg = M.maximal_config(s)
    M.train_universal(a, s, data, [cfg], 5, seed=9, batch_size=4)
    batch_rng, _ = M._streams(9)
    opt = M.AdamW()
    for _ in range(5):
        idx = batch_rng.choice(20, size=4, replace=False)
        M.train_step(b, s, data.take(np.sort(idx)), cfg, opt)
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)


def test_universal_is_deterministic_and_rejects_empty(rng):
    s = build_schedule(3, [0], [1, 2])
    data = _batch(rng, tiny_dims(layers=3), n=10)
    configs = [Configuration((), 0), Configuration((1,), 1), Configuration((1, 2), 2)]
    runs = []
    for _ in range(2):
        p = M.init_params(tiny_dims(layers=3), s, 0)
        _, losses = M.train_universal(p, s, data, configs, 6, seed=4, batch_size=4)
        runs.append((p, losses))
    assert runs[0][1] == runs[1][1]
    for c in configs:
        _, _, l = M.answer_scores(runs[0][0], s, c, data)
        assert np.all(np.isfinite(l))
    with pytest.raises(ValueError):
        M.train_universal(runs[0][0], s, data, [], 1)


def test_config_draws_are_uniform():
    draws = M.config_draws(13, 10_000, seed=0)
    freq = np.bincount(draws, minlength=13) / 10_000
    assert np.all(np.abs(freq - 1 / 13) <= 0.2 / 13)


def test_checkpoint_roundtrip(tmp_path, make_params):
    s = build_schedule(3, [0], [1, 2])
    p = make_params(s)
    p.visual_map = np.eye(6)[:3]
    configs = [Configuration((1,), 0), Configuration((1, 2), 1)]
    path = tmp_path / "m.npz"
    M.save_checkpoint(path, p, s, configs, {"note": "x"})
    q, s2, c2, extra = M.load_checkpoint(path)
    assert s2 == s and c2 == configs and extra == {"note": "x"}
    assert q.dims == p.dims and np.array_equal(q.visual_map, p.visual_map)
    assert all(np.array_equal(q.arrays[k], p.arrays[k]) for k in p.arrays)
    np.savez(tmp_path / "bad.npz", x=np.ones(2), __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        M.load_checkpoint(tmp_path / "bad.npz")
