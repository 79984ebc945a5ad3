import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mplp import numerics as nx
from mplp.numerics import ContractError
from mplp.prompts import (
    RepresentationCache,
    bilstm_states,
    build_experience_prompt,
    build_history_prompt,
    init_experience_params,
    init_history_params,
)

D = 4


def params(seed=0, d=D):
    rng = np.random.default_rng(seed)
    p = init_history_params(d, rng)
    p.update(init_experience_params(d, rng))
    # non-zero biases so their paths are exercised
    for name in ("hist.proj.b", "hist.fwd.b", "hist.bwd.b"):
        p[name].data = rng.normal(size=p[name].shape) * 0.1
    return p


def sig(x):
    return 1 / (1 + np.exp(-x))


def lstm_oracle(xs, wx, wh, b):
    h = np.zeros(wh.shape[0])
    c = np.zeros(wh.shape[0])
    out = []
    for x in xs:
        g = x @ wx + h @ wh + b
        i, f, gg, o = np.split(g, 4)
        c = sig(f) * c + sig(i) * np.tanh(gg)
        h = sig(o) * np.tanh(c)
        out.append(h)
    return out


def history_oracle(hist, same, h_t, p):
    """One row, valid entries only, written directly from the definition."""
    a = {k: v.data for k, v in p.items()}
    if len(hist) == 0:
        return h_t.copy()
    scores = np.array([np.concatenate([h, h_t]) @ a["hist.W_h"][:, 0] for h in hist])
    w = np.exp(scores - scores.max())
    w /= w.sum()
    rel = [(a["hist.W0"] if s else a["hist.W1"]) @ h for h, s in zip(hist, same)]
    fwd = lstm_oracle(rel, a["hist.fwd.Wx"], a["hist.fwd.Wh"], a["hist.fwd.b"])
    bwd = lstm_oracle(rel[::-1], a["hist.bwd.Wx"], a["hist.bwd.Wh"], a["hist.bwd.b"])[::-1]
    ctx = [np.concatenate([f, bk]) @ a["hist.proj.W"] + a["hist.proj.b"] for f, bk in zip(fwd, bwd)]
    return sum(wi * ci for wi, ci in zip(w, ctx)) + h_t


def test_history_prompt_matches_oracle_with_ragged_batch():
    rng = np.random.default_rng(1)
    p = params()
    lengths = [3, 1, 0, 2]
    steps = max(lengths)
    hist = rng.normal(size=(4, steps, D))
    mask = np.arange(steps)[None, :] < np.array(lengths)[:, None]
    same = rng.random((4, steps)) < 0.5
    h_t = rng.normal(size=(4, D))
    got = build_history_prompt(hist, same, mask, h_t, p).vector.data
    for r, n in enumerate(lengths):
        ref = history_oracle(hist[r, :n], same[r, :n], h_t[r], p)
        np.testing.assert_allclose(got[r], ref, atol=1e-12)


def test_first_utterance_gets_zero_influence():
    p = params()
    h_t = np.ones((2, D))
    out = build_history_prompt(np.zeros((2, 0, D)), np.zeros((2, 0), bool), np.zeros((2, 0), bool), h_t, p)
    np.testing.assert_array_equal(out.influence.data, 0.0)
    np.testing.assert_array_equal(out.vector.data, h_t)


def test_padding_values_do_not_leak():
    rng = np.random.default_rng(2)
    p = params()
    hist = rng.normal(size=(1, 3, D))
    mask = np.array([[True, True, False]])
    same = np.array([[True, False, True]])
    h_t = rng.normal(size=(1, D))
    a = build_history_prompt(hist, same, mask, h_t, p).vector.data
    hist[0, 2] = 1e3
    same[0, 2] = False
    b = build_history_prompt(hist, same, mask, h_t, p).vector.data
    np.testing.assert_array_equal(a, b)


def test_backward_lstm_reads_each_row_in_reverse():
    rng = np.random.default_rng(3)
    p = params()
    x = rng.normal(size=(2, 3, D))
    mask = np.array([[True, True, True], [True, True, False]])
    fwd, bwd = bilstm_states(x, mask, p)
    a = {k: v.data for k, v in p.items()}
    ref = lstm_oracle(list(x[1, :2][::-1]), a["hist.bwd.Wx"], a["hist.bwd.Wh"], a["hist.bwd.b"])[::-1]
    np.testing.assert_allclose(bwd.data[1, :2], ref, atol=1e-12)
    ref_f = lstm_oracle(list(x[0]), a["hist.fwd.Wx"], a["hist.fwd.Wh"], a["hist.fwd.b"])
    np.testing.assert_allclose(fwd.data[0], ref_f, atol=1e-12)


def test_relation_weights_are_speaker_specific():
    rng = np.random.default_rng(4)
    p = params()
    hist = rng.normal(size=(1, 2, D))
    mask = np.ones((1, 2), bool)
    h_t = rng.normal(size=(1, D))
    base = build_history_prompt(hist, np.array([[True, True]]), mask, h_t, p).vector.data
    p["hist.W1"].data = p["hist.W1"].data * 5
    # only same-speaker entries: W1 is never used
    np.testing.assert_array_equal(build_history_prompt(hist, np.array([[True, True]]), mask, h_t, p).vector.data, base)
    assert not np.allclose(build_history_prompt(hist, np.array([[True, False]]), mask, h_t, p).vector.data, base)


def test_experience_prompt_matches_oracle():
    rng = np.random.default_rng(5)
    p = params()
    sims = rng.normal(size=(3, 4, D))
    h_t = rng.normal(size=(3, D))
    out = build_experience_prompt(sims, h_t, p)
    w = p["exp.W_h"].data[:, 0]
    for r in range(3):
        s = np.array([(dj * h_t[r]) @ w for dj in sims[r]])
        a = np.exp(s - s.max())
        a /= a.sum()
        np.testing.assert_allclose(out.weights.data[r], a, atol=1e-14)
        np.testing.assert_allclose(out.vector.data[r], a @ sims[r] + h_t[r], atol=1e-12)


def test_experience_prompt_needs_samples():
    with pytest.raises(ContractError):
        build_experience_prompt(np.zeros((1, 0, D)), np.zeros((1, D)), params())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 100))
def test_experience_weights_are_a_distribution_and_order_equivariant(k, seed):
    rng = np.random.default_rng(seed)
    p = params()
    sims = rng.normal(size=(1, k, D))
    h_t = rng.normal(size=(1, D))
    out = build_experience_prompt(sims, h_t, p)
    assert out.weights.data.sum() == pytest.approx(1.0, abs=1e-12)
    perm = rng.permutation(k)
    again = build_experience_prompt(sims[:, perm], h_t, p)
    np.testing.assert_allclose(again.weights.data[0], out.weights.data[0, perm], atol=1e-14)
    np.testing.assert_allclose(again.vector.data, out.vector.data, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 100))
def test_history_weights_sum_to_one_over_valid_entries(n, seed):
    rng = np.random.default_rng(seed)
    p = params()
    hist = rng.normal(size=(1, 4, D))
    mask = np.arange(4)[None] < n
    out = build_history_prompt(hist, np.ones((1, 4), bool), mask, rng.normal(size=(1, D)), p)
    assert out.weights.data.sum() == pytest.approx(1.0, abs=1e-12)
    assert (out.weights.data[0, n:] == 0).all()


def test_prompt_gradients():
    rng = np.random.default_rng(6)
    p = params()
    hist = rng.normal(size=(2, 3, D))
    mask = np.array([[True, True, True], [True, False, False]])
    same = np.array([[True, False, True], [False, False, False]])
    sims = rng.normal(size=(2, 2, D))
    h_t = nx.Tensor(rng.normal(size=(2, D)), requires_grad=True)
    tw = rng.normal(size=(2, D))

    def loss():
        a = build_history_prompt(hist, same, mask, h_t, p).vector
        b = build_experience_prompt(sims, h_t, p).vector
        return nx.sum(nx.mul_const(nx.tanh(nx.add(a, b)), tw))

    err = nx.finite_difference_check(loss, [h_t, *p.values()], eps=1e-6, max_coords=10, rng=np.random.default_rng(0))
    assert err < 1e-5


def test_cache_round_trip_and_lookup(tmp_path):
    cache = RepresentationCache(["b", "a"], np.array([[1.0, 2.0], [3.0, 4.0]]), snapshot="abc")
    assert len(cache) == 2 and "a" in cache and cache.width == 2
    np.testing.assert_array_equal(cache.matrix(["a", "b"]), [[3, 4], [1, 2]])
    with pytest.raises(ContractError):
        cache.vector("zz")
    cache.save(tmp_path / "c.npz")
    again = RepresentationCache.load(tmp_path / "c.npz")
    assert again.snapshot == "abc"
    np.testing.assert_array_equal(again.vector("a"), [3, 4])
    assert len(cache.subset(["a"])) == 1


def test_relation_transform_examples():
    from mplp.prompts import relation_aware_transform

    rng = np.random.default_rng(7)
    p = params()
    hist = rng.normal(size=(1, 3, D))
    same = np.array([[True, False, True]])
    out = relation_aware_transform(hist, same, p).data[0]
    w0, w1 = p["hist.W0"].data, p["hist.W1"].data
    np.testing.assert_allclose(out, [w0 @ hist[0, 0], w1 @ hist[0, 1], w0 @ hist[0, 2]], atol=1e-14)
    p["hist.W0"].data, p["hist.W1"].data = np.eye(D), np.eye(D)
    np.testing.assert_array_equal(relation_aware_transform(hist, same, p).data, hist)


def test_attention_examples():
    from mplp.prompts import history_attention

    rng = np.random.default_rng(8)
    p = params()
    h_t = rng.normal(size=(1, D))
    single = history_attention(rng.normal(size=(1, 1, D)), h_t, p["hist.W_h"], np.ones((1, 1), bool)).data
    assert single.tolist() == [[1.0]]
    same = np.repeat(rng.normal(size=(1, 1, D)), 3, axis=1)
    np.testing.assert_allclose(history_attention(same, h_t, p["hist.W_h"], np.ones((1, 3), bool)).data, [[1 / 3] * 3],
                               atol=1e-15)


def test_length_one_recurrence_sees_only_that_element():
    from mplp.prompts import contextualize

    rng = np.random.default_rng(9)
    p = params()
    x = rng.normal(size=(2, 3, D))
    mask = np.array([[True, False, False], [True, True, True]])
    alone = contextualize(x[:1, :1], np.ones((1, 1), bool), p).data[0, 0]
    np.testing.assert_allclose(contextualize(x, mask, p).data[0, 0], alone, atol=1e-14)


def test_identical_neighbours_give_that_vector():
    rng = np.random.default_rng(10)
    d = rng.normal(size=D)
    out = build_experience_prompt(np.tile(d, (1, 4, 1)), rng.normal(size=(1, D)), params())
    np.testing.assert_allclose(out.influence.data[0], d, atol=1e-14)
