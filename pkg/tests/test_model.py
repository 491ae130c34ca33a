import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgsum import autodiff as ad
from pgsum import corpus as C
from pgsum import model as M
from pgsum.autodiff import Tensor

from oracles import scatter_oracle
from toys import toy_batch, toy_params


def T64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def test_init_follows_the_recipe():
    p = M.ModelParams.init(M.ModelConfig(20, 8, 6), seed=1)
    assert np.abs(p["embedding"]).max() <= 0.02
    for name in ("attn_w_c", "dec_b", "out_b2", "gen_b"):
        assert not p[name].any()
    assert p["embedding"].dtype == np.float32
    assert M.ModelParams.init(M.ModelConfig(20, 8, 6), seed=1)["dec_W"].tobytes() == p["dec_W"].tobytes()


def test_params_validation():
    p = M.ModelParams.init(M.ModelConfig(20, 8, 6))
    bad = dict(p.arrays)
    bad["dec_W"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="dec_W"):
        M.ModelParams(p.config, bad)
    bad = dict(p.arrays)
    bad.pop("gen_b")
    with pytest.raises(ValueError, match="gen_b"):
        M.ModelParams(p.config, bad)


def test_embed_maps_extended_ids_to_unk():
    E = T64(np.arange(20.0).reshape(10, 2))
    out = M.embed(np.array([[0, 12, 5, 5]]), E).data[0]
    np.testing.assert_array_equal(out[0], E.data[0])
    np.testing.assert_array_equal(out[1], E.data[C.UNK])
    np.testing.assert_array_equal(out[2], out[3])


def test_encode_shapes_and_zero_weights():
    p = toy_params(0)
    enc = M.encode(p.tensors(), np.array([[5]]), np.ones((1, 1)))
    assert enc.h.shape == (1, 1, 8)
    zero = M.ModelParams(p.config, {k: np.zeros_like(v) for k, v in p.arrays.items()})
    enc = M.encode(zero.tensors(), np.array([[5, 6, 7]]), np.ones((1, 3)))
    assert not enc.h.data.any()    # c = f*0 + i*tanh(0) = 0, so h = o*tanh(0) = 0


def test_encoder_swap_and_flip():
    p = toy_params(3)
    swapped = dict(p.arrays)
    swapped["enc_fw_W"], swapped["enc_bw_W"] = p["enc_bw_W"], p["enc_fw_W"]
    swapped["enc_fw_b"], swapped["enc_bw_b"] = p["enc_bw_b"], p["enc_fw_b"]
    q = M.ModelParams(p.config, swapped)
    ids = np.array([[4, 7, 5, 9]])
    h1 = M.encode(p.tensors(), ids, np.ones((1, 4))).h.data[0]
    h2 = M.encode(q.tensors(), ids[:, ::-1], np.ones((1, 4))).h.data[0][::-1]
    np.testing.assert_allclose(h1, np.concatenate([h2[:, 4:], h2[:, :4]], axis=1), atol=1e-12)


def test_padding_does_not_change_encoder_states():
    p = toy_params(4)
    short = M.encode(p.tensors(), np.array([[4, 5]]), np.ones((1, 2)))
    padded = M.encode(p.tensors(), np.array([[4, 5, 0, 0]]), np.array([[1, 1, 0, 0]]))
    np.testing.assert_allclose(padded.h.data[0, :2], short.h.data[0], atol=1e-12)
    np.testing.assert_allclose(padded.init_state[0].data, short.init_state[0].data, atol=1e-12)


def test_encode_rejects_fully_masked():
    with pytest.raises(ValueError):
        M.encode(toy_params(0).tensors(), np.array([[4]]), np.zeros((1, 1)))


def test_attention_uniform_when_scores_equal():
    p = toy_params(0)
    P = p.tensors()
    P["attn_v"] = T64(np.zeros(8))
    a = M.attention(P, T64(np.random.default_rng(0).normal(size=(1, 4, 8))), T64(np.ones((1, 4))),
                    None, np.array([[1, 1, 1, 0]]), False)
    np.testing.assert_allclose(a.data[0], [1 / 3, 1 / 3, 1 / 3, 0], atol=1e-12)


def test_coverage_off_equals_zero_wc():
    p = toy_params(1)
    P = p.tensors()
    P["attn_w_c"] = T64(np.zeros(8))
    rng = np.random.default_rng(1)
    feats, s, cov = T64(rng.normal(size=(2, 3, 8))), T64(rng.normal(size=(2, 4))), T64(rng.uniform(size=(2, 3)))
    mask = np.ones((2, 3))
    np.testing.assert_array_equal(M.attention(P, feats, s, cov, mask, True).data,
                                  M.attention(P, feats, s, cov, mask, False).data)


def test_context_is_convex_combination():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(1, 4, 3))
    one_hot = np.array([[0.0, 0.0, 1.0, 0.0]])
    np.testing.assert_allclose(M.context(T64(one_hot), T64(h)).data[0], h[0, 2])
    a = rng.dirichlet(np.ones(4))[None]
    hs = M.context(T64(a), T64(h)).data[0]
    assert np.linalg.norm(hs) <= np.linalg.norm(h[0], axis=1).max() + 1e-12


def test_vocab_dist_bias_only():
    p = toy_params(0)
    P = {k: T64(np.zeros_like(v)) for k, v in p.arrays.items()}
    P["out_b2"] = T64(np.arange(10.0))
    out = M.vocab_dist(P, T64(np.ones((1, 4))), T64(np.ones((1, 8)))).data[0]
    np.testing.assert_allclose(out, np.exp(np.arange(10.0)) / np.exp(np.arange(10.0)).sum())


def test_gen_prob_zero_clamp_and_gradient():
    P = {k: T64(np.zeros_like(v)) for k, v in toy_params(0).arrays.items()}
    args = (T64(np.ones((1, 8))), T64(np.ones((1, 4))), T64(np.ones((1, 4))))
    assert M.gen_prob(P, *args).item() == 0.5
    P["gen_b"] = T64([1e6])
    assert M.gen_prob(P, *args).item() == 1 - M.P_GEN_FLOOR
    P["gen_b"] = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    ad.backward(ad.sum(M.gen_prob(P, *args)))
    assert P["gen_b"].grad[0] == pytest.approx(0.25)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_final_dist_matches_scatter_oracle(seed):
    rng = np.random.default_rng(seed)
    V, n, n_oov = 7, int(rng.integers(1, 9)), int(rng.integers(0, 3))
    src = rng.integers(0, V + n_oov, size=n) if n_oov else rng.integers(0, V, size=n)
    pg, pv, a = rng.uniform(), rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(n))
    got = M.final_dist(T64([[pg]]), T64([pv]), T64([a]), src[None], n_oov).data[0]
    np.testing.assert_allclose(got, scatter_oracle(pg, pv, a, list(src), n_oov), atol=1e-12)
    assert abs(got.sum() - 1) < 1e-9


def test_final_dist_limits():
    pv = np.array([0.2, 0.3, 0.5])
    a = np.array([0.0, 1.0])
    out = M.final_dist(T64([[1.0]]), T64([pv]), T64([a]), np.array([[0, 4]]), 2).data[0]
    np.testing.assert_allclose(out, [0.2, 0.3, 0.5, 0, 0])
    out = M.final_dist(T64([[0.0]]), T64([pv]), T64([a]), np.array([[0, 3 + 2]]), 3).data[0]
    np.testing.assert_allclose(out, np.eye(6)[5])


def test_step_loss_cases():
    pf = T64([[0.0, 1.0, 0.0]])
    a, zero = T64([[0.5, 0.5]]), T64([[0.0, 0.0]])
    assert M.step_loss(pf, np.array([1]), a, zero, 1.0, True).item() == 0.0
    cov = T64([[1.0, 1.0]])
    assert M.step_loss(pf, np.array([1]), a, cov, 1.0, True).item() == pytest.approx(1.0)
    assert M.step_loss(pf, np.array([1]), a, cov, 1.0, False).item() == 0.0
    assert M.step_loss(pf, np.array([0]), a, zero, 1.0, False).item() == pytest.approx(-np.log(1e-12))


def _teacher_forced_steps(p, batch, lam, use_cov):
    P = p.tensors()
    with ad.no_grad():
        total, steps = M.sequence_loss(P, batch, lam, use_cov, return_steps=True)
    return total.item(), np.stack([s.data for s in steps], axis=1)


def test_sequence_loss_is_mean_of_step_losses():
    p, batch = toy_params(5), toy_batch(5, B=3)
    total, steps = _teacher_forced_steps(p, batch, 1.0, True)
    mask = batch.summary_mask
    expected = np.mean((steps * mask).sum(axis=1) / mask.sum(axis=1))
    assert total == pytest.approx(expected, rel=1e-12)


def test_sequence_loss_single_step_equals_step_loss():
    p = toy_params(6)
    ex = C.encode_example(["w4", "w5"], [], C.Vocabulary(C.RESERVED + tuple(f"w{i}" for i in range(4, 10))))
    batch = C.make_batch([ex])
    P = p.tensors()
    enc = M.encode(P, batch.article_ids, batch.article_mask, batch.article_extended_ids)
    cov = M.initial_coverage(batch.article_mask)
    out = M.decoder_step(P, enc.init_state, batch.summary_input_ids[:, 0], enc, cov, True, 0)
    direct = M.step_loss(out.p_final, batch.summary_target_ids[:, 0], out.attention, cov, 1.0, True).item()
    assert M.sequence_loss(P, batch, 1.0, True).item() == pytest.approx(direct, rel=1e-12)


def test_sequence_loss_duplication_and_padding_invariance():
    p, batch = toy_params(7), toy_batch(7, B=2)
    P = p.tensors()
    base = M.sequence_loss(P, batch, 1.0, True).item()
    doubled = C.make_batch(batch.examples * 2)
    assert M.sequence_loss(P, doubled, 1.0, True).item() == pytest.approx(base, rel=1e-12)
    alone = [M.sequence_loss(P, C.make_batch([e]), 1.0, True).item() for e in batch.examples]
    assert base == pytest.approx(np.mean(alone), rel=1e-9)


def test_coverage_is_running_sum_and_loss_bounded():
    p, batch = toy_params(8), toy_batch(8, B=2, n=5, T=6)
    P = p.tensors()
    enc = M.encode(P, batch.article_ids, batch.article_mask, batch.article_extended_ids)
    state, cov = enc.init_state, M.initial_coverage(batch.article_mask)
    running = np.zeros(batch.article_mask.shape)
    for t in range(batch.summary_input_ids.shape[1]):
        out = M.decoder_step(P, state, batch.summary_input_ids[:, t], enc, cov, True, batch.max_oov)
        np.testing.assert_array_equal(out.coverage.data, running)
        closs = M.coverage_loss(out.attention, out.coverage).data
        assert ((closs >= 0) & (closs <= 1 + 1e-12)).all()
        if t == 0:
            assert not closs.any()
        running = running + out.attention.data
        state, cov = out.state, out.next_coverage


def test_coverage_enabled_with_zero_wc_and_lambda_matches_plain_model():
    p, batch = toy_params(9), toy_batch(9, B=2)
    arrays = dict(p.arrays)
    arrays["attn_w_c"] = np.zeros_like(arrays["attn_w_c"])
    P = M.ModelParams(p.config, arrays).tensors()
    assert M.sequence_loss(P, batch, 0.0, True).item() == M.sequence_loss(P, batch, 1.0, False).item()


def test_decoder_step_is_pure():
    p, batch = toy_params(10), toy_batch(10)
    P = p.tensors()
    enc = M.encode(P, batch.article_ids, batch.article_mask, batch.article_extended_ids)
    cov = M.initial_coverage(batch.article_mask)
    a = M.decoder_step(P, enc.init_state, batch.summary_input_ids[:, 0], enc, cov, True, batch.max_oov)
    b = M.decoder_step(P, enc.init_state, batch.summary_input_ids[:, 0], enc, cov, True, batch.max_oov)
    assert a.p_final.data.tobytes() == b.p_final.data.tobytes()


def test_sequence_loss_gradient_matches_finite_differences():
    p, batch = toy_params(11), toy_batch(11)
    names = sorted(p.arrays)

    def f(*tensors):
        return M.sequence_loss(dict(zip(names, tensors)), batch, 1.0, True)

    assert ad.grad_check(f, [p[k] for k in names]) < 1e-4
