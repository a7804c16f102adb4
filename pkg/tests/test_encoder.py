import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_gmm import diffable as D
from fewshot_gmm.encoder import (KIND_MU, KIND_PAD, KIND_SAMPLE, KIND_SIGMA, EncoderConfig,
                                 ShiftVector, apply_shift, encode, encode_graph, init_model,
                                 param_count, read_checkpoint, shift_arrays, stack_tokens,
                                 tokenize, write_checkpoint)
from fewshot_gmm.errors import FormatError
from fewshot_gmm.gmm import SphericalGmm, nll

TINY = EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, T=4, J=2, n_max=4)


def _theta(rng, J, T):
    return SphericalGmm(rng.random((J, T)), 0.2 + rng.random((J, T)))


def _live_heads(model, rng, scale=0.1):
    # heads start at zero; give them values so outputs depend on the input
    for name in ("head_mu.w", "head_mu.b", "head_sigma.w", "head_sigma.b"):
        p = model.params[name]
        p.data = (scale * rng.normal(size=p.shape)).astype(p.dtype)
    return model


def _episode(rng, cfg, n):
    shots = rng.random((n, cfg.T))
    days = rng.integers(1, 367, size=n)
    return shots, days, _theta(rng, cfg.J, cfg.T)


def test_tokenize_layout_full_and_single():
    cfg = EncoderConfig()
    rng = np.random.default_rng(0)
    shots, days, th = _episode(rng, cfg, cfg.n_max)
    tok = tokenize(shots, th, cfg, days=days)
    assert tok.values.shape == (cfg.n_max + 2 * cfg.J, cfg.T)
    assert not np.any(tok.kind == KIND_PAD)
    shots, days, th = _episode(rng, cfg, 1)
    tok = tokenize(shots, th, cfg, days=days)
    assert tok.seq_len == cfg.n_max + 12
    assert (tok.kind == KIND_SAMPLE).sum() == 1
    assert (tok.kind == KIND_PAD).sum() == cfg.n_max - 1
    assert (tok.kind == KIND_MU).sum() == 6 and (tok.kind == KIND_SIGMA).sum() == 6
    np.testing.assert_array_equal(tok.values[cfg.n_max:cfg.n_max + 6], th.means)
    np.testing.assert_array_equal(tok.values[cfg.n_max + 6:], th.sigmas)
    assert tok.attn_mask.sum() == 13


def test_tokenize_rejects_bad_input():
    cfg = TINY
    rng = np.random.default_rng(1)
    shots, days, th = _episode(rng, cfg, cfg.n_max + 1)
    with pytest.raises(ValueError):
        tokenize(shots, th, cfg, days=days)
    with pytest.raises(ValueError):
        tokenize(np.zeros((0, cfg.T)), th, cfg, days=np.zeros(0, int))
    with pytest.raises(ValueError):
        tokenize(shots[:2], _theta(rng, cfg.J + 1, cfg.T), cfg, days=days[:2])


def test_param_count_matches_arrays():
    for cfg in (EncoderConfig(), TINY, EncoderConfig(n_layers=0, J=3, T=48)):
        model = init_model(cfg, 0)
        assert sum(p.data.size for p in model.parameters()) == param_count(cfg)
    assert param_count(EncoderConfig()) == 131248


def test_init_deterministic_and_zero_heads():
    a, b = init_model(TINY, 3), init_model(TINY, 3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    rng = np.random.default_rng(2)
    shots, days, th = _episode(rng, TINY, 3)
    er = encode(a, tokenize(shots, th, TINY, days=days))
    assert np.all(er.d_mu == 0) and np.all(er.d_sigma == 0)
    est = apply_shift(th, er, TINY)
    np.testing.assert_array_equal(est.means, th.means)
    np.testing.assert_array_equal(est.sigmas, th.sigmas)


def test_apply_shift_examples():
    th = SphericalGmm(np.zeros((1, 2)), np.array([[0.01, 0.5]]))
    cfg = EncoderConfig(T=2, J=1)
    out = apply_shift(th, ShiftVector(np.ones((1, 2)), np.array([[-0.05, 0.1]])), cfg)
    np.testing.assert_allclose(out.sigmas, [[1e-3, 0.6]])
    np.testing.assert_array_equal(out.means, np.ones((1, 2)))
    np.testing.assert_array_equal(out.weights, th.weights)
    log_cfg = EncoderConfig(T=2, J=1, sigma_shift_space="log_additive")
    out = apply_shift(th, ShiftVector(np.zeros((1, 2)), np.full((1, 2), np.log(2.0))), log_cfg)
    np.testing.assert_allclose(out.sigmas, 2 * th.sigmas, rtol=1e-12)
    with pytest.raises(ValueError):
        apply_shift(th, ShiftVector(np.zeros((2, 2)), np.zeros((2, 2))), cfg)


def test_shift_arrays_matches_apply_shift():
    rng = np.random.default_rng(4)
    for space in ("additive_floored", "log_additive"):
        cfg = EncoderConfig(T=3, J=2, sigma_shift_space=space)
        th = _theta(rng, 2, 3)
        dm, ds = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        mu, sg = shift_arrays(th.means[None], th.sigmas[None], D.Array(dm[None]), D.Array(ds[None]), cfg)
        ref = apply_shift(th, ShiftVector(dm, ds), cfg)
        np.testing.assert_allclose(mu.data[0], ref.means, rtol=1e-14)
        np.testing.assert_allclose(sg.data[0], ref.sigmas, rtol=1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 25))
def test_permutation_and_pad_invariance(seed, n):
    cfg = EncoderConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64)
    rng = np.random.default_rng(seed)
    model = _live_heads(init_model(cfg, seed % 7), rng)
    shots, days, th = _episode(rng, cfg, n)
    base = encode(model, tokenize(shots, th, cfg, days=days))
    perm = rng.permutation(n)
    permuted = encode(model, tokenize(shots[perm], th, cfg, days=days[perm]))
    assert np.abs(permuted.d_mu - base.d_mu).max() < 1e-5
    assert np.abs(permuted.d_sigma - base.d_sigma).max() < 1e-5
    tok = tokenize(shots, th, cfg, days=days)
    pads = tok.kind == KIND_PAD
    tok.values[pads] = rng.normal(size=(pads.sum(), cfg.T)) * 100
    tok.date_ids[pads] = rng.integers(1, 367, size=pads.sum())
    junk = encode(model, tok)
    np.testing.assert_array_equal(junk.d_mu, base.d_mu)
    np.testing.assert_array_equal(junk.d_sigma, base.d_sigma)


def test_extra_pad_slot_changes_nothing():
    rng = np.random.default_rng(6)
    cfg = EncoderConfig(d_model=32, n_heads=4, d_ff=64, n_max=8)
    wide = EncoderConfig(d_model=32, n_heads=4, d_ff=64, n_max=9)
    model = _live_heads(init_model(cfg, 1, dtype=np.float64), rng)
    from fewshot_gmm.encoder import EncoderModel
    wide_model = EncoderModel(wide, model.params)
    shots, days, th = _episode(rng, cfg, 5)
    a = encode(model, tokenize(shots, th, cfg, days=days))
    b = encode(wide_model, tokenize(shots, th, wide, days=days))
    np.testing.assert_allclose(a.d_mu, b.d_mu, atol=1e-12)
    np.testing.assert_allclose(a.d_sigma, b.d_sigma, atol=1e-12)


def test_batched_equals_single():
    rng = np.random.default_rng(8)
    cfg = TINY
    model = _live_heads(init_model(cfg, 0, dtype=np.float64), rng)
    toks = [tokenize(*_episode(rng, cfg, n)[:1], _theta(rng, cfg.J, cfg.T), cfg,
                     days=rng.integers(1, 367, n)) for n in (1, 2, 4)]
    batch = encode(model, stack_tokens(toks))
    for b, t in enumerate(toks):
        single = encode(model, t)
        np.testing.assert_allclose(batch.d_mu[b], single.d_mu, atol=1e-13)
        np.testing.assert_allclose(batch.d_sigma[b], single.d_sigma, atol=1e-13)


def test_forward_deterministic():
    rng = np.random.default_rng(9)
    model = _live_heads(init_model(EncoderConfig(), 0), rng)
    shots, days, th = _episode(rng, EncoderConfig(), 7)
    t = tokenize(shots, th, EncoderConfig(), days=days)
    a, b = encode(model, t), encode(model, t)
    assert a.d_mu.tobytes() == b.d_mu.tobytes() and a.d_sigma.tobytes() == b.d_sigma.tobytes()


def composed_loss_case(seed=0, space="additive_floored"):
    """Tiny float64 model, two episodes of three shots, loss = mean NLL / N."""
    cfg = EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, T=4, J=2, n_max=4,
                        sigma_shift_space=space)
    rng = np.random.default_rng(seed)
    model = _live_heads(init_model(cfg, seed, dtype=np.float64), rng, scale=0.05)
    eps, fulls = [], []
    for _ in range(2):
        shots, days, th = _episode(rng, cfg, 3)
        th = SphericalGmm(th.means, 0.5 + 0.5 * th.sigmas)
        eps.append(tokenize(shots, th, cfg, days=days))
        fulls.append(rng.random((20, cfg.T)))
    tokens = stack_tokens(eps)
    X = np.stack(fulls)
    J, ns = cfg.J, cfg.n_max
    means, sigmas = tokens.values[:, ns:ns + J], tokens.values[:, ns + J:]
    lw = np.log(np.arange(1, J + 1) / (J * (J + 1) / 2))

    def f():
        d_mu, d_sg = encode_graph(model, tokens)
        mu, sg = shift_arrays(means, sigmas, d_mu, d_sg, cfg)
        return D.scale(D.reduce_mean(D.gmm_nll(X, mu, sg, lw)), 1.0 / X.shape[1])

    return model, f, (X, means, sigmas, lw, tokens, cfg)


def test_composed_loss_value_matches_numpy_route():
    model, f, (X, means, sigmas, lw, tokens, cfg) = composed_loss_case(1)
    er = encode(model, tokens)
    ref = np.mean([nll(apply_shift(SphericalGmm(means[b], sigmas[b]),
                                   ShiftVector(er.d_mu[b], er.d_sigma[b]), cfg), X[b])
                   for b in range(len(X))]) / X.shape[1]
    assert f().item() == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("space", ["additive_floored", "log_additive"])
def test_composed_loss_gradient(space):
    model, f, _ = composed_loss_case(2, space)
    # the day table is large and mostly unused; check the used rows and everything else
    params = [p for k, p in model.params.items() if k != "date_emb"]
    assert D.finite_diff_check(f, params) < 1e-6


def test_checkpoint_byte_exact_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    model = _live_heads(init_model(TINY, 5), rng)
    extra = {"adam.m.x": rng.normal(size=(3, 2)).astype(np.float32)}
    header = {"step": 7, "note": "x"}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    write_checkpoint(p1, model, header, extra)
    m2, h2, e2 = read_checkpoint(p1)
    for k in model.params:
        np.testing.assert_array_equal(model.params[k].data, m2.params[k].data)
    np.testing.assert_array_equal(e2["adam.m.x"], extra["adam.m.x"])
    assert h2["step"] == 7 and m2.config == TINY
    write_checkpoint(p2, m2, {k: h2[k] for k in header}, e2)
    assert p1.read_bytes() == p2.read_bytes()
    assert not (tmp_path / "a.ckpt.partial").exists()


def test_checkpoint_rejects_corruption(tmp_path):
    model = init_model(TINY, 0)
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, model, {})
    raw = p.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short").write_bytes(raw[:-4])
    for name in ("bad_magic", "short"):
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / name)
