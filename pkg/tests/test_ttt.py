import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import _reference as ref
from tttlab import autodiff as ad
from tttlab.autodiff import Tensor, numerical_grad, rel_error
from tttlab.baselines import Attention, init_attention_params, segment_mask
from tttlab.ttt import (GATE_INIT, TTTConfig, bidirectional, gated_residual, init_ttt_params, inner_grad,
                        inner_loss, inner_step, modified_block, scan_minibatch, scan_sequential, wrapper_f)


def _np(params):
    return {"theta_K": params.theta_K.data, "theta_V": params.theta_V.data, "theta_Q": params.theta_Q.data,
            "theta_O": params.theta_O.data, "W0": [w.data for w in params.W0],
            "ln_gain": params.ln_gain.data, "ln_bias": params.ln_bias.data}


def _setup(variant="mlp", d=4, k=None, heads=1, b=2, eta=None, seed=0, std=0.3):
    cfg = TTTConfig(d, k, variant, hidden_mult=2, b=b, eta=eta, heads=heads)
    rng = np.random.default_rng(seed)
    params = init_ttt_params(cfg, rng, requires_grad=False, state_std=std)
    return cfg, params, rng


def _zero_state(cfg):
    if cfg.variant == "linear":
        return (Tensor(np.zeros((cfg.heads, cfg.head_dim, cfg.head_dim))),)
    return (Tensor(np.zeros((cfg.heads, cfg.head_dim, cfg.hidden))),
            Tensor(np.zeros((cfg.heads, cfg.hidden, cfg.head_dim))))


# -- config and parameters ------------------------------------------------------

def test_config_defaults():
    assert TTTConfig(8, variant="linear").eta == 1.0
    assert TTTConfig(8, variant="mlp").eta == 0.1
    cfg = TTTConfig(8)
    assert (cfg.k, cfg.b, cfg.hidden_mult, cfg.heads) == (8, 64, 4, 1)
    assert cfg.hidden == 32


@pytest.mark.parametrize("kw", [dict(d=4, k=5), dict(d=4, k=0), dict(d=4, b=0), dict(d=4, heads=3),
                                dict(d=4, variant="conv"), dict(d=4, eta=-1.0)])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        TTTConfig(**kw)


def test_gates_start_near_one_tenth():
    cfg, params, _ = _setup()
    assert np.all(params.alpha.data == GATE_INIT) and np.all(params.beta.data == GATE_INIT)
    assert np.tanh(params.alpha.data) == pytest.approx(np.full(cfg.d, 0.0996679946), abs=1e-9)


def test_state_shapes():
    cfg = TTTConfig(8, 4, "mlp", heads=2)
    W1, W2 = init_ttt_params(cfg, np.random.default_rng(0)).W0
    assert W1.shape == (2, 2, 8) and W2.shape == (2, 8, 2)
    (W,) = init_ttt_params(TTTConfig(8, 4, "linear", heads=2), np.random.default_rng(0)).W0
    assert W.shape == (2, 2, 2)


# -- wrapper_f and inner loss ---------------------------------------------------

@pytest.mark.parametrize("variant", ["linear", "mlp"])
def test_wrapper_is_identity_at_zero_state(variant):
    cfg, params, rng = _setup(variant)
    U = Tensor(rng.normal(size=(1, 3, 4)))
    assert np.array_equal(wrapper_f(U, _zero_state(cfg), params, cfg).data, U.data)


def test_wrapper_mlp_matches_script():
    cfg, params, rng = _setup("mlp")
    U = rng.normal(size=(1, 3, 4))
    W = [w.data[0] for w in params.W0]
    want = ref.f(U[0], W, params.ln_gain.data[0], params.ln_bias.data[0])
    got = wrapper_f(Tensor(U), params.W0, params, cfg).data[0]
    assert np.allclose(got, want, rtol=1e-13, atol=1e-14)


def test_wrapper_shape_mismatch():
    cfg, params, rng = _setup("mlp")
    with pytest.raises(ValueError, match="width"):
        wrapper_f(Tensor(rng.normal(size=(1, 3, 5))), params.W0, params, cfg)


def test_inner_loss_hand_value():
    cfg = TTTConfig(2, variant="linear")
    params = init_ttt_params(cfg, np.random.default_rng(0), requires_grad=False)
    params.theta_K, params.theta_V = Tensor(np.eye(2)), Tensor(np.zeros((2, 2)))
    assert inner_loss(_zero_state(cfg), Tensor([3.0, 4.0]), params, cfg).item() == pytest.approx(25.0, abs=1e-12)


def test_inner_loss_zero_when_reconstruction_exact():
    cfg, params, rng = _setup("mlp")
    params.theta_V = params.theta_K
    assert inner_loss(_zero_state(cfg), Tensor(rng.normal(size=4)), params, cfg).item() == 0.0


@pytest.mark.parametrize("variant", ["linear", "mlp"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_inner_grad_matches_closed_form(variant, seed):
    cfg, params, rng = _setup(variant, d=5, seed=seed)
    x = rng.normal(size=(3, 5))
    got = inner_grad(params.W0, Tensor(x), params, cfg)
    p = _np(params)
    want = ref.inner_grad(x @ p["theta_K"].T, x @ p["theta_V"].T, [w[0] for w in p["W0"]],
                          p["ln_gain"][0], p["ln_bias"][0])
    for g, w in zip(got, want):
        assert rel_error(g.data[0], w) < 1e-12


@pytest.mark.parametrize("variant", ["linear", "mlp"])
def test_inner_grad_matches_differences(variant):
    cfg, params, rng = _setup(variant, d=4, seed=7)
    x = Tensor(rng.normal(size=4))
    state = [w.data.copy() for w in params.W0]
    grads = inner_grad([Tensor(w) for w in state], x, params, cfg)
    for i, w in enumerate(state):
        fn = lambda a: inner_loss([Tensor(a) if j == i else Tensor(s) for j, s in enumerate(state)],
                                  x, params, cfg).item()
        assert rel_error(grads[i].data, numerical_grad(fn, w, 1e-6)) < 1e-4


def test_inner_step_eta_zero_and_zero_residual():
    cfg, params, rng = _setup("mlp")
    x = Tensor(rng.normal(size=4))
    for w, w2 in zip(params.W0, inner_step(params.W0, x, params, cfg, eta=0.0)):
        assert np.array_equal(w.data, w2.data)
    params.theta_V = params.theta_K
    zero = _zero_state(cfg)
    for w, w2 in zip(zero, inner_step(zero, x, params, cfg, eta=0.5)):
        assert np.array_equal(w.data, w2.data)


def test_second_order_through_inner_step():
    """Gradient of a loss after one inner step w.r.t. theta_K (a gradient of a gradient)."""
    cfg, params, rng = _setup("mlp", d=3, seed=11)
    x, q, w = rng.normal(size=3), rng.normal(size=3), Tensor(rng.normal(size=3))
    K0 = params.theta_K.data.copy()

    def after_step(K):
        params.theta_K = K
        W = inner_step(tuple(Tensor(w.data) for w in params.W0), Tensor(x), params, cfg)
        return ad.tsum(ad.mul(wrapper_f(Tensor(q.reshape(1, 1, 3)), W, params, cfg), w))

    K = Tensor(K0, requires_grad=True)
    (g,) = ad.grad(after_step(K), [K])
    fd = numerical_grad(lambda a: after_step(Tensor(a)).item(), K0, 1e-6)
    assert rel_error(g.data, fd) < 1e-6


# -- scans -----------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["linear", "mlp"])
@pytest.mark.parametrize("heads,b,T", [(1, 1, 5), (1, 3, 7), (2, 2, 6), (2, 4, 9), (1, 64, 10)])
def test_scan_matches_numpy_reference(variant, heads, b, T):
    cfg, params, rng = _setup(variant, d=4, heads=heads, b=b)
    X = rng.normal(size=(T, 4))
    want = ref.ttt_scan(X, _np(params), b, cfg.eta, heads)
    assert rel_error(scan_minibatch(Tensor(X), params, cfg).data, want) < 1e-12


def test_scan_eta_zero_zero_state_is_projection():
    cfg, params, rng = _setup("mlp", eta=0.0)
    params.W0 = _zero_state(cfg)
    X = rng.normal(size=(5, 4))
    want = X @ params.theta_Q.data.T @ params.theta_O.data.T
    assert np.allclose(scan_sequential(Tensor(X), params, cfg).data, want, rtol=1e-13, atol=1e-15)


def test_single_token_scan_is_one_step_then_output():
    cfg, params, rng = _setup("linear")
    x = rng.normal(size=(1, 4))
    W1 = inner_step(params.W0, Tensor(x), params, cfg)
    q = (x @ params.theta_Q.data.T).reshape(1, 1, 4)
    want = wrapper_f(Tensor(q), W1, params, cfg).data[0] @ params.theta_O.data.T
    assert np.array_equal(scan_sequential(Tensor(x), params, cfg).data, want)


def test_two_token_minibatch_uses_averaged_gradient():
    cfg, params, rng = _setup("mlp", b=2, eta=0.3)
    X = rng.normal(size=(2, 4))
    g1 = inner_grad(params.W0, Tensor(X[:1]), params, cfg)
    g2 = inner_grad(params.W0, Tensor(X[1:]), params, cfg)
    W2 = tuple(Tensor(w.data - 0.15 * (a.data + c.data)) for w, a, c in zip(params.W0, g1, g2))
    q = (X @ params.theta_Q.data.T).reshape(1, 2, 4)
    want = wrapper_f(Tensor(q), W2, params, cfg).data[0] @ params.theta_O.data.T
    assert np.allclose(scan_minibatch(Tensor(X), params, cfg).data, want, rtol=1e-12, atol=1e-15)


def test_ragged_final_batch_averages_over_its_size():
    cfg, params, rng = _setup("linear", b=3, eta=0.6)
    X = rng.normal(size=(4, 4))
    _, states = scan_minibatch(Tensor(X), params, cfg, return_states=True)
    g = inner_grad(states[0], Tensor(X[3:]), params, cfg)[0]
    assert np.allclose(states[1][0].data, states[0][0].data - 0.6 * g.data, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_b1_is_bit_exact_with_sequential(seed):
    cfg, params, rng = _setup(["linear", "mlp"][seed % 2], d=6, heads=1 + seed % 2, seed=seed)
    X = Tensor(rng.normal(size=(2, 7, 6)))
    assert np.array_equal(scan_minibatch(X, params, cfg, b=1).data, scan_sequential(X, params, cfg).data)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), perm_seed=st.integers(0, 10_000))
def test_permuting_within_batch_keeps_state(seed, perm_seed):
    cfg, params, rng = _setup("mlp", b=4, seed=seed)
    X = rng.normal(size=(8, 4))
    perm = np.random.default_rng(perm_seed).permutation(4)
    Xp = X.copy()
    Xp[4:] = X[4 + perm]
    Z, sa = scan_minibatch(Tensor(X), params, cfg, return_states=True)
    Zp, sb = scan_minibatch(Tensor(Xp), params, cfg, return_states=True)
    for a, b in zip(sa[-1], sb[-1]):
        assert np.allclose(a.data, b.data, rtol=1e-12, atol=1e-15)
    assert np.allclose(Zp.data[4:], Z.data[4 + perm], rtol=1e-12, atol=1e-15)


def test_batched_sequences_are_independent():
    cfg, params, rng = _setup("mlp", b=3)
    X = rng.normal(size=(3, 7, 4))
    Z = scan_minibatch(Tensor(X), params, cfg).data
    for i in range(3):
        assert np.array_equal(Z[i], scan_minibatch(Tensor(X[i]), params, cfg).data)


def test_head_permutation_is_unobservable():
    cfg, params, rng = _setup("linear", d=4, heads=2)
    X = Tensor(rng.normal(size=(5, 4)))
    Z = scan_minibatch(X, params, cfg).data
    order = np.array([2, 3, 0, 1])  # swap the two heads' rows/columns
    swapped = init_ttt_params(cfg, rng, requires_grad=False)
    for n in ("theta_K", "theta_V", "theta_Q"):
        setattr(swapped, n, Tensor(getattr(params, n).data[order]))
    swapped.theta_O = Tensor(params.theta_O.data[:, order])
    swapped.W0 = tuple(Tensor(w.data[::-1]) for w in params.W0)
    swapped.ln_gain, swapped.ln_bias = Tensor(params.ln_gain.data[::-1]), Tensor(params.ln_bias.data[::-1])
    assert np.allclose(scan_minibatch(X, swapped, cfg).data, Z, rtol=1e-13, atol=1e-15)


def test_scan_rejects_empty_sequence():
    cfg, params, _ = _setup()
    with pytest.raises(ValueError):
        scan_minibatch(Tensor(np.zeros((0, 4))), params, cfg)


# -- bidirection and gating ------------------------------------------------------

def test_bidirectional_matches_reverse_scan_reverse():
    cfg, params, rng = _setup("mlp", b=2)
    X = rng.normal(size=(8, 4))
    want = ref.ttt_scan(X[::-1].copy(), _np(params), 2, cfg.eta)[::-1]
    assert rel_error(bidirectional(Tensor(X), params, cfg).data, want) < 1e-12


def test_bidirectional_singleton_and_unfolding():
    cfg, params, rng = _setup("linear", b=3)
    x = Tensor(rng.normal(size=(1, 4)))
    assert np.array_equal(bidirectional(x, params, cfg).data, scan_minibatch(x, params, cfg).data)
    X = Tensor(rng.normal(size=(7, 4)))
    lhs = bidirectional(ad.time_reverse(X), params, cfg).data
    assert np.array_equal(lhs, ad.time_reverse(scan_minibatch(X, params, cfg)).data)


def test_gated_residual_values():
    rng = np.random.default_rng(0)
    S, X = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert np.array_equal(gated_residual(Tensor(S), Tensor(X), Tensor(np.zeros(4))).data, X)
    assert np.allclose(gated_residual(Tensor(S), Tensor(X), Tensor(np.full(4, 40.0))).data, X + S)
    got = gated_residual(Tensor(S), Tensor(X), Tensor(np.full(4, 0.1))).data
    assert np.allclose(got, X + 0.0996680 * S, atol=1e-6)
    with pytest.raises(ValueError):
        gated_residual(Tensor(S), Tensor(X[:2]), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        gated_residual(Tensor(S), Tensor(X), Tensor(np.zeros(3)))


def test_modified_block_matches_composition():
    cfg, params, rng = _setup("mlp", d=4, b=2)
    params.alpha, params.beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    ap = init_attention_params(4, rng=rng, requires_grad=False)
    X = rng.normal(size=(6, 4))
    seg = np.arange(6) // 3
    p = _np(params)
    Xn = ref.layer_norm(X, 1.0, 0.0)[0]
    Xp = ref.attention(Xn, ap.Wq.data, ap.Wk.data, ap.Wv.data, ap.Wo.data, seg[:, None] == seg[None, :])
    Z = np.tanh(params.alpha.data) * ref.ttt_scan(Xp, p, 2, cfg.eta) + Xp
    Zp = np.tanh(params.beta.data) * ref.ttt_scan(Z[::-1].copy(), p, 2, cfg.eta)[::-1] + Z
    got = modified_block(Tensor(X), params, Attention(ap, segment_mask(6, 3)), cfg).data
    assert rel_error(got, Zp + X) < 1e-12


def test_modified_block_closed_gates_with_identity_attention():
    cfg, params, rng = _setup("linear")
    params.alpha = params.beta = Tensor(np.zeros(4))
    X = rng.normal(size=(5, 4))
    got = modified_block(Tensor(X), params, lambda Z: Z, cfg).data
    assert np.allclose(got, ref.layer_norm(X, 1.0, 0.0)[0] + X, rtol=1e-13, atol=1e-14)


def test_modified_block_rejects_wrong_segment_map():
    cfg, params, rng = _setup()
    attn = Attention(init_attention_params(4, rng=rng), segment_mask(8, 4))
    with pytest.raises(ValueError, match="segment map"):
        modified_block(Tensor(rng.normal(size=(6, 4))), params, attn, cfg)
