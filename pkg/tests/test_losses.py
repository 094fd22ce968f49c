import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ainfonce import losses as L
from ainfonce import tensor_core as tc
from ainfonce.analysis import loss_suite


def unit_rows(rng, n, k=4):
    x = rng.standard_normal((n, k))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# scalar oracle: plain Python floats, one anchor/pair at a time


def _dot(u, v):
    return math.fsum(a * b for a, b in zip(u, v))


def oracle_batch_loss(Z, B, t, *, gamma=1.0, tau=0.0, weighted=False, debias=False):
    """Sum over clean anchors of clean-pair term + gamma * adversarial-pair term."""
    Z = [list(map(float, row)) for row in Z]
    M, N = 2, 3 * (B - 1)
    total = 0.0
    for a in range(2 * B):
        inst = a % B
        clean_pos = a + B if a < B else a - B
        adv_pos = 2 * B + inst
        negs = [c for c in range(3 * B) if c % B != inst]
        s = {c: _dot(Z[a], Z[c]) for c in range(3 * B)}
        neg_mass = 0.0
        for k in negs:
            w = math.exp(s[k] / t) if weighted else 1.0
            neg_mass += w * math.exp(s[k] / t)
        if debias:
            pos_all = math.exp(s[clean_pos] / t) + math.exp(s[adv_pos] / t)
            raw = (neg_mass - N / M * tau * pos_all) / (1.0 - tau)
            neg_mass = max(raw, N * math.exp(-1.0 / t))
        for j, weight in ((clean_pos, 1.0), (adv_pos, gamma)):
            total += weight * (math.log(math.exp(s[j] / t) + neg_mass) - s[j] / t)
    return total


def batch(Zv):
    g = tc.Graph()
    return g, g.leaf(Zv)


# ---------------------------------------------------------------------------
# similarity


def test_pairwise_cosine_examples():
    g = tc.Graph()
    S = L.pairwise_cosine(g.leaf(np.array([[1.0, 0.0], [0.0, 1.0]]))).value
    assert np.array_equal(S, np.eye(2))
    S = L.pairwise_cosine(g.leaf(np.array([[1.0, 0.0], [-1.0, 0.0]]))).value
    assert S[0, 1] == -1.0


def test_pairwise_cosine_matches_per_pair_dots():
    Z = unit_rows(np.random.default_rng(0), 7, 5)
    S = L.pairwise_cosine(tc.Graph().leaf(Z)).value
    brute = np.array([[np.dot(a, b) for b in Z] for a in Z])
    assert np.array_equal(S, S.T)
    assert np.max(np.abs(S - brute)) <= 1e-15
    assert np.all(np.abs(np.diag(S) - 1) <= 1e-12)


def test_pairwise_cosine_rejects_unnormalized():
    with pytest.raises(ValueError):
        L.pairwise_cosine(tc.Graph().leaf(np.array([[1.0, 1.0]])))


# ---------------------------------------------------------------------------
# per-pair losses


def _toy(g):
    zi = g.leaf(np.array([1.0, 0.0]))
    zj = g.leaf(np.array([1.0, 0.0]))
    negs = g.leaf(np.array([[-1.0, 0.0]]))
    return zi, zj, negs


def test_infonce_toy_value():
    g = tc.Graph()
    zi, zj, negs = _toy(g)
    assert abs(L.infonce(zi, zj, negs, 1.0).value - math.log(1 + math.exp(-2))) < 1e-15
    assert abs(L.infonce(zi, zj, negs, 1.0).value - 0.126928) < 1e-6


def test_infonce_no_negatives_is_zero():
    g = tc.Graph()
    zi, zj, _ = _toy(g)
    assert L.infonce(zi, zj, None, 0.5).value == 0.0


def test_infonce_tie_is_ln2():
    g = tc.Graph()
    zi = g.leaf(np.array([0.6, 0.8]))
    zj = g.leaf(np.array([0.0, 1.0]))
    negs = g.leaf(np.array([[0.0, 1.0]]))
    assert abs(L.infonce(zi, zj, negs, 0.7).value - math.log(2)) < 1e-15


def test_infonce_needs_positive():
    g = tc.Graph()
    with pytest.raises(ValueError):
        L.infonce(g.leaf(np.array([1.0, 0.0])), None, None, 1.0)


def test_a_infonce_weighted_negative_value():
    g = tc.Graph()
    zi, zj, negs = _toy(g)
    v = L.a_infonce(zi, zj, negs, 0.3, 1.0, 2.0, 1.0).value
    assert abs(v - math.log(1 + 2 * math.exp(-2))) < 1e-15
    # log(1 + 2 e^-2) = 0.2395448 (a hand-rounded 0.239590 is circulating)
    assert abs(v - 0.2395448) < 1e-7


def test_a_infonce_zero_negative_weight_is_zero():
    g = tc.Graph()
    zi, zj, negs = _toy(g)
    assert abs(L.a_infonce(zi, zj, negs, 0.3, 1.0, 0.0, 1.0).value) < 1e-15


def test_a_infonce_rejects_bad_weights():
    g = tc.Graph()
    zi, zj, negs = _toy(g)
    with pytest.raises(ValueError):
        L.a_infonce(zi, zj, negs, 0.3, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        L.a_infonce(zi, zj, negs, 0.3, 1.0, -1.0, 1.0)


def _pair_grads(fn, zi, zj, negs):
    g = tc.Graph()
    a, b, c = g.leaf(zi), g.leaf(zj), g.leaf(negs)
    loss = fn(a, b, c)
    tc.backward(loss)
    return loss.value, a.grad, b.grad, c.grad


def test_a_infonce_half_equals_infonce_on_100_batches():
    worst_v = worst_g = 0.0
    for s in range(100):
        rng = np.random.default_rng([42, s])
        Z = unit_rows(rng, 6, 5)
        t = rng.uniform(0.1, 2.0)
        ref = _pair_grads(lambda a, b, c: L.infonce(a, b, c, t), Z[0], Z[1], Z[2:])
        got = _pair_grads(lambda a, b, c: L.a_infonce(a, b, c, 0.5, 1.0, 1.0, t), Z[0], Z[1], Z[2:])
        worst_v = max(worst_v, abs(ref[0] - got[0]))
        worst_g = max(worst_g, *(np.max(np.abs(r - q)) for r, q in zip(ref[1:], got[1:])))
    assert worst_v <= 1e-12
    assert worst_g <= 1e-10


# ---------------------------------------------------------------------------
# sim_alpha


def _sim_grads(zi, zj, alpha):
    g = tc.Graph()
    a, b = g.leaf(np.asarray(zi, float)), g.leaf(np.asarray(zj, float))
    s = L.sim_alpha(a, b, alpha)
    tc.backward(s)
    return s.value, a.grad, b.grad


def test_sim_alpha_value_is_independent_of_alpha():
    vals = {float(_sim_grads([0.6, 0.8], [0.0, 1.0], a)[0]) for a in (0.0, 0.2, 0.3, 0.5, 1.0)}
    assert vals == {0.8}


def test_sim_alpha_gradient_example():
    _, gi, gj = _sim_grads([0.6, 0.8], [0.0, 1.0], 0.3)
    assert np.allclose(gi, [0.0, 0.3], rtol=0, atol=1e-15)
    # (1 - alpha) * z_i, not alpha * z_i = (0.18, 0.24)
    assert np.allclose(gj, [0.42, 0.56], rtol=0, atol=1e-15)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.5, 1.0])
def test_sim_alpha_split_law(alpha):
    rng = np.random.default_rng(int(alpha * 10))
    zi, zj = unit_rows(rng, 2, 6)
    _, gi, gj = _sim_grads(zi, zj, alpha)
    assert np.max(np.abs(gi - alpha * zj)) <= 1e-12
    assert np.max(np.abs(gj - (1 - alpha) * zi)) <= 1e-12


def test_sim_alpha_half_is_half_the_symmetric_gradient():
    zi, zj = unit_rows(np.random.default_rng(9), 2, 3)
    _, gi, gj = _sim_grads(zi, zj, 0.5)
    g = tc.Graph()
    a, b = g.leaf(zi), g.leaf(zj)
    tc.backward(tc.dot_rows(a, b))
    assert np.array_equal(gi, 0.5 * a.grad) and np.array_equal(gj, 0.5 * b.grad)


def test_sim_alpha_fd_with_frozen_branches():
    zi, zj = unit_rows(np.random.default_rng(2), 2, 4)
    err = tc.finite_diff_check(lambda g, v: L.sim_alpha(v["a"], v["b"], 0.3), {"a": zi, "b": zj})
    assert err < 1e-8


def test_sim_alpha_matrix_form():
    rng = np.random.default_rng(4)
    A, Bm = unit_rows(rng, 3, 4), unit_rows(rng, 5, 4)
    g = tc.Graph()
    a, b = g.leaf(A), g.leaf(Bm)
    S = L.sim_alpha(a, b, 0.3)
    assert np.array_equal(S.value, A @ Bm.T)
    tc.backward(tc.sum(S))
    assert np.allclose(a.grad, 0.3 * np.tile(Bm.sum(0), (3, 1)), rtol=0, atol=1e-12)
    assert np.allclose(b.grad, 0.7 * np.tile(A.sum(0), (5, 1)), rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# weights and the debiased mass


def test_pair_weights():
    assert L.pair_weights(np.array([[0.0]]), 1.0, "similarity")[0, 0] == 1.0
    assert abs(L.pair_weights(np.array([[1.0]]), 0.5, "similarity")[0, 0] - 7.38906) < 1e-5
    assert np.array_equal(L.pair_weights(np.array([[0.3, -1.0]]), 0.5, "uniform"), [[1.0, 1.0]])
    with pytest.raises(ValueError):
        L.pair_weights(np.zeros((1, 1)), 0.5, "cosine")


def test_lambda_pos_coeff():
    assert L.lambda_pos_coeff(2, 7, 0.0) == 1.0
    assert abs(L.lambda_pos_coeff(2, 4, 0.1) - 1.4 / 1.8) < 1e-15
    assert abs(L.lambda_pos_coeff(2, 256, 0.1) - (-13.2222)) < 1e-4
    with pytest.raises(ValueError):
        L.lambda_pos_coeff(2, 4, 1.0)


def _mass(neg, pos, tau, t, w_n=1.0, w_p=1.0):
    g = tc.Graph()
    neg, pos = np.asarray(neg, float), np.asarray(pos, float)
    return L.debiased_negative_mass(g.leaf(neg), g.leaf(pos), w_n, w_p, tau,
                                    len(pos), len(neg), t).value


def test_debiased_mass_no_debias():
    neg = [0.3, -0.2, 0.9]
    assert abs(_mass(neg, [0.5, 0.1], 0.0, 0.5) - sum(math.exp(s / 0.5) for s in neg)) <= 1e-12


def test_debiased_mass_hand_value():
    assert abs(_mass([0.0] * 4, [0.0, 0.0], 0.1, 1.0) - 4.0) <= 1e-12


def test_debiased_mass_clamp():
    raw = (math.exp(-1) - 0.5 * math.exp(1)) / 0.5
    assert abs(raw - (-1.98252)) < 1e-5
    assert abs(_mass([-1.0], [1.0], 0.5, 1.0) - math.exp(-1)) <= 1e-12
    assert abs(_mass([-1.0], [1.0], 0.5, 1.0) - 0.367879) < 1e-6


def test_debiased_mass_requires_positives_when_debiasing():
    with pytest.raises(ValueError):
        _mass([0.1, 0.2], [], 0.1, 1.0)


# ---------------------------------------------------------------------------
# batched CoreACL losses


def test_layout_three_instances():
    B = 3
    assert L.positives(0, B) == [3, 6]
    assert L.positives(4, B) == [1, 7]
    assert L.negatives(0, B) == [1, 2, 4, 5, 7, 8]
    for a in range(2 * B):
        assert len(L.negatives(a, B)) == 3 * (B - 1)


def test_batch_shape_checked():
    g = tc.Graph()
    with pytest.raises(ValueError):
        L.loss_ip(g.leaf(unit_rows(np.random.default_rng(0), 6)), 3, 0.3, 1.0, 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_loss_ip_matches_scalar_oracle(seed):
    Z = unit_rows(np.random.default_rng([7, seed]), 9)
    g, z = batch(Z)
    got = L.loss_ip(z, 3, 0.3, 0.7, 0.5).value
    assert abs(got - oracle_batch_loss(Z, 3, 0.5, gamma=0.7)) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_loss_hn_matches_scalar_oracle(seed):
    Z = unit_rows(np.random.default_rng([8, seed]), 9)
    g, z = batch(Z)
    got = L.loss_hn(z, 3, 0.3, 0.1, 0.5).value
    want = oracle_batch_loss(Z, 3, 0.5, tau=0.1, weighted=True, debias=True)
    assert abs(got - want) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_loss_ip_hn_matches_scalar_oracle(seed):
    Z = unit_rows(np.random.default_rng([9, seed]), 9)
    g, z = batch(Z)
    got = L.loss_ip_hn(z, 3, 0.3, 0.7, 0.1, 0.5).value
    want = oracle_batch_loss(Z, 3, 0.5, gamma=0.7, tau=0.1, weighted=True, debias=True)
    assert abs(got - want) <= 1e-12


def _value_and_grad(fn, Z):
    g, z = batch(Z)
    loss = fn(z)
    tc.backward(loss)
    return loss.value, z.grad


def _assert_same(a, b, vtol=1e-12, gtol=1e-10):
    assert abs(a[0] - b[0]) <= vtol
    assert np.max(np.abs(a[1] - b[1])) <= gtol


@pytest.mark.parametrize("seed", range(5))
def test_loss_hn_without_debias_or_weights_is_plain_a_infonce(seed):
    Z = unit_rows(np.random.default_rng([10, seed]), 12)
    B, a = 4, 0.3
    hn = _value_and_grad(lambda z: L.loss_hn(z, B, a, 0.0, 0.5, weight_mode="uniform"), Z)

    def plain(z):
        total = None
        for anchor in range(2 * B):
            zi = tc.reshape(tc.take_rows(z, [anchor]), (-1,))
            negs = tc.take_rows(z, L.negatives(anchor, B))
            for j in L.positives(anchor, B):
                zj = tc.reshape(tc.take_rows(z, [j]), (-1,))
                term = L.a_infonce(zi, zj, negs, a, 1.0, 1.0, 0.5)
                total = term if total is None else total + term
        return total

    _assert_same(hn, _value_and_grad(plain, Z))


@pytest.mark.parametrize("seed", range(5))
def test_loss_ip_hn_without_debias_or_weights_is_loss_ip(seed):
    Z = unit_rows(np.random.default_rng([11, seed]), 12)
    a = _value_and_grad(lambda z: L.loss_ip_hn(z, 4, 0.3, 0.8, 0.0, 0.5, weight_mode="uniform"), Z)
    b = _value_and_grad(lambda z: L.loss_ip(z, 4, 0.3, 0.8, 0.5), Z)
    _assert_same(a, b)


def test_loss_ip_gamma_zero_is_clean_only():
    Z = unit_rows(np.random.default_rng(12), 9)
    g, z = batch(Z)
    terms = L.ip_terms(z, 3, 0.3, 0.0, 0.5)
    assert terms.total.value == terms.clean.value
    assert abs(terms.clean.value - oracle_batch_loss(Z, 3, 0.5, gamma=0.0)) <= 1e-12


def test_loss_ip_adv_equal_to_clean_view_substitution():
    Z = unit_rows(np.random.default_rng(13), 9)
    Z[6:] = Z[:3]
    g, z = batch(Z)
    terms = L.ip_terms(z, 3, 0.5, 1.0, 0.5)
    # anchors in view 2 see their adversarial positive as a copy of their clean positive
    per_anchor_adv = L._pair_terms(z, 3, L.coreacl_layout(3)[2], 0.5, 0.5).value
    per_anchor_clean = L._pair_terms(z, 3, L.coreacl_layout(3)[1], 0.5, 0.5).value
    assert np.allclose(per_anchor_adv[3:], per_anchor_clean[3:], rtol=0, atol=1e-12)
    assert np.isfinite(terms.total.value)


def test_loss_ip_half_matches_symmetric_infonce():
    Z = unit_rows(np.random.default_rng(14), 12)
    a = _value_and_grad(lambda z: L.loss_ip(z, 4, 0.5, 1.0, 0.5), Z)
    b = _value_and_grad(lambda z: L.loss_infonce(z, 4, 0.5), Z)
    _assert_same(a, b)


def test_loss_ip_hn_gamma_zero_half_is_debiased_clean_loss():
    Z = unit_rows(np.random.default_rng(15), 9)
    g, z = batch(Z)
    got = L.loss_ip_hn(z, 3, 0.5, 0.0, 0.1, 0.5).value
    want = oracle_batch_loss(Z, 3, 0.5, gamma=0.0, tau=0.1, weighted=True, debias=True)
    assert abs(got - want) <= 1e-12


def test_single_instance_batch_has_no_negative_mass():
    Z = unit_rows(np.random.default_rng(16), 3)
    g, z = batch(Z)
    assert abs(L.loss_hn(z, 1, 0.3, 0.0, 0.5).value) <= 1e-15
    g, z = batch(Z)
    assert abs(L.loss_ip(z, 1, 0.3, 1.0, 0.5).value) <= 1e-15


def test_every_loss_matches_finite_differences():
    results = loss_suite(seed=0, n_batches=10)
    assert len({r.name.split("[")[0] for r in results}) == 5
    bad = [(r.name, r.error) for r in results if not r.ok]
    assert not bad


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.floats(0.05, 5.0), tau=st.floats(0.0, 0.5),
       alpha=st.floats(0.0, 1.0))
def test_losses_finite_everywhere(seed, t, tau, alpha):
    Z = unit_rows(np.random.default_rng(seed), 12)
    for fn in (lambda z: L.loss_ip(z, 4, alpha, 1.0, t),
               lambda z: L.loss_hn(z, 4, alpha, tau, t),
               lambda z: L.loss_ip_hn(z, 4, alpha, 1.0, tau, t)):
        v, grad = _value_and_grad(fn, Z)
        assert np.isfinite(v) and np.all(np.isfinite(grad))


# ---------------------------------------------------------------------------
# annealing


def test_alpha_from_distance_example():
    assert abs(L.alpha_from_distance(0.6, 0.1, 0.5, 0.2, 1.0) - 0.3) < 1e-15


def test_alpha_endpoints_monotone_and_clamped():
    amin, amax, dmin, dmax = 0.2, 0.5, 0.25, 1.0
    assert L.alpha_from_distance(dmax, amin, amax, dmin, dmax) == amin
    assert L.alpha_from_distance(dmin, amin, amax, dmin, dmax) == amax
    grid = np.linspace(0.0, 2.0, 100)
    alphas = [L.alpha_from_distance(d, amin, amax, dmin, dmax) for d in grid]
    assert all(b <= a for a, b in zip(alphas, alphas[1:]))
    assert all(amin <= a <= amax for a in alphas)


def test_alpha_from_distance_rejects_bad_bounds():
    with pytest.raises(ValueError):
        L.alpha_from_distance(0.5, 0.2, 0.5, 1.0, 1.0)


def test_anneal_state_warmup_then_schedule():
    st_ = L.AnnealState(alpha_min=0.2, warmup_epochs=1, d_min_ratio=0.25, momentum=0.9)
    for d in (0.8, 1.2):
        assert L.anneal_alpha(st_, d, 0.3) == 0.3
    st_.finish_warmup()
    assert st_.d_max == 1.0 and st_.d_min == 0.25
    # smoothed d = 0.9 * 1.0 + 0.1 * 1.0 = d_max
    assert L.anneal_alpha(st_, 1.0, 0.3) == 0.2
    a = L.anneal_alpha(st_, 0.0, 0.3)
    assert abs(a - L.alpha_from_distance(0.9, 0.2, 0.5, 0.25, 1.0)) < 1e-15


def test_anneal_state_validation():
    with pytest.raises(ValueError):
        L.AnnealState(alpha_max=0.6)
    st_ = L.AnnealState()
    with pytest.raises(ValueError):
        st_.finish_warmup()
    with pytest.raises(ValueError):
        L.anneal_alpha(st_, -0.1, 0.3)
    zero = L.AnnealState()
    L.anneal_alpha(zero, 0.0, 0.3)
    with pytest.raises(ValueError):
        zero.finish_warmup()


def test_loss_config_validation():
    for bad in (dict(t=0.0), dict(alpha=1.5), dict(gamma=-1.0), dict(tau=1.0),
                dict(weight_mode="cosine")):
        with pytest.raises(ValueError):
            L.LossConfig(**bad)
