from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nexume import dynfit
from nexume.data import shapes_dataset, xor_dataset
from nexume.devmodel import builtin_profile
from nexume.dynfit import policies as P
from nexume.dynfit import training as T
from nexume.dynfit.network import Conv2D, Dense, DWSConv2D, AvgPool, Network
from nexume.errors import (
    ConfigValidation,
    InvalidBitWidth,
    NonFiniteGradient,
    NonFiniteHessian,
    NonFiniteLoss,
    ParseError,
    ShapeMismatch,
    TooManyNeuronsForExact,
    ZeroIterations,
)


def fd_check(net, x, y, rel_h=1e-3):
    """Worst relative error of reverse-mode gradients vs central differences."""
    _, grads = net.loss_and_grads(x, y)
    worst = 0.0
    for i, name, arr in net.param_items():
        flat = arr.reshape(-1)
        g = grads[(i, name)].reshape(-1)
        for j in range(flat.size):
            w0 = flat[j]
            h = rel_h * (1 + abs(w0))
            flat[j] = w0 + h
            lp = net.loss(x, y)
            flat[j] = w0 - h
            lm = net.loss(x, y)
            flat[j] = w0
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(g[j] - fd) / max(abs(g[j]), abs(fd), 1e-8))
    return worst


# ------------------------------------------------------------------ forward


class TestForward:
    def test_identity_configuration(self):
        layer = Dense(5, 3, rng=np.random.default_rng(0))
        net = Network([layer], (5,), "mse")
        x = np.random.default_rng(1).normal(size=(4, 5))
        plain = net.forward(x)
        q = T.QuantAssignment.uniform(net, 16)
        out = dynfit.forward(net, x, {}, q)
        bound = np.abs(x).sum(axis=1, keepdims=True) * np.abs(layer.params["W"]).max() / 32767 / 2
        assert np.all(np.abs(out - plain) <= bound + 1e-15)

    def test_identity_configuration_mlp(self):
        net = dynfit.build_mlp([3, 6, 4, 2], seed=2)
        x = np.random.default_rng(1).normal(size=(8, 3))
        masks = {i: np.ones(net.layers[i].neurons) for i in net.maskable()}
        out = dynfit.forward(net, x, masks, T.QuantAssignment.uniform(net, 16))
        assert np.allclose(out, net.forward(x), atol=1e-3)

    def test_full_dropout_gives_bias_only(self):
        net = dynfit.build_mlp([3, 4, 2], activation="tanh", seed=0)
        net.layers[1].params["b"][:] = [0.3, -0.7]
        x = np.random.default_rng(0).normal(size=(5, 3))
        out = dynfit.forward(net, x, {0: np.zeros(4)})
        assert np.allclose(out, np.tile([0.3, -0.7], (5, 1)))

    def test_hand_example(self):
        net = Network([Dense(2, 2, W=np.eye(2)), Dense(2, 1, W=[[1.0, 1.0]])], (2,), "mse")
        m = P.MaskSample(np.array([0.0, 1.0]), np.array([1, 0]))
        assert dynfit.forward(net, np.array([[1.0, 1.0]]), {0: m})[0, 0] == pytest.approx(1.0)

    def test_shape_mismatch(self):
        net = dynfit.build_mlp([3, 2])
        with pytest.raises(ShapeMismatch):
            net.forward(np.ones((1, 4)))

    def test_low_bits_change_output(self):
        net = dynfit.build_mlp([3, 6, 2], seed=0)
        x = np.random.default_rng(0).normal(size=(4, 3))
        q = T.QuantAssignment.uniform(net, 4)
        assert not np.allclose(net.forward(x, quant=q), net.forward(x))


# ----------------------------------------------------------------- backward


class TestBackward:
    def test_hand_example(self):
        net = Network([Dense(1, 1, W=[[2.0]])], (1,), "mse")
        g = dynfit.backward(net, np.array([[3.0]]), np.array([[0.0]]))
        assert g[(0, "W")][0, 0] == pytest.approx(18.0)

    def test_zero_input(self):
        net = dynfit.build_mlp([3, 4, 1], seed=0)
        g = dynfit.backward(net, np.zeros((2, 3)), np.ones((2, 1)))
        assert not g[(0, "W")].any()

    def test_mlp_finite_differences(self):
        net = dynfit.build_mlp([2, 8, 5, 1], seed=3)
        assert net.n_params() <= 200
        x, y = xor_dataset(16, seed=1)
        assert fd_check(net, x, y) <= 1e-4

    def test_cross_entropy(self):
        net = dynfit.build_mlp([4, 6, 3], loss="ce", seed=1)
        x = np.random.default_rng(0).normal(size=(10, 4))
        y = np.random.default_rng(1).integers(0, 3, 10)
        assert fd_check(net, x, y) <= 1e-4

    def test_conv_and_dws(self):
        rng = np.random.default_rng(0)
        layers = [
            Conv2D(1, 2, 3, 2, "tanh", rng=rng),
            DWSConv2D(2, 3, 2, 2, "tanh", rng=rng),
            AvgPool(),
            Dense(3, 2, rng=rng),
        ]
        net = Network(layers, (1, 6, 5), "ce")
        x = rng.normal(size=(3, 1, 6, 5))
        assert fd_check(net, x, np.array([0, 1, 1])) <= 1e-4

    def test_gradients_through_masks_and_quant(self):
        net = dynfit.build_mlp([3, 5, 2], seed=4)
        x = np.random.default_rng(2).normal(size=(6, 3))
        y = np.random.default_rng(3).normal(size=(6, 2))
        m = {0: np.array([1, 0, 1, 1, 0])}
        _, g = net.loss_and_grads(x, y, masks=m, quant=T.QuantAssignment.uniform(net, 8))
        # dropped neurons receive no gradient on their fan-in rows
        assert not g[(0, "W")][[1, 4]].any()


# ----------------------------------------------------------------- policies


def pol(kind, scale, eps=0.0, p_max=0.9):
    return P.DropoutPolicy(kind, scale, eps, p_max)


class TestL2:
    def test_hand(self):
        assert P.l2_probs([[3.0, 4.0]], 0.5, 0.0, 0.9)[0] == pytest.approx(0.1, abs=1e-9)

    def test_alpha_zero(self):
        assert not P.l2_probs(np.random.default_rng(0).normal(size=(4, 3)), 0.0, 0.0, 0.9).any()

    def test_zero_row_clamped(self):
        assert P.l2_probs([[0.0, 0.0]], 0.5, 0.1, 0.9)[0] == pytest.approx(0.9, abs=1e-9)

    def test_network_level(self):
        net = Network([Dense(2, 1, W=[[3.0, 4.0]]), Dense(1, 1)], (2,), "mse")
        assert dynfit.probs_l2(net, pol("l2", 0.5))[0][0] == pytest.approx(0.1, abs=1e-9)


class TestOBD:
    def test_hand(self):
        assert np.allclose(P.obd_probs([2.0, 8.0], 1.0, 0.0, 0.9), [0.25, 0.9], atol=1e-9)

    def test_equal(self):
        assert np.allclose(P.obd_probs([5.0, 5.0, 5.0], 0.3, 0.0, 0.9), 0.3, atol=1e-9)

    def test_beta_zero(self):
        assert not P.obd_probs([1.0, 3.0], 0.0, 0.0, 0.9).any()

    def test_sensitivity(self):
        s = P.obd_sensitivity([[1.0, 2.0], [0.5, 0.0]], [[2.0, 1.0], [4.0, 9.0]])
        assert s.tolist() == [6.0, 1.0]

    def test_non_finite_hessian(self):
        net = dynfit.build_mlp([2, 3, 1])
        h = {0: np.full((3, 2), np.nan)}
        with pytest.raises(NonFiniteHessian):
            dynfit.probs_obd(net, h, pol("obd", 0.1))


class TestHessian:
    def test_quadratic(self):
        for w in (-3.0, 0.0, 2.5):
            assert dynfit.hessian_diag_fn(lambda v: v - 1.0, np.array([w]))[0] == pytest.approx(1.0, abs=1e-9)

    def test_quartic(self):
        assert dynfit.hessian_diag_fn(lambda v: 4 * v**3, np.array([1.0]))[0] == pytest.approx(12.0, rel=1e-2)

    def test_linear(self):
        assert abs(dynfit.hessian_diag_fn(lambda v: np.full_like(v, 3.0), np.array([0.7]))[0]) <= 1e-6

    def test_network_matches_direct(self):
        net = dynfit.build_mlp([2, 3, 1], seed=0)
        x, y = xor_dataset(8, seed=0)
        H = dynfit.hessian_diag(net, x, y)[0]
        W = net.layers[0].params["W"]
        before = W.copy()
        # second difference of the loss along one coordinate
        h = 1e-4
        W[1, 0] += h
        lp = net.loss(x, y)
        W[1, 0] -= 2 * h
        lm = net.loss(x, y)
        W[1, 0] += h
        l0 = net.loss(x, y)
        assert H[1, 0] == pytest.approx((lp - 2 * l0 + lm) / h**2, rel=1e-3)
        assert np.array_equal(W, before)

    def test_empty_batch(self):
        net = dynfit.build_mlp([2, 3, 1])
        with pytest.raises(ValueError):
            dynfit.hessian_diag(net, np.zeros((0, 2)), np.zeros((0, 1)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self):
        net = dynfit.build_mlp([2, 3, 1])
        with pytest.raises(NonFiniteLoss):
            dynfit.hessian_diag(net, np.full((2, 2), np.inf), np.zeros((2, 1)))


class TestFMRE:
    def test_hand(self):
        F = np.array([[1.0, 0.0], [3.0, 0.0]])
        assert np.allclose(dynfit.probs_fmre(F, np.zeros_like(F), pol("fmre", 0.6)), [0.2, 0.6], atol=1e-9)

    def test_perfect_reconstruction(self):
        F = np.random.default_rng(0).normal(size=(3, 4))
        assert not dynfit.probs_fmre(F, F, pol("fmre", 0.6)).any()

    def test_gamma_zero(self):
        F = np.random.default_rng(0).normal(size=(3, 4))
        assert not dynfit.probs_fmre(F, F + 1, pol("fmre", 0.0)).any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dynfit.probs_fmre(np.zeros((2, 3)), np.zeros((3, 2)), pol("fmre", 0.1))

    def test_network_level(self):
        net = dynfit.build_cnn(convs=((4, 3, 3), (4, 3, 3)), seed=0)
        x, _ = shapes_dataset(8, seed=0)
        p = P.net_probs_fmre(net, x, pol("fmre", 0.1, 1e-8))
        assert set(p) == {0, 1} and all(0 <= v.min() and v.max() <= 0.1 + 1e-12 for v in p.values())


class TestSparseMask:
    def test_midpoint(self):
        assert P.sigmoid(0.0) == 0.5

    def test_step(self):
        z, m = dynfit.sparse_mask_step(np.array([0.0]), np.array([0.5]), 1.0)
        assert z[0] == -0.5 and m[0] == pytest.approx(0.3775406688, abs=1e-9)

    def test_zero_grad(self):
        z0 = np.array([0.3, -1.2])
        z, _ = dynfit.sparse_mask_step(z0, np.zeros(2), 0.7)
        assert np.array_equal(z, z0)

    def test_non_finite(self):
        with pytest.raises(NonFiniteGradient):
            dynfit.sparse_mask_step(np.zeros(1), np.array([np.nan]), 1.0)

    def test_hard_mask(self):
        assert dynfit.hard_mask(np.array([-0.1, 0.0, 2.0])).tolist() == [0, 1, 1]


class TestShapley:
    losses = {frozenset(): 4.0, frozenset({0}): 2.0, frozenset({1}): 3.0, frozenset({0, 1}): 0.0}

    def test_two_neuron_exact(self):
        phi = dynfit.shapley_exact(2, self.losses.__getitem__)
        assert phi == [Fraction(-5, 2), Fraction(-3, 2)]

    def test_efficiency_two(self):
        phi = dynfit.shapley_exact(2, self.losses.__getitem__)
        assert sum(phi) == Fraction(0) - Fraction(4) == -4

    def test_efficiency_three(self):
        rng = np.random.default_rng(5)
        table = {frozenset(s): float(rng.normal()) for s in [(), (0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)]}
        phi = dynfit.shapley_exact(3, table.__getitem__)
        assert sum(phi) == Fraction(table[frozenset({0, 1, 2})]) - Fraction(table[frozenset()])

    def test_probs(self):
        p = P.shapley_probs_from_phi([-2.5, -1.5], 0.3, 0.0, 0.9)
        assert np.allclose(p, [0.12, 0.2], atol=1e-9)

    def test_positive_phi_has_no_importance(self):
        assert P.shapley_probs_from_phi([0.5], 0.3, 1e-8, 0.9)[0] == pytest.approx(0.9)

    def test_network_exact_efficiency(self):
        net = dynfit.build_mlp([2, 4, 1], seed=1)
        x, y = xor_dataset(20, seed=2)
        phi = P.shapley_values(net, x, y, 0, exact=True)
        full = net.loss(x, y)
        empty = net.loss(x, y, masks={0: np.zeros(4)})
        assert phi.sum() == pytest.approx(full - empty, abs=1e-12)

    def test_monte_carlo_close_to_exact(self):
        net = dynfit.build_mlp([2, 5, 1], seed=1)
        x, y = xor_dataset(20, seed=2)
        exact = P.shapley_values(net, x, y, 0, exact=True)
        mc = P.shapley_values(net, x, y, 0, exact=False, samples=2000)
        assert np.allclose(mc, exact, atol=0.05 * np.abs(exact).max())

    def test_too_many_neurons(self):
        net = dynfit.build_mlp([2, 13, 1])
        x, y = xor_dataset(4)
        with pytest.raises(TooManyNeuronsForExact):
            P.shapley_values(net, x, y, 0, exact=True, max_exact=12)
        phis, ps = dynfit.shapley_probs(net, x, y, P.DropoutPolicy("shapley", mc_samples=4))
        assert ps[0].shape == (13,)


class TestTaylor:
    def test_hand(self):
        p = dynfit.probs_taylor(np.array([0.5, 2.0]), np.array([1.0, 1.0]), pol("taylor", 0.1))
        assert np.allclose(p, [0.2, 0.05], atol=1e-9)

    def test_large_impact(self):
        assert dynfit.probs_taylor(np.array([1e12]), np.array([1.0]), pol("taylor", 0.1))[0] < 1e-12

    def test_lambda_zero(self):
        assert not dynfit.probs_taylor(np.ones(3), np.ones(3), pol("taylor", 0.0)).any()

    def test_spatial_sum(self):
        a = np.ones((2, 3, 2, 2))
        g = np.full((2, 3, 2, 2), 0.5)
        assert P.taylor_impact(a, g).tolist() == [4.0, 4.0, 4.0]


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)), st.floats(0, 10), st.floats(0, 0.99))
def test_clamp_contract(v, scale, p_max):
    for p in (
        P.l2_probs(v[:, None], scale, 1e-8, p_max),
        P.obd_probs(v, scale, 0.0, p_max),
        P.fmre_probs(np.abs(v), scale, 0.0, p_max),
        P.sparse_probs(v, p_max),
        P.shapley_probs_from_phi(v, scale, 0.0, p_max),
        P.taylor_probs_from_impact(np.abs(v), scale, 0.0, p_max),
    ):
        assert p.shape == v.shape and np.all((p >= 0) & (p <= p_max))


@pytest.mark.parametrize("kind", [k.value for k in P.PolicyKind])
def test_compute_probs_all_kinds(kind):
    net = dynfit.build_mlp([2, 5, 4, 1], seed=0)
    x, y = xor_dataset(16)
    z = {i: np.zeros(net.layers[i].neurons) for i in net.maskable()}
    p = dynfit.compute_probs(net, x, y, P.DropoutPolicy(kind), z=z)
    assert set(p) == set(net.maskable())
    assert all(np.all((v >= 0) & (v <= 0.9)) for v in p.values())


def test_saliency_top1_agreement():
    """Taylor and OBD top-1 neurons mostly match brute-force leave-one-out.

    Both are local (first / second order) approximations, so agreement is
    checked as a rate over seeded trained networks rather than per network.
    Taylor is compared with masking the neuron, OBD with deleting its fan-in
    weights, the perturbation each approximates.
    """
    agree_t = agree_o = 0
    seeds = range(20)
    for seed in seeds:
        net = dynfit.build_mlp([2, 6, 1], seed=seed)
        x, y = xor_dataset(64, seed=seed)
        cfg = T.TrainConfig(steps=800, lr=0.1, loss="mse", policy="none", seed=seed, batch_size=16)
        net = T.train(net, (x, y), cfg).net
        base = net.loss(x, y)
        W = net.layers[0].params["W"]
        loo_mask, loo_weights = [], []
        for k in range(6):
            m = np.ones(6)
            m[k] = 0
            loo_mask.append(net.loss(x, y, masks={0: m}) - base)
            row = W[k].copy()
            W[k] = 0
            loo_weights.append(net.loss(x, y) - base)
            W[k] = row
        taylor = P.net_taylor_impacts(net, x, y)[0]
        obd = P.obd_sensitivity(W, dynfit.hessian_diag(net, x, y)[0])
        agree_t += np.argmax(taylor) == np.argmax(loo_mask)
        agree_o += np.argmax(obd) == np.argmax(loo_weights)
    assert agree_t >= 0.7 * len(seeds)
    assert agree_o >= 0.7 * len(seeds)


# -------------------------------------------------------------------- masks


class TestMasks:
    def test_extremes(self):
        ms = P.sample_mask(np.array([0.0, 1.0] * 50), 3)
        assert ms.m[::2].all() and not ms.m[1::2].any()

    def test_deterministic(self):
        p = np.linspace(0, 0.9, 20)
        assert np.array_equal(dynfit.sample_mask(p, 7).m, dynfit.sample_mask(p, 7).m)

    @pytest.mark.parametrize("p", [0.1, 0.3, 0.5])
    def test_keep_rate(self, p):
        n = 100_000
        draws = P.sample_masks(np.array([p]), 11, n)
        assert abs(draws.mean() - (1 - p)) <= P.keep_rate_bound(p, n)

    def test_bound_value(self):
        assert P.keep_rate_bound(0.3, 100_000) == pytest.approx(0.0043, abs=1e-4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            dynfit.sample_mask(np.array([1.2]), 0)


# ------------------------------------------------------------- quantization


class TestQuantPenalty:
    def test_hand(self):
        assert dynfit.quant_penalty_loss(1.0, T.QuantAssignment([8, 4], 1.0, 0.01)) == pytest.approx(1.12)

    def test_lambda_zero(self):
        assert dynfit.quant_penalty_loss(0.7, T.QuantAssignment([8, 4], 1.0, 0.0)) == 0.7

    def test_three_at_16(self):
        assert dynfit.quant_penalty_loss(2.0, T.QuantAssignment([16] * 3, 1.0, 0.1)) == pytest.approx(6.8)

    def test_invalid_bits(self):
        with pytest.raises(InvalidBitWidth):
            T.QuantAssignment([7])

    def test_optimize_bits_never_worse(self):
        net = dynfit.build_mlp([2, 6, 1], seed=0)
        x, y = xor_dataset(32)
        q0 = T.QuantAssignment.uniform(net, 16, lam=0.01)
        q1 = T.optimize_bits(net, x, y, q0)
        before = dynfit.quant_penalty_loss(net.loss(x, y, quant=q0), q0)
        after = dynfit.quant_penalty_loss(net.loss(x, y, quant=q1), q1)
        assert after <= before and q1.q.sum() < q0.q.sum()


# ----------------------------------------------------------------- training


def mlp_step_fixture(seed=0):
    net = dynfit.build_mlp([2, 6, 5, 1], seed=seed)
    x, y = xor_dataset(32, seed=seed)
    return net, (x, y)


class TestTrainStep:
    def test_all_zero_mask_layer_frozen(self):
        net, batch = mlp_step_fixture()
        tr = T.UpdateTracker.for_network(net)
        before = {k: a.copy() for k, a in ((k[:2], k[2]) for k in net.param_items())}
        masks = {0: np.zeros(6, dtype=np.int8), 1: np.ones(5, dtype=np.int8)}
        net, tr, _ = T.train_step(net, batch, P.DropoutPolicy("none"), tracker=tr, lr=0.1, masks=masks)
        assert np.array_equal(net.layers[0].params["W"], before[(0, "W")])
        assert np.array_equal(net.layers[0].params["b"], before[(0, "b")])
        assert not tr.U[(0, "W")].any() and not tr.U[(0, "b")].any()
        # layer 1 sees all-zero inputs, so only its bias can move
        assert tr.U[(1, "b")].any()

    def test_identity_configuration_is_sgd(self):
        net, batch = mlp_step_fixture(1)
        ref = net.copy()
        _, grads = ref.loss_and_grads(*batch)
        q = T.QuantAssignment.uniform(net, 16)
        T.train_step(net, batch, P.DropoutPolicy("none"), q, lr=0.05)
        for i, name, a in ref.param_items():
            expect = a - 0.05 * grads[(i, name)]
            assert np.allclose(net.layers[i].params[name], expect, atol=1e-3 * 0.05)

    @pytest.mark.parametrize("kind", [k.value for k in P.PolicyKind])
    def test_xor_loss_decreases(self, kind):
        net = dynfit.build_mlp([2, 8, 1], seed=0)
        data = xor_dataset(64, seed=0)
        initial = net.loss(*data)
        cfg = T.TrainConfig(steps=500, lr=0.1, loss="mse", policy=kind, batch_size=16, refresh_every=25, mc_samples=8)
        res = T.train(net, data, cfg)
        assert res.net.loss(*data) < initial

    def test_energy_context_replans(self):
        net, batch = mlp_step_fixture()
        ctx = T.EnergyContext(builtin_profile("synthetic_mid"), 5.0)
        masks = {0: np.array([1, 0, 1, 0, 1, 1]), 1: np.ones(5)}
        _, _, m = T.train_step(net, batch, P.DropoutPolicy("none"), energy_context=ctx, masks=masks)
        assert sum(m["quanta"][0]) == 4 and sum(m["quanta"][2]) == 1
        assert m["energy_uj"] > 0

    def test_non_finite_loss(self):
        net, (x, y) = mlp_step_fixture()
        with pytest.raises(NonFiniteLoss):
            T.train_step(net, (x, np.full_like(y, np.nan)), P.DropoutPolicy("none"))

    def test_sparse_mask_learns_gates(self):
        net, batch = mlp_step_fixture()
        z = {i: np.full(net.layers[i].neurons, 2.0) for i in net.maskable()}
        z0 = {i: v.copy() for i, v in z.items()}
        T.train_step(net, batch, P.DropoutPolicy("sparse_mask", sparsity=0.5), z=z, lr=0.5)
        assert any(not np.array_equal(z[i], z0[i]) for i in z)


def test_masked_update_safety_fuzz():
    rng = np.random.default_rng(99)
    for trial in range(100):
        net = dynfit.build_mlp([3, int(rng.integers(2, 7)), int(rng.integers(2, 6)), 2], seed=trial)
        x, y = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
        kind = str(rng.choice(["l2", "static", "taylor", "fmre"]))
        policy = P.DropoutPolicy(kind, scale=float(rng.uniform(0.1, 0.6)), seed=trial)
        quant = T.QuantAssignment.uniform(net, int(rng.choice([16, 12, 8, 4])))
        before = {(i, n): a.copy() for i, n, a in net.param_items()}
        tr = T.UpdateTracker.for_network(net)
        net, tr, m = T.train_step(net, (x, y), policy, quant, tracker=tr, lr=0.1, step=trial)
        for i, name, a in net.param_items():
            changed = a != before[(i, name)]
            assert np.array_equal(tr.U[(i, name)], changed.astype(np.int64))
            if i in m["masks"]:
                dropped = np.asarray(m["masks"][i]) == 0
                assert not changed[dropped].any()


def test_masked_update_safety_exact_rows():
    """Rows of dropped neurons stay bit-identical, row by row."""
    rng = np.random.default_rng(5)
    for trial in range(30):
        net = dynfit.build_mlp([3, 6, 4, 2], seed=trial)
        masks = {0: rng.integers(0, 2, 6), 1: rng.integers(0, 2, 4)}
        before = {(i, n): a.copy() for i, n, a in net.param_items()}
        T.train_step(net, (rng.normal(size=(5, 3)), rng.normal(size=(5, 2))), P.DropoutPolicy("none"), masks=masks, lr=0.2)
        for i in (0, 1):
            for name in ("W", "b"):
                dropped = masks[i] == 0
                assert np.array_equal(net.layers[i].params[name][dropped], before[(i, name)][dropped])


# ------------------------------------------------------------ update ratio


class TestUpdateRatio:
    def tracker(self, u, t, theta):
        return T.UpdateTracker({(0, "W"): np.array(u, dtype=np.int64)}, t, theta)

    def test_hand(self):
        tr = self.tracker([7], 10, 0.8)
        assert dynfit.update_ratio(tr)[(0, "W")][0] == pytest.approx(0.7)
        assert dynfit.select_undertrained(tr)[(0, "W")][0]

    def test_always_updated(self):
        for theta in (0.1, 0.5, 1.0):
            assert not dynfit.select_undertrained(self.tracker([10], 10, theta))[(0, "W")].any()

    def test_theta_zero(self):
        assert not dynfit.select_undertrained(self.tracker([0, 3], 10, 0.0))[(0, "W")].any()

    def test_zero_iterations(self):
        with pytest.raises(ZeroIterations):
            dynfit.update_ratio(self.tracker([0], 0, 0.5))


class TestFinetune:
    def trained(self, steps=40, seed=0, theta=0.5):
        net = dynfit.build_mlp([2, 6, 1], seed=seed)
        data = xor_dataset(32, seed=seed)
        cfg = T.TrainConfig(steps=steps, lr=0.1, loss="mse", policy="static", static_p=0.6, seed=seed, theta=theta)
        res = T.train(net, data, cfg)
        return res.net, res.tracker, data

    def test_empty_set_unchanged(self):
        net, tr, data = self.trained()
        tr.theta = 0.0
        before = net.get_flat().copy()
        dynfit.finetune(net, tr, data, 5)
        assert np.array_equal(net.get_flat(), before)

    def test_one_undertrained_weight(self):
        net = dynfit.build_mlp([2, 3, 1], seed=0)
        tr = T.UpdateTracker.for_network(net, theta=0.5)
        tr.T = 10
        for k in tr.U:
            tr.U[k][...] = 10
        tr.U[(0, "W")][1, 0] = 2
        before = net.get_flat().copy()
        x, y = xor_dataset(32)
        dynfit.finetune(net, tr, (x, y), 20, lr=0.05, batch_size=8)
        assert dynfit.update_ratio(tr)[(0, "W")][1, 0] >= 0.5
        changed = net.get_flat() != before
        assert changed.sum() == 1

    def test_contract(self):
        net, tr, data = self.trained(seed=3, theta=0.6)
        sel = dynfit.select_undertrained(tr)
        assert any(s.any() for s in sel.values())
        frozen = {k: net.layers[k[0]].params[k[1]][~s].copy() for k, s in sel.items()}
        dynfit.finetune(net, tr, data, 50, lr=0.05)
        ratios = dynfit.update_ratio(tr)
        assert all(np.all(r >= tr.theta) for r in ratios.values()) or tr.last_finetune_epochs == 50
        for k, s in sel.items():
            assert np.array_equal(net.layers[k[0]].params[k[1]][~s], frozen[k])
        assert all(np.all(u <= tr.T) for u in tr.U.values())


def test_training_deterministic():
    def run():
        net = dynfit.build_cnn(convs=((4, 3, 3), (4, 3, 3)), seed=1)
        data = shapes_dataset(64, seed=2)
        cfg = T.TrainConfig(steps=30, lr=0.05, policy="taylor", seed=4, quant_every=10, finetune_epochs=2)
        return T.train(net, data, cfg)

    a, b = run(), run()
    assert np.array_equal(a.net.get_flat(), b.net.get_flat())
    assert np.array_equal(a.quant.q, b.quant.q)
    assert a.history == b.history


# ------------------------------------------------------------------ files


class TestModelIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        layers = [Conv2D(1, 3, 3, 2, rng=rng), DWSConv2D(3, 4, 2, 2, rng=rng), AvgPool(), Dense(4, 2, rng=rng)]
        net = Network(layers, (1, 7, 6), "ce")
        q = T.QuantAssignment.uniform(net, 8)
        q.q[0] = 4
        z = {0: np.array([0.5, -1.0, 2.0])}
        dynfit.save_model(net, tmp_path / "m.json", q, z)
        net2, q2, z2 = dynfit.load_model(tmp_path / "m.json")
        x = rng.normal(size=(2, 1, 7, 6))
        # weights are stored as f32
        assert np.allclose(net2.forward(x, quant=q2), net.forward(x, quant=q), atol=1e-5)
        assert np.array_equal(q2.q, q.q)
        assert np.allclose(z2[0], z[0])
        for (_, _, a), (_, _, b) in zip(net.param_items(), net2.param_items()):
            assert np.array_equal(a.astype(np.float32), b)

    def test_bad_file(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(ParseError):
            dynfit.load_model(tmp_path / "m.json")

    def test_config_round_trip(self):
        cfg = T.TrainConfig(steps=7, policy="obd", beta=0.2)
        assert dynfit.config_from_dict(dynfit.config_to_dict(cfg)) == cfg

    def test_config_unknown_key(self):
        with pytest.raises(ConfigValidation):
            dynfit.config_from_dict({"stepz": 3})
