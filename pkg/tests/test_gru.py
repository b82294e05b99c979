import math

import numpy as np
import pytest

from hareid import autodiff as ad
from hareid.errors import ShapeError
from hareid.gru import (ClassifierHead, GruParams, LossReport, classify, gru_step,
                        hierarchical_loss, unroll)


def zero_params(d, h):
    p = GruParams.init(d, h, np.random.default_rng(0))
    for t in p.named().values():
        t.data[:] = 0.0
    return p


def scalar_params(weight=1.0):
    p = zero_params(1, 1)
    for name, t in p.named().items():
        if name.startswith("gru.w"):
            t.data[:] = weight
    return p


def scalar_step_oracle(x, h_prev):
    # Hand evaluation of the H = D = 1, all-weights-one, zero-bias cell.
    z = 1.0 / (1.0 + math.exp(-(x + h_prev)))
    r = z
    n = math.tanh(x + r * h_prev)
    return (1.0 - z) * n + z * h_prev, z, r, n


class TestGruStep:
    def test_zero_parameters(self):
        p = zero_params(3, 4)
        v = np.array([0.3, -1.0, 2.0, 0.5])
        state = gru_step(ad.constant([1.0, 2.0, 3.0]), ad.constant(v), p)
        np.testing.assert_allclose(state.z.data, 0.5, atol=1e-15)
        np.testing.assert_allclose(state.r.data, 0.5, atol=1e-15)
        np.testing.assert_allclose(state.n.data, 0.0, atol=1e-15)
        np.testing.assert_allclose(state.h.data, 0.5 * v, atol=1e-15)

    def test_scalar_hand_case(self):
        state = gru_step(ad.constant([1.0]), ad.constant([0.0]), scalar_params())
        h, z, r, n = scalar_step_oracle(1.0, 0.0)
        assert z == pytest.approx(0.731059, abs=1e-6)
        assert n == pytest.approx(0.761594, abs=1e-6)
        # (1 - 0.731059) * 0.761594
        assert h == pytest.approx(0.204824, abs=1e-6)
        assert state.z.item() == pytest.approx(z, abs=1e-12)
        assert state.r.item() == pytest.approx(r, abs=1e-12)
        assert state.n.item() == pytest.approx(n, abs=1e-12)
        assert state.h.item() == pytest.approx(h, abs=1e-12)

    def test_saturated_update_gate_keeps_state(self):
        p = zero_params(2, 3)
        p.b_z.data[:] = 50.0
        h_prev = np.array([0.7, -0.2, 1.4])
        state = gru_step(ad.constant([5.0, -3.0]), ad.constant(h_prev), p)
        np.testing.assert_allclose(state.h.data, h_prev, atol=1e-9)

    def test_dimension_mismatch(self):
        p = GruParams.init(3, 4, np.random.default_rng(1))
        with pytest.raises(ShapeError):
            gru_step(ad.constant([1.0, 2.0]), ad.constant(np.zeros(4)), p)
        with pytest.raises(ShapeError):
            gru_step(ad.constant(np.zeros(3)), ad.constant(np.zeros(5)), p)

    def test_gate_ranges_and_convex_combination(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            p = GruParams.init(4, 6, rng)
            for t in p.named().values():
                t.data[:] = rng.uniform(-2, 2, size=t.shape)
            x = ad.constant(rng.uniform(-2, 2, size=4))
            h_prev = rng.uniform(-2, 2, size=6)
            s = gru_step(x, ad.constant(h_prev), p)
            assert np.all((s.z.data > 0) & (s.z.data < 1))
            assert np.all((s.r.data > 0) & (s.r.data < 1))
            assert np.all((s.n.data > -1) & (s.n.data < 1))
            lo = np.minimum(s.n.data, h_prev)
            hi = np.maximum(s.n.data, h_prev)
            assert np.all(s.h.data >= lo - 1e-12) and np.all(s.h.data <= hi + 1e-12)
            assert np.max(np.abs(s.h.data)) <= max(np.max(np.abs(h_prev)), 1.0)


class TestClassify:
    def test_zero_head(self):
        head = ClassifierHead.init(3, 4, np.random.default_rng(3))
        head.w.data[:] = 0.0
        np.testing.assert_array_equal(classify(ad.constant(np.ones(4)), head).data, np.zeros(3))

    def test_identity_head(self):
        head = ClassifierHead.init(3, 3, np.random.default_rng(4))
        head.w.data[:] = np.eye(3)
        head.b.data[:] = 0.0
        o = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(classify(ad.constant(o), head).data, o)

    def test_hand_value(self):
        head = ClassifierHead.init(1, 2, np.random.default_rng(5))
        head.w.data[:] = [[1.0, 1.0]]
        head.b.data[:] = [1.0]
        assert classify(ad.constant([2.0, 3.0]), head).data[0] == 6.0


class TestHierarchicalLoss:
    def test_uniform_logits(self):
        total, report = hierarchical_loss(ad.constant(np.zeros(10)), 0,
                                          ad.constant(np.zeros(100)), 0)
        expected = math.log(10.0) + math.log(100.0)
        assert total.item() == pytest.approx(expected, abs=1e-12)
        assert total.item() == pytest.approx(6.907755, abs=1e-6)
        assert report.total == total.item()

    def test_confident_logits(self):
        zm = np.zeros(5)
        zm[2] = 100.0
        zv = np.zeros(8)
        zv[7] = 100.0
        total, _ = hierarchical_loss(ad.constant(zm), 2, ad.constant(zv), 7)
        assert 0.0 <= total.item() < 1e-6

    def test_sum_definition(self):
        report = LossReport.from_branches(0.3, 0.7)
        assert report.total == 1.0

    def test_total_is_branch_sum_bit_exact(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            lm = ad.constant(rng.uniform(-3, 3, size=7))
            lv = ad.constant(rng.uniform(-3, 3, size=13))
            total, report = hierarchical_loss(lm, int(rng.integers(7)), lv, int(rng.integers(13)))
            assert report.total == report.model + report.vehicle
            assert total.item() == report.total

    def test_mean_preserves_identity(self):
        rng = np.random.default_rng(7)
        reports = [LossReport.from_branches(rng.uniform(0, 2), rng.uniform(0, 2))
                   for _ in range(9)]
        mean = LossReport.mean(reports)
        assert mean.total == mean.model + mean.vehicle

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            hierarchical_loss(ad.constant(np.zeros(3)), 3, ad.constant(np.zeros(3)), 0)


class TestUnroll:
    def test_zero_parameters_give_zero_outputs(self):
        p = zero_params(3, 3)
        o1, o2, _ = unroll(ad.constant([1.0, -2.0, 0.5]), p, lambda o: ad.constant([4.0, 4.0, 4.0]))
        np.testing.assert_allclose(o1.data, 0.0, atol=1e-15)
        np.testing.assert_allclose(o2.data, 0.0, atol=1e-15)

    def test_scalar_two_step_hand_case(self):
        x1 = ad.constant([1.0])
        o1, o2, states = unroll(x1, scalar_params(), lambda o: x1)
        h1, *_ = scalar_step_oracle(1.0, 0.0)
        h2, z2, r2, n2 = scalar_step_oracle(1.0, h1)
        assert o1.item() == pytest.approx(h1, abs=1e-12)
        assert o2.item() == pytest.approx(h2, abs=1e-12)
        assert states[1].z.item() == pytest.approx(z2, abs=1e-12)
        assert states[1].n.item() == pytest.approx(n2, abs=1e-12)

    def test_provider_dimension_checked(self):
        p = GruParams.init(3, 4, np.random.default_rng(8))
        with pytest.raises(ShapeError):
            unroll(ad.constant(np.zeros(3)), p, lambda o: ad.constant(np.zeros(2)))

    def test_shared_weights_receive_gradient_from_both_branches(self):
        rng = np.random.default_rng(9)
        p = GruParams.init(3, 4, rng)
        heads = [ClassifierHead.init(2, 4, rng), ClassifierHead.init(5, 4, rng)]
        x1 = ad.constant(rng.uniform(-1, 1, size=3))
        x2 = ad.constant(rng.uniform(-1, 1, size=3))

        def branch_grad(branch, h0=None):
            for t in p.named().values():
                t.zero_grad()
            o1, o2, _ = unroll(x1, p, lambda o: x2, h0=h0)
            target = classify(o1, heads[0]) if branch == "model" else classify(o2, heads[1])
            ad.backward(ad.softmax_cross_entropy(target, 1))
            return {k: (None if t.grad is None else t.grad.copy())
                    for k, t in p.named().items()}

        g_model = branch_grad("model")
        g_vehicle = branch_grad("vehicle")
        # At t=1 the zero initial state silences the hidden-side matrices and,
        # because r only acts on W_hg @ h0, the whole reset-gate group.
        inert_at_t1 = ("gru.w_hz", "gru.w_hr", "gru.w_hg", "gru.w_xr", "gru.b_r")
        for name in g_model:
            # The fine branch reaches every shared weight through step 2.
            assert g_vehicle[name] is not None and np.any(g_vehicle[name] != 0), name
            if name in inert_at_t1:
                assert g_model[name] is None or not np.any(g_model[name]), name
            else:
                assert g_model[name] is not None and np.any(g_model[name] != 0), name

        # With a nonzero starting state the coarse branch reaches everything.
        g_model_h0 = branch_grad("model", h0=ad.constant(rng.uniform(0.5, 1.0, size=4)))
        for name in g_model_h0:
            assert g_model_h0[name] is not None and np.any(g_model_h0[name] != 0), name

    def test_grad_check_through_unroll_and_loss(self):
        rng = np.random.default_rng(10)
        p = GruParams.init(3, 4, rng)
        head_m = ClassifierHead.init(2, 4, rng)
        head_v = ClassifierHead.init(5, 4, rng)
        x1 = ad.constant(rng.uniform(-1, 1, size=3))
        x2 = ad.constant(rng.uniform(-1, 1, size=3))

        def f():
            o1, o2, _ = unroll(x1, p, lambda o: x2)
            total, _ = hierarchical_loss(classify(o1, head_m), 0, classify(o2, head_v), 4)
            return total

        named = {**p.named(), **head_m.named("hm"), **head_v.named("hv")}
        errors = ad.grad_check_groups(f, named)
        assert max(errors.values()) < 1e-4
