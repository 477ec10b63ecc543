import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frwreid.errors import ContractError, DimensionError
from frwreid.losses import (
    CenterTable,
    LossConfig,
    SoftmaxHead,
    VerificationHead,
    binary_verification_loss,
    center_loss,
    fold_frw_into_softmax,
    frw_constraint,
    identification_loss,
    objective,
    total_loss,
    update_centers,
)
from frwreid.tensor import Tensor, backward, check_parameter_gradients, finite_diff_check


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def head_with(W, b):
    h = SoftmaxHead(len(W), len(b), dtype=np.float64)
    h.W.data[...] = W
    h.b.data[...] = b
    return h


class TestIdentificationLoss:
    def test_single_class_is_zero(self, rng):
        h = SoftmaxHead(3, 1, rng, np.float64)
        assert identification_loss(h, t64(rng.normal(size=(4, 3))), [0, 0, 0, 0]).item() == 0.0

    def test_uniform_logits(self, rng):
        h = head_with(np.zeros((3, 4)), np.zeros(4))
        loss = identification_loss(h, t64(rng.normal(size=(5, 3))), [0, 1, 2, 3, 0])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)
        assert loss.item() == pytest.approx(1.38629, abs=1e-5)

    def test_two_class_value(self):
        # logits (2, 0) from x = (1,), W = [[2, 0]], b = 0
        h = head_with(np.array([[2.0, 0.0]]), np.zeros(2))
        loss = identification_loss(h, t64([[1.0]]), [0])
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
        assert loss.item() == pytest.approx(0.12693, abs=1e-5)

    def test_label_out_of_range(self, rng):
        h = SoftmaxHead(2, 3, rng, np.float64)
        with pytest.raises(ContractError):
            identification_loss(h, t64(np.ones((1, 2))), [3])

    def test_stable_for_large_logits(self):
        h = head_with(np.array([[1000.0, 0.0]]), np.zeros(2))
        assert np.isfinite(identification_loss(h, t64([[1.0]]), [1]).item())

    def test_gradients(self, rng):
        h = SoftmaxHead(4, 5, rng, np.float64, init_std=1.0)
        h.b.data[:] = rng.normal(size=5)
        x = t64(rng.normal(size=(6, 4)), True)
        y = rng.integers(0, 5, 6)
        errs = check_parameter_gradients(lambda: identification_loss(h, x, y), [x, h.W, h.b])
        assert max(errs.values()) < 1e-4


class TestCenterLoss:
    def test_zero_at_centers(self, rng):
        table = CenterTable(3, 2, dtype=np.float64)
        table.centers.data[:] = rng.normal(size=(3, 2))
        y = np.array([0, 2, 2])
        assert center_loss(table, t64(table.centers.data[y]), y).item() == 0.0

    def test_value(self):
        table = CenterTable(1, 2, dtype=np.float64)
        assert center_loss(table, t64([[1.0, 0.0]]), [0]).item() == 0.5

    def test_gradient_formula(self, rng):
        table = CenterTable(3, 4, dtype=np.float64)
        table.centers.data[:] = rng.normal(size=(3, 4))
        x = t64(rng.normal(size=(5, 4)), True)
        y = np.array([0, 1, 1, 2, 0])
        backward(center_loss(table, x, y))
        np.testing.assert_allclose(x.grad, (x.data - table.centers.data[y]) / 5)
        assert table.centers.grad is None
        assert finite_diff_check(lambda v: center_loss(table, v, y), x) < 1e-4

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            center_loss(CenterTable(2, 3), t64(np.ones((1, 2))), [0])


def brute_force_center_update(centers, x, y, alpha):
    """Literal per-class evaluation of the update rule."""
    new = centers.copy()
    for j in range(len(centers)):
        numerator = np.zeros(centers.shape[1])
        count = 0
        for i in range(len(y)):
            if y[i] == j:
                numerator = numerator + (centers[j] - x[i])
                count += 1
        new[j] = centers[j] - alpha * (numerator / (1 + count))
    return new


class TestUpdateCenters:
    def test_absent_class_unchanged(self, rng):
        table = CenterTable(3, 2, dtype=np.float64)
        table.centers.data[:] = rng.normal(size=(3, 2))
        before = table.centers.data.copy()
        update_centers(table, rng.normal(size=(2, 2)), [0, 0])
        np.testing.assert_array_equal(table.centers.data[1:], before[1:])

    def test_single_sample(self, rng):
        table = CenterTable(1, 3, alpha=0.5, dtype=np.float64)
        c = rng.normal(size=3)
        table.centers.data[0] = c
        x = rng.normal(size=(1, 3))
        update_centers(table, x, [0])
        np.testing.assert_allclose(table.centers.data[0], c - 0.25 * (c - x[0]))

    def test_two_samples(self, rng):
        table = CenterTable(1, 3, alpha=1.0, dtype=np.float64)
        c = rng.normal(size=3)
        table.centers.data[0] = c
        x = rng.normal(size=(2, 3))
        delta = update_centers(table, x, [0, 0])
        np.testing.assert_allclose(delta[0], (2 * c - x[0] - x[1]) / 3)

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            N, D, M = rng.integers(1, 10), rng.integers(1, 6), rng.integers(1, 32)
            table = CenterTable(N, D, alpha=float(rng.uniform(0.05, 1.0)), dtype=np.float64)
            table.centers.data[:] = rng.normal(size=(N, D))
            x, y = rng.normal(size=(M, D)), rng.integers(0, N, M)
            expected = brute_force_center_update(table.centers.data, x, y, table.alpha)
            update_centers(table, x, y)
            np.testing.assert_array_equal(table.centers.data, expected)

    def test_alpha_range(self):
        with pytest.raises(ContractError):
            CenterTable(2, 2, alpha=0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 1.0), st.integers(1, 8), st.integers(0, 10 ** 6))
    def test_contraction_toward_batch_mean(self, alpha, M, seed):
        r = np.random.default_rng(seed)
        table = CenterTable(1, 3, alpha=alpha, dtype=np.float64)
        table.centers.data[0] = r.normal(size=3) * 5
        x = r.normal(size=(M, 3))
        target = x.mean(0)
        before = np.linalg.norm(table.centers.data[0] - target)
        update_centers(table, x, np.zeros(M, dtype=int))
        assert np.linalg.norm(table.centers.data[0] - target) <= before + 1e-12

    def test_fixed_batch_converges_geometrically(self, rng):
        table = CenterTable(2, 4, alpha=0.5, dtype=np.float64)
        x, y = rng.normal(size=(6, 4)), np.array([0, 0, 1, 1, 1, 0])
        norms = [np.abs(update_centers(table, x, y)).max() for _ in range(60)]
        assert norms[-1] < 1e-12
        ratios = np.array(norms[1:20]) / np.array(norms[:19])
        assert np.all(ratios < 1)


class TestFRWConstraint:
    def test_satisfied(self):
        w = t64(np.full(8, 5.0))  # 0.5 * 8 * 25 = 100
        assert frw_constraint(w, LossConfig(beta=0.001, C=100.0)).item() == 0.0

    def test_zero_weights(self):
        assert frw_constraint(t64(np.zeros(4)), LossConfig(beta=0.001, C=200.0)).item() == pytest.approx(40.0)

    def test_gradient(self, rng):
        cfg = LossConfig(beta=0.001, C=200.0)
        w = t64(rng.normal(size=6) * 3, True)
        backward(frw_constraint(w, cfg))
        gap = 0.5 * np.sum(w.data ** 2) - cfg.C
        np.testing.assert_allclose(w.grad, 2 * cfg.beta * gap * w.data)
        assert finite_diff_check(lambda v: frw_constraint(v, cfg), w) < 1e-4

    def test_invalid_config(self):
        with pytest.raises(ContractError):
            LossConfig(C=0.0)


class TestTotalLoss:
    def setup_parts(self, rng, N=4, D=3, M=5):
        head = SoftmaxHead(D, N, rng, np.float64, init_std=0.5)
        table = CenterTable(N, D, dtype=np.float64)
        table.centers.data[:] = rng.normal(size=(N, D))
        w = t64(rng.normal(size=D) * 2, True)
        x = t64(rng.normal(size=(M, D)), True)
        y = rng.integers(0, N, M)
        return head, table, w, x, y

    def test_degenerate_equals_identification(self, rng):
        head, table, _, x, y = self.setup_parts(rng)
        cfg = LossConfig(lam=0.0)
        assert total_loss(head, table, None, x, y, cfg).item() == identification_loss(head, x, y).item()

    def test_combination(self, rng):
        head, table, w, x, y = self.setup_parts(rng)
        cfg = LossConfig(lam=0.01, beta=0.001, C=2.0)
        li = identification_loss(head, x, y).item()
        lc = center_loss(table, x, y).item()
        lf = frw_constraint(w, cfg).item()
        assert total_loss(head, table, w, x, y, cfg).item() == pytest.approx(li + 0.01 * lc + lf, rel=1e-12)

    def test_arithmetic_of_components(self):
        assert 1.0 + 0.01 * 2.0 + 3.0 == pytest.approx(4.02)

    def test_centers_have_no_gradient(self, rng):
        head, table, w, x, y = self.setup_parts(rng)
        backward(total_loss(head, table, w, x, y, LossConfig()))
        assert table.centers.grad is None
        assert not table.centers.requires_grad

    def test_gradients_all_parameters(self, rng):
        head, table, w, x, y = self.setup_parts(rng)
        cfg = LossConfig(lam=0.3, beta=0.01, C=2.0)
        errs = check_parameter_gradients(lambda: total_loss(head, table, w, x, y, cfg), [x, w, head.W, head.b])
        assert max(errs.values()) < 1e-4

    def test_disabled_components_reported_not_differentiated(self, rng):
        head, table, w, x, y = self.setup_parts(rng)
        cfg = LossConfig(lam=0.5, beta=0.01, C=2.0)
        loss, parts = objective(head, table, w, x, y, cfg, use_center=False, use_frw=False)
        assert parts["L_C"] > 0 and parts["L_F"] > 0
        assert loss.item() == pytest.approx(parts["L_I"])
        backward(loss)
        assert w.grad is None


class TestVerificationLoss:
    def test_zero_head_is_ln2(self, rng):
        head = VerificationHead(3, dtype=np.float64, init_std=0.0)
        x1, x2 = t64(rng.normal(size=(4, 3))), t64(rng.normal(size=(4, 3)))
        assert binary_verification_loss(x1, x2, [0, 1, 1, 0], head).item() == pytest.approx(math.log(2))

    def test_same_bias_limit(self, rng):
        head = VerificationHead(3, dtype=np.float64, init_std=0.0)
        x = t64(rng.normal(size=(3, 3)))
        losses = []
        for bias in (1.0, 5.0, 20.0):
            head.b.data[:] = [0.0, bias]
            losses.append(binary_verification_loss(x, x, [1, 1, 1], head).item())
        assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-8

    def test_gradients(self, rng):
        head = VerificationHead(3, rng, np.float64, init_std=1.0)
        x1, x2 = t64(rng.normal(size=(4, 3)), True), t64(rng.normal(size=(4, 3)), True)
        same = [1, 0, 1, 0]
        errs = check_parameter_gradients(lambda: binary_verification_loss(x1, x2, same, head),
                                         [x1, x2, head.W, head.b])
        assert max(errs.values()) < 1e-4

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            binary_verification_loss(t64(np.ones((2, 3))), t64(np.ones((2, 2))), [0, 1], VerificationHead(3))


class TestFold:
    def test_ones_unchanged(self, rng):
        head = SoftmaxHead(4, 3, rng, np.float64)
        folded = fold_frw_into_softmax(head, t64(np.ones(4)))
        np.testing.assert_array_equal(folded.W.data, head.W.data)

    def test_logits_identity_and_bias(self, rng):
        head = SoftmaxHead(5, 7, rng, np.float64, init_std=1.0)
        head.b.data[:] = rng.normal(size=7)
        w = t64(rng.normal(size=5))
        x = t64(rng.normal(size=(9, 5)))
        folded = fold_frw_into_softmax(head, w)
        via_frw = head.logits(t64(x.data * w.data)).data
        assert np.max(np.abs(folded.logits(x).data - via_frw)) < 1e-10
        np.testing.assert_array_equal(folded.b.data, head.b.data)

    def test_mismatch(self, rng):
        with pytest.raises(DimensionError):
            fold_frw_into_softmax(SoftmaxHead(4, 3, rng), t64(np.ones(3)))
