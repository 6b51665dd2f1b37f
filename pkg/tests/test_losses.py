import numpy as np
import pytest

from calfat.losses import (
    ClassPrior,
    cce_loss,
    ce_loss,
    ckl_loss,
    kl_loss,
    softmax,
    trades_loss,
)

from conftest import central_diff_array, max_rel_err


def entropy(p):
    return float(-(p * np.log(p)).sum())


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)

    def test_shift_invariance(self, rng):
        z = rng.normal(size=6)
        assert np.max(np.abs(softmax(z + 17.3) - softmax(z))) < 1e-12

    def test_exact_rational_case(self):
        assert np.allclose(softmax(np.array([np.log(2.0), 0.0])), [2 / 3, 1 / 3], atol=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax(np.array([np.nan, 0.0]))

    def test_normalized_and_positive(self, rng):
        p = softmax(rng.normal(scale=30, size=(8, 5)))
        assert np.all(p > 0)
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12


class TestCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        for C in (2, 5, 11):
            lv = ce_loss(np.full(C, 3.7), 1)
            assert abs(float(lv.loss) - np.log(C)) < 1e-12

    def test_saturated_case(self):
        assert float(ce_loss(np.array([30.0, -30.0]), 0).loss) < 1e-12

    def test_gradient_matches_finite_differences(self, rng):
        z = rng.normal(size=(4, 5))
        y = rng.integers(0, 5, size=4)
        lv = ce_loss(z, y)
        fd = central_diff_array(lambda zz: float(ce_loss(zz, y).loss.sum()), z)
        assert max_rel_err(lv.dlogits, fd) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            ce_loss(np.zeros(3), 3)


class TestClassPrior:
    def test_from_counts(self):
        prior = ClassPrior.from_counts(np.array([9, 1]), 0.01)
        assert np.allclose(prior.pi, [0.91, 0.11], atol=1e-15)

    def test_entries_at_least_delta_and_sum(self):
        prior = ClassPrior.from_counts(np.array([5, 0, 3]), 0.02)
        assert np.all(prior.pi >= 0.02)
        assert abs(float(np.sum(prior.pi - 0.02)) - 1.0) < 1e-12

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError):
            ClassPrior.from_counts(np.array([1, 1]), 0.0)

    def test_rejects_bad_vector(self):
        with pytest.raises(ValueError):
            ClassPrior(np.array([0.5, 0.2]), 0.01)  # frequencies don't sum to 1


class TestCalibratedCrossEntropy:
    def test_uniform_prior_reduces_to_ce_exactly(self, rng):
        prior = ClassPrior.uniform(4, 0.01)
        z = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, size=6)
        a = cce_loss(z, y, prior)
        b = ce_loss(z, y)
        assert np.array_equal(a.loss, b.loss)
        assert np.array_equal(a.dlogits, b.dlogits)

    def test_worked_example(self):
        # counts [9, 1] of 10 with delta 0.01: loss = log(1.02 / 0.91)
        prior = ClassPrior.from_counts(np.array([9, 1]), 0.01)
        lv = cce_loss(np.zeros(2), 0, prior)
        assert abs(float(lv.loss) - np.log(1.02 / 0.91)) < 1e-12

    def test_gradient_matches_finite_differences(self, rng):
        prior = ClassPrior.from_counts(np.array([3, 1, 6]), 0.01)
        z = rng.normal(size=(4, 3))
        y = rng.integers(0, 3, size=4)
        lv = cce_loss(z, y, prior)
        fd = central_diff_array(lambda zz: float(cce_loss(zz, y, prior).loss.sum()), z)
        assert max_rel_err(lv.dlogits, fd) < 1e-6

    def test_prior_size_mismatch(self):
        with pytest.raises(ValueError):
            cce_loss(np.zeros(3), 0, ClassPrior.uniform(4, 0.01))


class TestCalibratedDivergence:
    def test_equal_logits_hit_entropy_floor(self, rng):
        prior = ClassPrior.from_counts(np.array([7, 2, 1]), 0.01)
        z = rng.normal(size=3)
        lv = ckl_loss(z, z, prior)
        p = softmax(z + prior.log_adjust)
        assert abs(float(lv.loss) - entropy(p)) < 1e-12
        # cross-entropy >= entropy for any adversarial logits (Gibbs)
        for _ in range(25):
            other = ckl_loss(rng.normal(scale=3, size=3), z, prior)
            assert float(other.loss) >= entropy(p) - 1e-12

    def test_uniform_prior_reduces_to_plain_divergence(self, rng):
        prior = ClassPrior.uniform(5, 0.01)
        za, zn = rng.normal(size=5), rng.normal(size=5)
        a = ckl_loss(za, zn, prior)
        b = kl_loss(za, zn)
        assert abs(float(a.loss) - float(b.loss)) < 1e-12
        plain = -(softmax(zn) * np.log(softmax(za))).sum()
        assert abs(float(a.loss) - plain) < 1e-12

    def test_gradient_matches_finite_differences(self, rng):
        prior = ClassPrior.from_counts(np.array([4, 4, 1, 1]), 0.01)
        za = rng.normal(size=(3, 4))
        zn = rng.normal(size=(3, 4))
        lv = ckl_loss(za, zn, prior)
        fd = central_diff_array(lambda zz: float(ckl_loss(zz, zn, prior).loss.sum()), za)
        assert max_rel_err(lv.dlogits, fd) < 1e-6


class TestTrades:
    def test_lambda_zero_is_plain_ce(self, rng):
        zn, za = rng.normal(size=4), rng.normal(size=4)
        assert abs(float(trades_loss(zn, za, 2, 0.0).loss) - float(ce_loss(zn, 2).loss)) < 1e-15

    def test_equal_branches_zero_divergence(self, rng):
        z = rng.normal(size=4)
        lv = trades_loss(z, z, 1, 6.0)
        assert abs(float(lv.loss) - float(ce_loss(z, 1).loss)) < 1e-12
        assert np.max(np.abs(lv.dlogits)) < 1e-12

    def test_gradients_match_finite_differences(self, rng):
        zn = rng.normal(size=(3, 4))
        za = rng.normal(size=(3, 4))
        y = rng.integers(0, 4, size=3)
        lv = trades_loss(zn, za, y, 3.0)
        fd_nat = central_diff_array(lambda zz: float(trades_loss(zz, za, y, 3.0).loss.sum()), zn)
        fd_adv = central_diff_array(lambda zz: float(trades_loss(zn, zz, y, 3.0).loss.sum()), za)
        assert max_rel_err(lv.dlogits_nat, fd_nat) < 1e-6
        assert max_rel_err(lv.dlogits, fd_adv) < 1e-6

    def test_rejects_negative_lambda(self, rng):
        with pytest.raises(ValueError):
            trades_loss(rng.normal(size=3), rng.normal(size=3), 0, -0.5)


def test_all_losses_shift_invariant(rng):
    prior = ClassPrior.from_counts(np.array([3, 2, 5]), 0.01)
    z1, z2 = rng.normal(size=3), rng.normal(size=3)
    c = 11.25
    assert abs(float(ce_loss(z1 + c, 1).loss) - float(ce_loss(z1, 1).loss)) < 1e-12
    assert abs(float(cce_loss(z1 + c, 1, prior).loss) - float(cce_loss(z1, 1, prior).loss)) < 1e-12
    assert abs(float(ckl_loss(z1 + c, z2, prior).loss) - float(ckl_loss(z1, z2, prior).loss)) < 1e-12
    assert abs(float(ckl_loss(z1, z2 + c, prior).loss) - float(ckl_loss(z1, z2, prior).loss)) < 1e-12
    assert (
        abs(float(trades_loss(z1 + c, z2 + c, 0, 2.0).loss) - float(trades_loss(z1, z2, 0, 2.0).loss))
        < 1e-12
    )


def test_losses_nonnegative(rng):
    prior = ClassPrior.from_counts(np.array([1, 9]), 0.01)
    for _ in range(20):
        z1, z2 = rng.normal(size=2), rng.normal(size=2)
        y = int(rng.integers(0, 2))
        assert float(ce_loss(z1, y).loss) >= 0
        assert float(cce_loss(z1, y, prior).loss) >= 0
        assert float(trades_loss(z1, z2, y, 6.0).loss) >= 0
