import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ilc_density.losses import (ImageTerms, batch_objective, class_loss, combine_batch,
                                global_mse_loss, rank_loss, sp_plus_gradient,
                                spatial_negative_loss, spatial_positive_grids,
                                spatial_positive_loss)
from oracles import central_diff, sp_minus_naive, sp_plus_naive

D = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731
LOG2 = math.log(2)


class TestClosedForms:
    def test_class_loss_at_zero(self):
        assert float(class_loss(D([0.0, 0.0, 0.0]), D([1, 0, 1]))) == pytest.approx(LOG2, abs=1e-6)

    def test_class_loss_two_categories(self):
        # -(log s(2) + log(1 - s(-2))) / 2 = log(1 + e^-2)
        assert float(class_loss(D([2.0, -2.0]), D([1, 0]))) == pytest.approx(0.126928011, abs=1e-6)

    def test_class_loss_perfect_limit(self):
        assert float(class_loss(D([50.0, -50.0]), D([1, 0]))) < 1e-12

    def test_sp_plus_single_entry(self):
        b = D([[0, 0], [0, 1]])
        assert float(spatial_positive_loss(torch.zeros(2, 2, dtype=torch.float64), b, 1)) == pytest.approx(LOG2, abs=1e-6)

    def test_sp_plus_two_entries(self):
        d, b = D([[0.0, 2.0]]), D([[1, 1]])
        assert float(spatial_positive_loss(d, b, 1)) == pytest.approx(0.4100378, abs=1e-6)
        assert float(spatial_positive_loss(d, b, 1)) == pytest.approx(sp_plus_naive(d.numpy(), b.numpy(), 1), abs=1e-12)

    def test_sp_plus_limit_and_empty_mask(self):
        assert float(spatial_positive_loss(D([[60.0, -3.0]]), D([[1, 0]]), 1)) < 1e-12
        with pytest.raises(ValueError):
            spatial_positive_loss(D([[1.0]]), D([[0.0]]), 1)

    def test_sp_minus(self):
        assert float(spatial_negative_loss(torch.zeros(2, 2, dtype=torch.float64), 1)) == pytest.approx(LOG2, abs=1e-6)
        assert float(spatial_negative_loss(D([[3.0]]), 1)) == pytest.approx(3.0485874, abs=1e-6)
        assert float(spatial_negative_loss(torch.full((3, 3), -60.0, dtype=torch.float64), 1)) < 1e-12

    def test_mse(self):
        t = D([1.0, 2.0])
        assert float(global_mse_loss(t, t, torch.tensor([True, True]))) == 0
        assert float(global_mse_loss(D([5.0]), D([3.0]), torch.tensor([True]))) == 4
        assert float(global_mse_loss(D([0.5, 2.0]), D([0, 2]), torch.tensor([True, True]))) == pytest.approx(0.125)
        assert float(global_mse_loss(D([9.0]), D([0.0]), torch.tensor([False]))) == 0

    def test_rank(self):
        assert float(rank_loss(D([7.0]), torch.tensor([True]))) == 0
        assert float(rank_loss(D([2.0]), torch.tensor([True]))) == 3
        assert float(rank_loss(D([5.0, 4.0]), torch.tensor([True, True]))) == pytest.approx(0.5)
        assert float(rank_loss(D([1.0]), torch.tensor([False]))) == 0


class TestCombine:
    def test_all_zero(self):
        assert combine_batch([ImageTerms(0.0, 0.0, 0.0, 0.0, 0.0)]).total == 0

    def test_rank_weight(self):
        r = combine_batch([ImageTerms(0.0, mse=0.0, rank=1.0)], lambda_rank=0.1)
        assert r.total == pytest.approx(0.1)

    def test_mse_batch_mean(self):
        r = combine_batch([ImageTerms(0.0, mse=2.0), ImageTerms(0.0, mse=4.0)])
        assert r.mse == pytest.approx(3.0)

    def test_empty_sets_leave_denominator(self):
        r = combine_batch([ImageTerms(0.0, sp_plus=1.0), ImageTerms(0.0, sp_plus=None)])
        assert r.sp_plus == pytest.approx(1.0)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            combine_batch([])

    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 3))
    def test_lambda_only_scales_rank(self, l1, l2, rank):
        terms = [ImageTerms(0.3, mse=1.2, rank=rank, sp_plus=0.4, sp_minus=0.6)]
        a, b = combine_batch(terms, l1), combine_batch(terms, l2)
        assert b.total - a.total == pytest.approx((l2 - l1) * rank, abs=1e-9)


def _random_case(rng, shape=(8, 8)):
    d = rng.normal(scale=2.0, size=shape)
    b = (rng.random(shape) < 0.2).astype(float)
    if b.sum() == 0:
        b[rng.integers(shape[0]), rng.integers(shape[1])] = 1
    return d, b


class TestGradients:
    def test_full_mask_off(self):
        g = sp_plus_gradient(torch.randn(4, 4), torch.zeros(4, 4))
        assert not g.any()

    def test_single_entry_value(self):
        b = D([[0, 0], [1, 0]])
        g = sp_plus_gradient(torch.zeros(2, 2, dtype=torch.float64), b, 1)
        assert float(g[1, 0]) == pytest.approx(-0.5)
        assert g.sum() == g[1, 0]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sp_plus_gradient(torch.zeros(2, 2), torch.zeros(2, 3))

    @pytest.mark.parametrize("seed", range(10))
    def test_sp_plus_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        d, b = _random_case(rng)
        n_s = int(rng.integers(1, 4))
        f = lambda x: float(spatial_positive_loss(D(x), D(b), n_s))  # noqa: E731
        fd = central_diff(f, d, 1e-4)
        g = sp_plus_gradient(D(d), D(b), n_s).numpy()
        on = b > 0
        np.testing.assert_allclose(g[on], fd[on], rtol=1e-5)
        assert (g[~on] == 0).all()

    def test_autograd_uses_masked_gradient(self):
        rng = np.random.default_rng(3)
        d, b = _random_case(rng)
        x = D(d).requires_grad_()
        mask = D(b).requires_grad_()
        spatial_positive_grids(x, mask).sum().backward()
        np.testing.assert_allclose(x.grad.numpy(), sp_plus_gradient(D(d), D(b)).numpy(), rtol=1e-12)
        assert (x.grad.numpy()[b == 0] == 0).all()
        assert mask.grad is None  # nothing flows back through the mask

    @pytest.mark.parametrize("seed", range(5))
    def test_other_terms_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        d = rng.normal(size=(4, 5))
        x = D(d).requires_grad_()
        spatial_negative_loss(x, 2).backward()
        fd = central_diff(lambda v: sp_minus_naive(v, 2), d)
        np.testing.assert_allclose(x.grad.numpy(), fd, rtol=1e-5, atol=1e-10)

        counts = rng.normal(3, 2, size=5)
        target = D(rng.integers(0, 5, size=5))
        sel = torch.tensor(rng.random(5) < 0.6)
        sel[0] = True
        beyond = ~sel
        for fn in (lambda v: global_mse_loss(v, target, sel), lambda v: rank_loss(v, beyond, 5)):
            x = D(counts).requires_grad_()
            fn(x).backward()
            fd = central_diff(lambda v: float(fn(D(v))), counts)
            np.testing.assert_allclose(x.grad.numpy(), fd, rtol=1e-5, atol=1e-8)

        s = rng.normal(size=4)
        y = D([1, 0, 1, 0])
        x = D(s).requires_grad_()
        class_loss(x, y).backward()
        fd = central_diff(lambda v: float(class_loss(D(v), y)), s)
        np.testing.assert_allclose(x.grad.numpy(), fd, rtol=1e-5)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_all_terms_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        d, b = _random_case(rng, (5, 5))
        d = d * 10
        assert float(spatial_positive_loss(D(d), D(b), 1)) >= 0
        assert float(spatial_negative_loss(D(d), 1)) >= 0
        c = D(rng.normal(0, 5, 4))
        assert float(global_mse_loss(c, D([0, 1, 2, 3]), torch.ones(4, dtype=bool))) >= 0
        assert float(rank_loss(c, torch.ones(4, dtype=bool))) >= 0
        assert float(class_loss(c, D([1, 0, 1, 0]))) >= 0

    @given(st.integers(0, 2**31 - 1), st.integers(0, 15), st.floats(0.01, 5))
    def test_sp_minus_monotone(self, seed, k, delta):
        d = np.random.default_rng(seed).normal(size=(4, 4))
        bumped = d.copy()
        bumped.flat[k] += delta
        assert float(spatial_negative_loss(D(bumped), 1)) > float(spatial_negative_loss(D(d), 1))

    @given(st.lists(st.floats(-10, 20), min_size=1, max_size=6))
    def test_rank_zero_iff_no_undercount(self, counts):
        zero = float(rank_loss(D(counts), torch.ones(len(counts), dtype=bool), 5)) == 0
        assert zero == all(c >= 5 for c in counts)


def test_batch_objective_differentiable():
    x = torch.zeros(3, requires_grad=True)
    total, report = batch_objective(x + 1, x * 2, torch.tensor([True, False, True]),
                                    x, torch.zeros(3, dtype=bool), lambda_rank=0.1)
    total.backward()
    assert report.mse == 0 and report.class_loss == 1
    assert x.grad is not None
