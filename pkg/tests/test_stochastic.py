import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from syncdg import ValidationError
from syncdg.stochastic import (
    gumbel_categorical,
    gumbel_khot,
    reparameterize_gaussian,
    sample_gumbel,
)


def topk_oracle(scores, k):
    """Independent top-k selection: argsort descending, first index wins ties."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return set(order[:k])


class TestReparameterize:
    def test_zero_noise_returns_mu(self):
        mu = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
        sigma2 = torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64)
        out = reparameterize_gaussian(mu, sigma2, torch.zeros_like(mu))
        assert torch.equal(out, mu)

    def test_standard_normal_passthrough(self):
        n = torch.tensor([0.3, -1.2], dtype=torch.float64)
        out = reparameterize_gaussian(torch.zeros_like(n), torch.ones_like(n), n)
        assert torch.equal(out, n)

    def test_gradient_wrt_mu_is_identity(self):
        mu = torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64, requires_grad=True)
        sigma2 = torch.tensor([1.0, 2.0, 0.5], dtype=torch.float64)
        noise = torch.tensor([0.7, -0.1, 0.4], dtype=torch.float64)
        out = reparameterize_gaussian(mu, sigma2, noise)
        jac = torch.autograd.functional.jacobian(
            lambda m: reparameterize_gaussian(m, sigma2, noise), mu
        )
        assert torch.allclose(jac, torch.eye(3, dtype=torch.float64))
        out.sum().backward()
        assert torch.allclose(mu.grad, torch.ones_like(mu))

    def test_rejects_nonpositive_variance(self):
        mu = torch.zeros(2, dtype=torch.float64)
        with pytest.raises(ValidationError):
            reparameterize_gaussian(mu, torch.tensor([1.0, 0.0], dtype=torch.float64), mu)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            reparameterize_gaussian(
                torch.zeros(2, dtype=torch.float64),
                torch.ones(3, dtype=torch.float64),
                torch.zeros(2, dtype=torch.float64),
            )


class TestGumbelKhot:
    def test_full_selection_all_ones(self):
        scores = torch.randn(6, dtype=torch.float64)
        mask = gumbel_khot(scores, 6, noise_mode="deterministic")
        assert torch.equal(mask.hard, torch.ones_like(scores))

    def test_deterministic_matches_example(self):
        scores = torch.tensor([5.0, 1.0, 4.0, 0.0, 3.0, 2.0], dtype=torch.float64)
        mask = gumbel_khot(scores, 3, noise_mode="deterministic")
        assert set(torch.nonzero(mask.hard).flatten().tolist()) == {0, 2, 4}

    def test_circle_config_cardinality(self):
        # mask ratio 0.6 over 20 latent dims keeps 12
        k = max(1, math.floor(0.6 * 20 + 0.5))
        assert k == 12
        mask = gumbel_khot(torch.randn(20, dtype=torch.float64), k, noise_mode="deterministic")
        assert int(mask.hard.sum()) == 12

    def test_values_view_equals_hard_values(self):
        gen = torch.Generator().manual_seed(0)
        scores = torch.randn(8, dtype=torch.float64)
        mask = gumbel_khot(scores, 3, generator=gen)
        assert torch.equal(mask.values.detach(), mask.hard)
        assert float(mask.values.sum()) == pytest.approx(3.0, abs=1e-12)

    def test_deterministic_equals_topk_oracle_random_cases(self):
        gen = torch.Generator().manual_seed(42)
        for _ in range(200):
            n = int(torch.randint(1, 24, (1,), generator=gen))
            k = int(torch.randint(1, n + 1, (1,), generator=gen))
            scores = torch.randn(n, dtype=torch.float64, generator=gen)
            mask = gumbel_khot(scores, k, noise_mode="deterministic")
            assert set(torch.nonzero(mask.hard).flatten().tolist()) == topk_oracle(scores.tolist(), k)

    @settings(max_examples=100, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=32),
        seed=st.integers(min_value=0, max_value=2**31 - 1),
        data=st.data(),
    )
    def test_cardinality_property(self, n, seed, data):
        k = data.draw(st.integers(min_value=1, max_value=n))
        gen = torch.Generator().manual_seed(seed)
        scores = torch.randn(n, dtype=torch.float64, generator=gen)
        mask = gumbel_khot(scores, k, generator=gen)
        assert int(mask.hard.sum()) == k
        assert set(mask.hard.tolist()) <= {0.0, 1.0}

    def test_batched_scores(self):
        scores = torch.randn((5, 10), dtype=torch.float64)
        mask = gumbel_khot(scores, 4, noise_mode="deterministic")
        assert mask.hard.shape == (5, 10)
        assert torch.equal(mask.hard.sum(-1), torch.full((5,), 4.0, dtype=torch.float64))

    def test_bounds_validation(self):
        scores = torch.randn(4, dtype=torch.float64)
        with pytest.raises(ValidationError):
            gumbel_khot(scores, 0)
        with pytest.raises(ValidationError):
            gumbel_khot(scores, 5)
        with pytest.raises(ValidationError):
            gumbel_khot(scores, 2, tau_gumbel=0.0)

    def test_soft_gradients_match_finite_differences(self):
        # relaxed mask gradients, fixed noise, tau 0.5
        gen = torch.Generator().manual_seed(7)
        scores = torch.randn(10, dtype=torch.float64)
        noise = sample_gumbel((10,), generator=gen)
        probe = torch.randn(10, dtype=torch.float64, generator=gen)

        def soft_scalar(s):
            mask = gumbel_khot(s + noise, 4, tau_gumbel=0.5, noise_mode="deterministic")
            return (mask.soft * probe).sum()

        s = scores.clone().requires_grad_(True)
        soft_scalar(s).backward()
        analytic = s.grad.clone()
        eps = 1e-6
        for i in range(10):
            bump = torch.zeros_like(scores)
            bump[i] = eps
            fd = (soft_scalar(scores + bump) - soft_scalar(scores - bump)) / (2 * eps)
            denom = max(abs(float(analytic[i])), 1e-8)
            assert abs(float(fd) - float(analytic[i])) / denom < 1e-4

    def test_stochastic_deterministic_given_generator(self):
        scores = torch.randn(12, dtype=torch.float64)
        a = gumbel_khot(scores, 5, generator=torch.Generator().manual_seed(3))
        b = gumbel_khot(scores, 5, generator=torch.Generator().manual_seed(3))
        assert torch.equal(a.hard, b.hard)
        assert torch.equal(a.soft, b.soft)


class TestGumbelCategorical:
    def test_uniform_logits_tie_breaks_to_zero(self):
        out = gumbel_categorical(torch.zeros(4, dtype=torch.float64), noise_mode="deterministic")
        assert torch.equal(out, torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64))

    def test_dominant_logit(self):
        out = gumbel_categorical(
            torch.tensor([10.0, 0.0, 0.0], dtype=torch.float64), noise_mode="deterministic"
        )
        assert torch.equal(out, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))

    def test_monte_carlo_frequency(self):
        logits = torch.log(torch.tensor([0.7, 0.3], dtype=torch.float64))
        gen = torch.Generator().manual_seed(123)
        draws = gumbel_categorical(logits.expand(10_000, 2), generator=gen)
        freq = float((draws.argmax(dim=-1) == 0).double().mean())
        assert abs(freq - 0.7) <= 0.03

    def test_stochastic_sums_to_one(self):
        gen = torch.Generator().manual_seed(5)
        out = gumbel_categorical(torch.randn((6, 3), dtype=torch.float64), generator=gen)
        assert torch.allclose(out.sum(-1), torch.ones(6, dtype=torch.float64))

    def test_empty_logits_rejected(self):
        with pytest.raises(ValidationError):
            gumbel_categorical(torch.zeros((2, 0), dtype=torch.float64))

    def test_pure_given_generator(self):
        logits = torch.randn(5, dtype=torch.float64)
        a = gumbel_categorical(logits, generator=torch.Generator().manual_seed(9))
        b = gumbel_categorical(logits, generator=torch.Generator().manual_seed(9))
        assert torch.equal(a, b)
