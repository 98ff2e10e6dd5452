# tests/test_diffusion.py
import math

import pytest
import torch

from services.error_handler import NonFiniteError
from services.models.diffusion import (
    Diffusion, NoiseSchedule, forward_sample, sample_ode, sample_sde, score_matching_loss,
)
from services.models.params import DiffusionParams

SCHEDULE = NoiseSchedule(0.05, 20.0)


def point_mass_score(target: float):
    """Exact score of the forward marginal when the data is a point mass at target"""
    def score(x, mask, mu, t):
        time = t.view(-1, *([1] * (x.dim() - 1)))
        alpha = SCHEDULE.alpha(time)
        return -(x - alpha * target - (1.0 - alpha) * mu) / SCHEDULE.lam(time)
    return score


class TestSchedule:
    def test_alpha_squared_plus_lambda_is_one(self):
        t = torch.rand(100, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        t = torch.cat([t, torch.tensor([0.0, 1e-4, 1.0], dtype=torch.float64)])
        assert float((SCHEDULE.alpha(t) ** 2 + SCHEDULE.lam(t) - 1.0).abs().max()) < 1e-12

    def test_cumulative_noise_over_a_grid(self):
        t = torch.linspace(0.0, 1.0, 101, dtype=torch.float64)
        expected = 0.05 * t + 9.975 * t ** 2
        assert torch.allclose(SCHEDULE.cumulative(t), expected, rtol=0.0, atol=1e-12)
        assert torch.allclose(SCHEDULE.lam(t), 1.0 - torch.exp(-expected), rtol=0.0, atol=1e-12)
        assert bool((SCHEDULE.lam(t)[1:] > SCHEDULE.lam(t)[:-1]).all())
        assert float(SCHEDULE.lam(t)[0]) == 0.0

    def test_known_values(self):
        assert float(SCHEDULE.beta(0.0)) == pytest.approx(0.05)
        assert float(SCHEDULE.beta(1.0)) == pytest.approx(20.0)
        assert float(SCHEDULE.cumulative(1.0)) == pytest.approx(0.05 + 0.5 * 19.95)
        assert float(SCHEDULE.lam(1e-4)) > 0.0

    def test_rejects_bad_endpoints(self):
        with pytest.raises(ValueError):
            NoiseSchedule(0.0, 20.0)
        with pytest.raises(ValueError):
            NoiseSchedule(5.0, 1.0)


class TestForwardProcess:
    @pytest.mark.parametrize('t', [0.25, 0.5, 1.0])
    def test_marginal_mean_and_variance(self, t):
        draws = 10_000
        generator = torch.Generator().manual_seed(0)
        y0 = torch.full((draws, 1, 1), 2.0, dtype=torch.float64)
        mu = torch.full_like(y0, -1.0)
        noise = torch.randn(y0.shape, generator=generator, dtype=torch.float64)

        x_t = forward_sample(y0, mu, t, noise).x_t
        alpha = float(SCHEDULE.alpha(t))
        lam = float(SCHEDULE.lam(t))
        mean_error = math.sqrt(lam / draws)
        var_error = lam * math.sqrt(2.0 / (draws - 1))
        assert abs(float(x_t.mean()) - (alpha * 2.0 - (1 - alpha))) < 4 * mean_error
        assert abs(float(x_t.var()) - lam) < 4 * var_error

    def test_time_outside_unit_interval_is_rejected(self):
        y0 = torch.zeros(2, 3, 4)
        with pytest.raises(ValueError):
            forward_sample(y0, y0, 0.0, torch.zeros_like(y0))
        with pytest.raises(ValueError):
            forward_sample(y0, y0, 1.5, torch.zeros_like(y0))

    def test_exact_score_gives_zero_loss(self):
        generator = torch.Generator().manual_seed(3)
        y0 = torch.full((3, 4, 10), 0.7, dtype=torch.float64)
        mu = torch.randn(y0.shape, generator=generator, dtype=torch.float64)
        loss = score_matching_loss(point_mass_score(0.7), y0, mu, generator=generator)
        assert float(loss) == pytest.approx(0.0, abs=1e-10)

    def test_loss_ignores_masked_frames(self):
        generator = torch.Generator().manual_seed(4)
        y0 = torch.randn(1, 2, 8, generator=generator, dtype=torch.float64)
        mu = torch.zeros_like(y0)
        mask = torch.ones(1, 1, 8, dtype=torch.float64)
        mask[..., 5:] = 0
        t = torch.tensor([0.4], dtype=torch.float64)
        noise = torch.randn(y0.shape, generator=generator, dtype=torch.float64)

        def score(x, mask, mu, t):
            return -x

        full = score_matching_loss(score, y0[..., :5], mu[..., :5], t=t, noise=noise[..., :5])
        masked = score_matching_loss(score, y0, mu, mask, t=t, noise=noise)
        assert float(masked) == pytest.approx(float(full), rel=1e-12)


class TestGradients:
    def test_loss_gradcheck_on_toy_score(self):
        generator = torch.Generator().manual_seed(5)
        y0 = torch.randn(2, 3, 6, generator=generator, dtype=torch.float64)
        mu = torch.randn(2, 3, 6, generator=generator, dtype=torch.float64)
        mask = torch.ones(2, 1, 6, dtype=torch.float64)
        mask[1, :, 4:] = 0
        t = torch.tensor([0.2, 0.7], dtype=torch.float64)
        noise = torch.randn(y0.shape, generator=generator, dtype=torch.float64)

        def loss(a, b):
            return score_matching_loss(lambda x, m, mu_, t_: a * x + b * mu_, y0, mu, mask, t=t, noise=noise)

        a = torch.tensor(-0.5, dtype=torch.float64, requires_grad=True)
        b = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(loss, (a, b))

    def test_loss_gradcheck_through_means(self):
        generator = torch.Generator().manual_seed(6)
        y0 = torch.randn(1, 2, 5, generator=generator, dtype=torch.float64)
        t = torch.tensor([0.5], dtype=torch.float64)
        noise = torch.randn(y0.shape, generator=generator, dtype=torch.float64)
        mu = torch.randn(1, 2, 5, generator=generator, dtype=torch.float64, requires_grad=True)

        def loss(mu_):
            return score_matching_loss(lambda x, m, mu__, t_: 0.4 * mu__ - x, y0, mu_, t=t, noise=noise)

        assert torch.autograd.gradcheck(loss, (mu,))


class TestSamplers:
    def _error(self, steps, sampler=sample_ode, temperature=1.0):
        """Largest absolute deviation from the point mass at 1.0"""
        mu = torch.zeros(2, 4, 16, dtype=torch.float64)
        generator = torch.Generator().manual_seed(11)
        x = sampler(point_mass_score(1.0), mu, steps, temperature, generator=generator)
        return float((x - 1.0).abs().max())

    @pytest.mark.parametrize('temperature', [1.0, 1.5])
    def test_ode_recovers_point_mass(self, temperature):
        fine = self._error(500, temperature=temperature)
        coarse = self._error(250, temperature=temperature)
        assert fine < 0.05
        assert fine < coarse

    def test_sde_recovers_point_mass(self):
        mu = torch.zeros(2, 4, 16, dtype=torch.float64)
        x = sample_sde(point_mass_score(1.0), mu, 500, generator=torch.Generator().manual_seed(11))
        assert float((x - 1.0).abs().mean()) < 0.1

    def test_same_generator_seed_is_deterministic(self):
        mu = torch.zeros(1, 3, 8)

        def run(seed):
            return sample_ode(point_mass_score(0.5), mu, 10, 1.5, generator=torch.Generator().manual_seed(seed))

        assert torch.equal(run(1), run(1))
        assert not torch.equal(run(1), run(2))

    def test_masked_frames_stay_zero(self):
        mu = torch.ones(1, 3, 8)
        mask = torch.ones(1, 1, 8)
        mask[..., 6:] = 0
        x = sample_sde(point_mass_score(0.5), mu, 5, generator=torch.Generator().manual_seed(0), mask=mask)
        assert float(x[..., 6:].abs().sum()) == 0.0

    def test_non_finite_state_reports_the_step(self):
        calls = {'n': 0}

        def exploding(x, mask, mu, t):
            calls['n'] += 1
            return torch.full_like(x, math.inf) if calls['n'] == 3 else torch.zeros_like(x)

        with pytest.raises(NonFiniteError) as info:
            sample_ode(exploding, torch.zeros(1, 2, 4), 10, generator=torch.Generator().manual_seed(0))
        assert info.value.step == 2

    def test_invalid_arguments(self):
        mu = torch.zeros(1, 2, 4)
        with pytest.raises(ValueError):
            sample_ode(point_mass_score(0.0), mu, 0)
        with pytest.raises(ValueError):
            sample_ode(point_mass_score(0.0), mu, 5, temperature=0.0)


def test_diffusion_module_binds_schedule():
    class Zero(torch.nn.Module):
        def forward(self, x, mask, mu, t):
            return torch.zeros_like(x)

    diffusion = Diffusion(Zero(), DiffusionParams(beta0=0.1, beta1=10.0, t_min=0.01))
    assert diffusion.schedule.beta0 == 0.1 and diffusion.t_min == 0.01

    y0 = torch.randn(2, 3, 5)
    loss = diffusion.loss(y0, torch.ones(2, 1, 5), torch.zeros_like(y0),
                          generator=torch.Generator().manual_seed(0), reduction='none')
    assert loss.shape == (2,)

    out = diffusion.reverse(torch.zeros(1, 3, 5), torch.ones(1, 1, 5), steps=4, temperature=1.0,
                            generator=torch.Generator().manual_seed(0))
    assert out.shape == (1, 3, 5)
