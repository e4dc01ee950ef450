import math

import numpy as np
import pytest
import torch

from sarddpm.diffusion import (
    forward_sample,
    posterior_mean,
    posterior_mean_coefficients,
    predict_x0_from_eps,
    reverse_step,
    sample,
)
from sarddpm.schedule import make_cosine, make_linear, make_sigmoid
from sarddpm.unet import build

from conftest import tiny_config

N_MC = 10_000


def exact_gaussian_predictor(schedule):
    """E[eps | x_t] for standard-normal 1-D data: sqrt(1 - abar_t) * x_t."""
    coef = torch.tensor(np.sqrt(1.0 - schedule.alpha_bars), dtype=torch.float64)

    def eps(x, t, y):
        return coef[t].reshape(-1, *([1] * (x.ndim - 1))).to(x.dtype) * x

    return eps


def test_forward_zero_noise(linear, gen):
    x0 = torch.randn(4, 1, 8, 8, generator=gen, dtype=torch.float64)
    t = torch.tensor([1, 10, 500, 1000])
    xt = forward_sample(x0, t, torch.zeros_like(x0), linear)
    for i, ti in enumerate(t.tolist()):
        torch.testing.assert_close(xt[i], math.sqrt(linear.alpha_bar(ti)) * x0[i], rtol=1e-14, atol=0)


def test_forward_at_T_is_nearly_noise(linear, gen):
    x0 = torch.rand(8, 1, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    xt = forward_sample(x0, torch.full((8,), 1000), eps, linear)
    abar = linear.alpha_bar(1000)
    gap = (xt - eps).abs().max()
    assert gap <= math.sqrt(abar) * x0.abs().max() + (1 - math.sqrt(1 - abar)) * eps.abs().max() + 1e-12
    assert gap <= math.sqrt(4.1e-5) * x0.abs().max() + eps.abs().max()


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_forward_monte_carlo_moments(linear, t):
    g = torch.Generator().manual_seed(t)
    x0 = torch.tensor([[0.7, -0.3, 1.0]], dtype=torch.float64).expand(N_MC, 3)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    xt = forward_sample(x0, torch.full((N_MC,), t), eps, linear)
    abar = linear.alpha_bar(t)
    var = 1 - abar
    mean_err = (xt.mean(0) - math.sqrt(abar) * x0[0]).abs()
    assert torch.all(mean_err <= 3 * math.sqrt(var / N_MC))
    var_err = (xt.var(0) - var).abs()
    assert torch.all(var_err <= 3 * var * math.sqrt(2 / (N_MC - 1)))


@pytest.mark.parametrize("t", [2, 300, 1000])
def test_chain_consistency(linear, t):
    g = torch.Generator().manual_seed(100 + t)
    x0 = torch.full((N_MC, 1), 0.5, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    x_prev = forward_sample(x0, torch.full((N_MC,), t - 1), eps, linear)
    z = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    beta = linear.beta(t)
    x_t = math.sqrt(1 - beta) * x_prev + math.sqrt(beta) * z
    abar = linear.alpha_bar(t)
    var = 1 - abar
    assert abs(float(x_t.mean()) - math.sqrt(abar) * 0.5) <= 3 * math.sqrt(var / N_MC)
    assert abs(float(x_t.var()) - var) <= 3 * var * math.sqrt(2 / (N_MC - 1))


def test_forward_is_linear(linear, gen):
    x0 = torch.randn(3, 1, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    t = torch.tensor([5, 50, 500])
    for a in (-2.0, 0.5, 3.0):
        torch.testing.assert_close(forward_sample(a * x0, t, a * eps, linear), a * forward_sample(x0, t, eps, linear))


def test_forward_errors(linear):
    x = torch.zeros(2, 1, 4, 4)
    with pytest.raises(ValueError, match="timestep"):
        forward_sample(x, torch.tensor([0, 1]), x, linear)
    with pytest.raises(ValueError, match="timestep"):
        forward_sample(x, torch.tensor([1, 1001]), x, linear)
    with pytest.raises(ValueError, match="shape"):
        forward_sample(x, torch.tensor([1, 2]), torch.zeros(2, 1, 4, 5), linear)
    with pytest.raises(ValueError):
        forward_sample(x, torch.tensor([1, 2, 3]), x, linear)


def test_posterior_mean_t1_is_x0(linear, gen):
    x0 = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64)
    xt = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    assert torch.equal(posterior_mean(x0, xt, 1, linear), x0)
    assert posterior_mean_coefficients(linear, 1) == (1.0, 0.0)


def test_posterior_coefficients_t500(linear):
    # 50-digit evaluation of both weights from the linear schedule
    c0, ct = posterior_mean_coefficients(linear, 500)
    assert c0 == pytest.approx(0.0030700711142649769123, rel=1e-11)
    assert ct == pytest.approx(0.99410667021016659188, rel=1e-12)
    assert c0 + ct == pytest.approx(0.99717674132443156879, rel=1e-12)


def test_posterior_mean_zero(linear):
    z = torch.zeros(2, 1, 3, 3)
    assert torch.equal(posterior_mean(z, z, 700, linear), z)
    with pytest.raises(ValueError):
        posterior_mean(z, z, 0, linear)


@pytest.mark.parametrize("schedule", [make_linear(), make_cosine(), make_sigmoid()], ids=["linear", "cosine", "sigmoid"])
def test_reverse_step_mean_matches_posterior(schedule, gen):
    x0 = torch.randn(4, 1, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    for t in (2, 10, 400, 999):
        xt = forward_sample(x0, t, eps, schedule)
        step = reverse_step(xt, t, eps, None, schedule)
        torch.testing.assert_close(step, posterior_mean(x0, xt, t, schedule), rtol=1e-9, atol=1e-9)


def test_predict_x0_roundtrip(linear, gen):
    x0 = torch.rand(4, 1, 8, 8, generator=gen) * 2 - 1
    eps = torch.randn(x0.shape, generator=gen)
    t = torch.tensor([1, 20, 400, 900])
    xt = forward_sample(x0, t, eps, linear)
    rec = predict_x0_from_eps(xt, t, eps, linear)
    assert float(((rec - x0).abs() / x0.abs().clamp_min(1e-2)).max()) <= 1e-5 * 100  # float32, scaled by 1/sqrt(abar)
    x0d, epsd = x0.double(), eps.double()
    recd = predict_x0_from_eps(forward_sample(x0d, t, epsd, linear), t, epsd, linear)
    torch.testing.assert_close(recd, x0d, rtol=1e-5, atol=1e-12)


def test_predict_x0_special_cases(linear):
    xt = torch.linspace(-1, 1, 16, dtype=torch.float64).reshape(1, 1, 4, 4)
    torch.testing.assert_close(
        predict_x0_from_eps(xt, 300, torch.zeros_like(xt), linear), xt / math.sqrt(linear.alpha_bar(300))
    )
    c = torch.full((1, 1, 4, 4), 0.37, dtype=torch.float64)
    eps = torch.randn(c.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    xt = forward_sample(c, 600, eps, linear)
    torch.testing.assert_close(predict_x0_from_eps(xt, 600, eps, linear), c)


def test_reverse_step_t1_recovers_x0(linear, gen):
    x0 = torch.rand(4, 1, 8, 8, generator=gen) * 2 - 1
    eps = torch.randn(x0.shape, generator=gen)
    xt = forward_sample(x0, 1, eps, linear)
    out = reverse_step(xt, 1, eps, torch.zeros_like(xt), linear)
    assert float((out - x0).abs().max()) <= 1e-5


def test_reverse_step_zero_inputs(linear, gen):
    xt = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64)
    out = reverse_step(xt, 321, torch.zeros_like(xt), torch.zeros_like(xt), linear)
    torch.testing.assert_close(out, xt / math.sqrt(linear.alpha(321)))


def test_reverse_step_t1_noise_vanishes(linear, gen):
    assert linear.posterior_variance(1) == 0.0
    xt = torch.randn(2, 1, 4, 4, generator=gen)
    eps = torch.randn(xt.shape, generator=gen)
    assert torch.equal(reverse_step(xt, 1, eps, None, linear), reverse_step(xt, 1, eps, torch.zeros_like(xt), linear))


def test_reverse_step_rejects_noise_at_t1(linear):
    xt = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError, match="zero"):
        reverse_step(xt, 1, xt, torch.ones_like(xt), linear)
    with pytest.raises(ValueError, match="timestep"):
        reverse_step(xt, 0, xt, None, linear)
    with pytest.raises(ValueError, match="timestep"):
        reverse_step(xt, 1001, xt, None, linear)


def test_reverse_step_sigma_choice(linear):
    xt = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    z = torch.ones_like(xt)
    post = reverse_step(xt, 10, xt, z, linear)
    beta = reverse_step(xt, 10, xt, z, linear, sigma_is_beta=True)
    assert float(post[0, 0, 0, 0]) == pytest.approx(math.sqrt(linear.posterior_variance(10)))
    assert float(beta[0, 0, 0, 0]) == pytest.approx(math.sqrt(linear.beta(10)))


def test_sampler_analytic_oracle(linear):
    out = sample(
        exact_gaussian_predictor(linear), 10_000, linear, seed=7, shape=(1,), dtype=torch.float64, clamp=False
    )
    assert abs(float(out.mean())) < 0.05
    assert 0.9 <= float(out.var()) <= 1.1


def test_sampler_empty_and_deterministic(linear):
    pred = exact_gaussian_predictor(linear)
    assert sample(pred, 0, linear, shape=(1, 4, 4)).shape == (0, 1, 4, 4)
    a = sample(pred, 5, linear, seed=3, shape=(1, 4, 4))
    b = sample(pred, 5, linear, seed=3, shape=(1, 4, 4))
    assert torch.equal(a, b)
    assert not torch.equal(a, sample(pred, 5, linear, seed=4, shape=(1, 4, 4)))


def test_sampler_with_unet():
    from sarddpm.schedule import make_linear

    sched = make_linear(20)
    model = build(tiny_config(num_timesteps=20), seed=0)
    for seed in range(3):
        out = sample(model, 3, sched, class_ids=[0, 1, 2], seed=seed)
        assert out.shape == (3, 1, 16, 16)
        assert torch.isfinite(out).all()
        assert out.min() >= -1 and out.max() <= 1
    assert torch.equal(sample(model, 3, sched, class_ids=[0, 1, 2], seed=9), sample(model, 3, sched, class_ids=[0, 1, 2], seed=9))
    with pytest.raises(ValueError, match="class id"):
        sample(model, 2, sched, class_ids=[0, 3])
    with pytest.raises(ValueError, match="class ids"):
        sample(model, 2, sched, class_ids=[0])
    with pytest.raises(ValueError, match="required"):
        sample(model, 2, sched)
