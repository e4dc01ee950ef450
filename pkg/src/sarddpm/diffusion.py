"""Forward noising, posterior statistics and ancestral sampling.

All functions take 1-based timesteps. Tensors follow the ``[B, C, H, W]``
convention but any ``[B, ...]`` shape works; per-timestep coefficients are
looked up in double precision and cast to the dtype of the input.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import math

import torch

from sarddpm.schedule import NoiseSchedule

NoisePredictor = Callable[[torch.Tensor, torch.Tensor, Optional[torch.Tensor]], torch.Tensor]
Timesteps = Union[int, torch.Tensor]


def _coef(table, t: Timesteps, like: torch.Tensor) -> torch.Tensor:
    """Gather ``table[t]`` and reshape to broadcast against ``like``."""
    tab = torch.as_tensor(table, dtype=torch.float64)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        vals = tab[t.long().cpu()]
        shape = (vals.shape[0],) + (1,) * (like.ndim - 1)
        return vals.reshape(shape).to(dtype=like.dtype, device=like.device)
    return tab[int(t)].to(dtype=like.dtype, device=like.device)


def _check_batch_t(t: Timesteps, batch: int, schedule: NoiseSchedule) -> None:
    schedule.check_t(t)
    if isinstance(t, torch.Tensor) and t.ndim > 0 and t.shape[0] != batch:
        raise ValueError(f"expected {batch} timesteps, got {t.shape[0]}")


def forward_sample(x0: torch.Tensor, t: Timesteps, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Draw x_t from q(x_t | x_0) given the noise: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is either a scalar or a vector holding one timestep per batch element.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    _check_batch_t(t, x0.shape[0], schedule)
    abar = schedule.alpha_bars
    return _coef(abar ** 0.5, t, x0) * x0 + _coef((1.0 - abar) ** 0.5, t, x0) * eps


def posterior_mean_coefficients(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    """Weights (on x0, on x_t) of the mean of q(x_{t-1} | x_t, x_0)."""
    schedule.check_t(t)
    if t == 1:
        return 1.0, 0.0
    abar_t = schedule.alpha_bars[t]
    abar_prev = schedule.alpha_bars[t - 1]
    beta_t = schedule.betas[t - 1]
    c0 = math.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
    ct = math.sqrt(schedule.alphas[t - 1]) * (1.0 - abar_prev) / (1.0 - abar_t)
    return float(c0), float(ct)


def posterior_mean(x0: torch.Tensor, xt: torch.Tensor, t: Timesteps, schedule: NoiseSchedule) -> torch.Tensor:
    if x0.shape != xt.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs xt {tuple(xt.shape)}")
    _check_batch_t(t, x0.shape[0], schedule)
    abar = schedule.alpha_bars
    c0 = abar[:-1] ** 0.5 * schedule.betas / (1.0 - abar[1:])
    ct = schedule.alphas ** 0.5 * (1.0 - abar[:-1]) / (1.0 - abar[1:])
    # exact at t=1, where abar_0 = 1 makes the weights (1, 0) in closed form
    c0[0], ct[0] = 1.0, 0.0
    idx = t - 1
    return _coef(c0, idx, x0) * x0 + _coef(ct, idx, x0) * xt


def predict_x0_from_eps(xt: torch.Tensor, t: Timesteps, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if xt.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: xt {tuple(xt.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    _check_batch_t(t, xt.shape[0], schedule)
    abar = schedule.alpha_bars
    return (xt - _coef((1.0 - abar) ** 0.5, t, xt) * eps_hat) / _coef(abar ** 0.5, t, xt)


def reverse_step(
    xt: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    z: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    sigma_is_beta: bool = False,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}.

    Args:
        xt: Current sample.
        t: Scalar timestep in 1..T.
        eps_hat: Predicted noise for ``xt`` at ``t``.
        z: Fresh standard-normal noise; must be zero (or ``None``) at ``t == 1``.
        schedule: Noise schedule.
        sigma_is_beta: Use sigma_t^2 = beta_t instead of the posterior variance.

    Returns:
        The sample at ``t - 1``.
    """
    t = int(t)
    schedule.check_t(t)
    if xt.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: xt {tuple(xt.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    if z is not None and z.shape != xt.shape:
        raise ValueError(f"shape mismatch: xt {tuple(xt.shape)} vs z {tuple(z.shape)}")
    if t == 1 and z is not None and bool(torch.any(z != 0)):
        raise ValueError("z must be zero at the final step (t == 1)")
    alpha_t = schedule.alphas[t - 1]
    abar_t = schedule.alpha_bars[t]
    eps_coef = (1.0 - alpha_t) / math.sqrt(1.0 - abar_t)
    mean = (xt - eps_coef * eps_hat) / math.sqrt(alpha_t)
    if z is None or t == 1:
        return mean
    var = schedule.betas[t - 1] if sigma_is_beta else schedule.posterior_variances[t - 1]
    return mean + math.sqrt(var) * z


def _predictor(model) -> tuple[NoisePredictor, Optional[int]]:
    """Adapt a UNet or a bare callable to ``eps(x, t, y)``."""
    config = getattr(model, "config", None)
    if config is not None and hasattr(model, "predict_noise"):
        return (lambda x, t, y: model.predict_noise(x, t, y, train_mode=False)), config.num_classes
    return model, None


@torch.no_grad()
def sample(
    model,
    n: int,
    schedule: NoiseSchedule,
    class_ids: Optional[Sequence[int] | torch.Tensor] = None,
    seed: int = 0,
    shape: Optional[Sequence[int]] = None,
    dtype: torch.dtype = torch.float32,
    sigma_is_beta: bool = False,
    clamp: bool = True,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``model`` is either a :class:`~sarddpm.unet.UNet` (image shape taken from
    its config) or any callable ``eps(x, t, class_ids)``, in which case
    ``shape`` is the per-sample shape. The result is clamped to [-1, 1]
    once, after the last step.
    """
    eps_fn, num_classes = _predictor(model)
    if shape is None:
        config = getattr(model, "config", None)
        if config is None:
            raise ValueError("shape is required when sampling from a bare callable")
        shape = (config.in_channels, config.image_size, config.image_size)
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    y = None
    if class_ids is not None:
        y = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
        if y.shape[0] != n:
            raise ValueError(f"expected {n} class ids, got {y.shape[0]}")
        if y.numel() and (int(y.min()) < 0 or (num_classes is not None and int(y.max()) >= num_classes)):
            raise ValueError(f"class id out of range for a model with {num_classes} classes")
    elif num_classes is not None and n > 0:
        raise ValueError("class_ids are required for a conditional model")

    device = _device_of(model)
    gen = generator if generator is not None else torch.Generator().manual_seed(int(seed))
    x = torch.randn((n, *shape), generator=gen, dtype=dtype).to(device)
    if n == 0:
        return x
    if y is not None:
        y = y.to(device)
    for t in range(schedule.T, 0, -1):
        tt = torch.full((n,), t, dtype=torch.long, device=device)
        eps_hat = eps_fn(x, tt, y)
        z = torch.randn(x.shape, generator=gen, dtype=dtype).to(device) if t > 1 else None
        x = reverse_step(x, t, eps_hat, z, schedule, sigma_is_beta=sigma_is_beta)
    return x.clamp(-1.0, 1.0) if clamp else x


def _device_of(model) -> torch.device:
    params = getattr(model, "parameters", None)
    if callable(params):
        for p in params():
            return p.device
    return torch.device("cpu")
