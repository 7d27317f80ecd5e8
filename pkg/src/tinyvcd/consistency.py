"""Few-step consistency student distilled from the teacher.

The student shares the teacher's backbone and is additionally
conditioned on the CFG scale omega and the motion-guidance strength
lambda through Fourier features projected into the time embedding.  A
skip parameterization pins the boundary behavior: at the first grid
step (t = eps) the student is exactly the identity for any weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng
from .teacher import (TIME_WIDTH, DenoiserParams, NoiseSchedule, T_EPS,
                      denoiser_forward)

SIGMA_DATA = 0.5
COND_WIDTH = 8


@dataclass
class ConsistencyParams:
    """Student weights: teacher-shaped backbone plus conditioning heads."""

    backbone: DenoiserParams
    w_omega: Tensor
    w_lambda: Tensor

    def tensors(self) -> list[tuple[str, Tensor]]:
        return self.backbone.tensors() + [("w_omega", self.w_omega),
                                          ("w_lambda", self.w_lambda)]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.tensors()]

    def trainable_parameters(self) -> list[Tensor]:
        return ([t for _, t in self.backbone.trainable_tensors()]
                + [self.w_omega, self.w_lambda])

    def copy(self) -> "ConsistencyParams":
        return ConsistencyParams(
            backbone=self.backbone.copy(),
            w_omega=Tensor(self.w_omega.data.copy(), requires_grad=True),
            w_lambda=Tensor(self.w_lambda.data.copy(), requires_grad=True),
        )

    @property
    def latent_shape(self):
        return self.backbone.latent_shape


@dataclass
class CDLossConfig:
    huber_c: float = 1e-3
    use_ema_target: bool = False
    ema_mu: float = 0.95

    def validate(self) -> None:
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")
        if not (0.0 < self.ema_mu < 1.0):
            raise ValueError("ema_mu must lie in (0, 1)")


def init_student(teacher: DenoiserParams) -> ConsistencyParams:
    """Student initialized from teacher weights, conditioning heads at zero."""
    return ConsistencyParams(
        backbone=teacher.copy(),
        w_omega=Tensor(np.zeros((COND_WIDTH, TIME_WIDTH)), requires_grad=True),
        w_lambda=Tensor(np.zeros((COND_WIDTH, TIME_WIDTH)), requires_grad=True),
    )


def _fourier(value: float) -> np.ndarray:
    freqs = 2.0 ** np.arange(COND_WIDTH // 2)
    ang = value * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _cond_embedding(theta: ConsistencyParams, omega: float, lam: float) -> Tensor:
    om = ad.matmul(Tensor(_fourier(omega / 4.0).reshape(1, COND_WIDTH)), theta.w_omega)
    lm = ad.matmul(Tensor(_fourier(math.log1p(lam)).reshape(1, COND_WIDTH)), theta.w_lambda)
    return ad.reshape(ad.add(om, lm), (TIME_WIDTH,))


def skip_coeffs(t: float) -> tuple[float, float]:
    """Boundary-respecting mix: c_skip(eps) = 1, c_out(eps) = 0."""
    d = t - T_EPS
    c_skip = SIGMA_DATA ** 2 / (d * d + SIGMA_DATA ** 2)
    c_out = d * SIGMA_DATA / math.sqrt(d * d + SIGMA_DATA ** 2)
    return c_skip, c_out


ALPHA_CLAMP = 0.0


def cm_forward(theta: ConsistencyParams, z, omega: float, lam: float, c,
               n: int, schedule: NoiseSchedule) -> Tensor:
    """Student's clean-latent prediction from step n.

    The backbone keeps the teacher's noise-prediction form; its output
    is converted to a clean estimate before the boundary-respecting
    skip mix, so a freshly initialized student already behaves like the
    teacher's one-jump denoiser.
    """
    if not (1 <= n <= schedule.n_steps):
        raise ValueError(f"step {n} outside [1, {schedule.n_steps}]")
    z = z if isinstance(z, Tensor) else Tensor(z)
    if n == 1:
        return z  # boundary identity, exact for any weights
    c_skip, c_out = skip_coeffs(float(schedule.t[n - 1]))
    eps_hat = denoiser_forward(theta.backbone, z, c, n,
                               extra_emb=_cond_embedding(theta, omega, lam))
    alpha = max(float(schedule.alpha[n - 1]), ALPHA_CLAMP)
    sigma = float(schedule.sigma[n - 1])
    x0_hat = ad.scale(ad.sub(z, ad.scale(eps_hat, sigma)), 1.0 / alpha)
    return ad.add(ad.scale(z, c_skip), ad.scale(x0_hat, c_out))


def pseudo_huber(residual: Tensor, huber_c: float) -> Tensor:
    """sqrt(|r|^2 + c^2) - c; smooth everywhere, ~|r| for large residuals."""
    c2 = huber_c * huber_c
    return ad.sub(ad.sqrt(ad.add(ad.tsum(ad.square(residual)), Tensor(c2))),
                  Tensor(huber_c))


def cd_loss(theta: ConsistencyParams, record, lam: float, config: CDLossConfig,
            schedule: NoiseSchedule, theta_minus: ConsistencyParams | None = None,
            n_hi: int | None = None) -> Tensor:
    """Consistency distillation loss for one preprocessed record.

    The online branch runs at step n + k on the stored noisy latent; the
    target branch runs at step n on the guidance-augmented solver output
    and never contributes gradients.  With `use_ema_target` the target
    weights come from `theta_minus`.  `n_hi` overrides the online step
    (probe hook; defaults to record.n + schedule.k).
    """
    config.validate()
    n_lo = int(record.n)
    if n_hi is None:
        n_hi = n_lo + schedule.k
    z_hi = np.asarray(record.z_noisy, dtype=np.float64)
    target_input = (np.asarray(record.z_target, dtype=np.float64)
                    + lam * np.asarray(record.guidance, dtype=np.float64))
    c = np.asarray(record.prompt, dtype=np.float64)
    omega = float(record.omega)

    online = cm_forward(theta, Tensor(z_hi), omega, lam, Tensor(c), n_hi, schedule)
    target_theta = theta_minus if (config.use_ema_target and theta_minus is not None) else theta
    with ad.no_grad():
        target = cm_forward(target_theta, Tensor(target_input), omega, lam,
                            Tensor(c), n_lo, schedule)
    return pseudo_huber(ad.sub(online, target.detach()), config.huber_c)


def update_ema(theta: ConsistencyParams, theta_minus: ConsistencyParams,
               mu: float) -> ConsistencyParams:
    """theta_minus' = mu * theta + (1 - mu) * theta_minus, elementwise."""
    for (_, src), (_, dst) in zip(theta.tensors(), theta_minus.tensors()):
        dst.data = mu * src.data + (1.0 - mu) * dst.data
    return theta_minus


def multistep_sample(theta: ConsistencyParams, steps: int, omega: float, lam: float,
                     c, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Few-step consistency sampling; deterministic in the seed.

    Starts from Gaussian noise at the top step, alternates clean
    prediction and re-noising down an evenly spaced sub-grid whose last
    index is 1, and returns the final clean prediction.
    """
    if steps < 1 or steps > schedule.n_steps:
        raise ValueError(f"steps {steps} outside [1, {schedule.n_steps}]")
    from .solver import sample_grid

    grid = sample_grid(schedule.n_steps, steps)
    rng = Rng(seed)
    shape = theta.latent_shape
    c_arr = np.asarray(c, dtype=np.float64)
    z = rng.normal_array(shape)
    x0 = None
    with ad.no_grad():
        for i, n in enumerate(grid):
            x0 = cm_forward(theta, Tensor(z), omega, lam, Tensor(c_arr),
                            int(n), schedule).data
            if i + 1 < len(grid):
                n_next = int(grid[i + 1])
                noise = rng.normal_array(shape)
                z = (schedule.alpha[n_next - 1] * x0
                     + schedule.sigma[n_next - 1] * noise)
    return x0
