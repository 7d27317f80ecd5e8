"""DDIM solver, its guidance-augmented variants, and DDIM inversion.

The DDIM update is computed in ratio form,

    z_lo = (alpha_lo / alpha_hi) * z_hi + (sigma_lo - sigma_hi * alpha_lo / alpha_hi) * eps_hat,

which is algebraically the usual predict-x0-then-renoise rule but makes
the no-op step (n_lo == n_hi) an exact identity in floating point.

Guidance conventions: the classifier-free combination treats the solver
symbol as the *increment* z_lo - z_hi, which collapses to the plain
conditional step at omega = 0; motion guidance adds the precomputed
energy gradient scaled by lambda, unnormalized, on top of the CFG
solution.  Both reductions (omega = 0, lambda = 0) are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .teacher import DenoiserParams, NoiseSchedule, denoiser_forward
from .toyworld import PROMPT_DIM


@dataclass
class SolveRequest:
    """One augmented-solver invocation: latent at step n+k down to step n."""

    z_hi: np.ndarray
    n: int
    k: int
    omega: float
    c: np.ndarray
    lam: float = 0.0
    guidance_grad: np.ndarray | None = None

    def validate(self, schedule: NoiseSchedule) -> None:
        if self.n < 1 or self.n + self.k > schedule.n_steps:
            raise ValueError(f"window [{self.n}, {self.n + self.k}] outside schedule")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lam > 0 and self.guidance_grad is None:
            raise ValueError("lambda > 0 requires a guidance gradient")


def _coeffs(schedule: NoiseSchedule, n_hi: int, n_lo: int) -> tuple[float, float]:
    a_hi, a_lo = schedule.alpha[n_hi - 1], schedule.alpha[n_lo - 1]
    s_hi, s_lo = schedule.sigma[n_hi - 1], schedule.sigma[n_lo - 1]
    ratio = a_lo / a_hi
    return ratio, s_lo - s_hi * ratio


def ddim_step(params: DenoiserParams, schedule: NoiseSchedule, z_hi: np.ndarray,
              n_hi: int, n_lo: int, c: np.ndarray, denoiser=None) -> np.ndarray:
    """One deterministic DDIM update from step n_hi down to n_lo.

    `denoiser` overrides the teacher network (used by oracle tests).
    """
    if n_lo > n_hi:
        raise ValueError(f"step order violated: n_lo={n_lo} > n_hi={n_hi}")
    if not (1 <= n_lo and n_hi <= schedule.n_steps):
        raise ValueError(f"steps [{n_lo}, {n_hi}] outside schedule")
    fn = denoiser or (lambda z, cc, n: denoiser_forward(params, z, cc, n).data)
    with ad.no_grad():
        eps_hat = fn(z_hi, c, n_hi)
    ratio, eps_coeff = _coeffs(schedule, n_hi, n_lo)
    return ratio * z_hi + eps_coeff * eps_hat


def cfg_solve(params: DenoiserParams, schedule: NoiseSchedule, z_hi: np.ndarray,
              n: int, k: int, omega: float, c: np.ndarray, denoiser=None) -> np.ndarray:
    """Classifier-free-guided solver solution from step n+k down to n."""
    cond = ddim_step(params, schedule, z_hi, n + k, n, c, denoiser)
    if omega == 0.0:
        return cond
    null = np.zeros(PROMPT_DIM)
    uncond = ddim_step(params, schedule, z_hi, n + k, n, null, denoiser)
    return cond + omega * (cond - uncond)


def augmented_solve(request: SolveRequest, params: DenoiserParams,
                    schedule: NoiseSchedule, denoiser=None) -> np.ndarray:
    """CFG solution plus lambda-scaled motion-guidance gradient."""
    request.validate(schedule)
    base = cfg_solve(params, schedule, request.z_hi, request.n, request.k,
                     request.omega, request.c, denoiser)
    if request.lam == 0.0:
        return base
    return base + request.lam * request.guidance_grad


def ddim_invert(params: DenoiserParams, schedule: NoiseSchedule, z0: np.ndarray,
                target_n: int, c: np.ndarray, denoiser=None) -> np.ndarray:
    """Map a clean latent to its trajectory point at step target_n.

    Runs the DDIM update in reverse step order 1 -> target_n, evaluating
    the denoiser at the lower step of each sub-interval (the standard
    inversion approximation).
    """
    if not (1 <= target_n <= schedule.n_steps):
        raise ValueError(f"target step {target_n} outside schedule")
    fn = denoiser or (lambda z, cc, n: denoiser_forward(params, z, cc, n).data)
    z = z0
    for n in range(1, target_n):
        with ad.no_grad():
            eps_hat = fn(z, c, n)
        # invert the downward update for the interval [n + 1, n]
        ratio, eps_coeff = _coeffs(schedule, n + 1, n)
        z = (z - eps_coeff * eps_hat) / ratio
    return z


def ddim_sample(params: DenoiserParams, schedule: NoiseSchedule, z_init: np.ndarray,
                c: np.ndarray, steps: int, omega: float = 0.0, denoiser=None) -> np.ndarray:
    """Multi-step (optionally CFG-augmented) DDIM chain from pure noise.

    Visits `steps` indices evenly spaced from n_steps down to 1 and
    returns the latent at step 1 (t = eps, effectively clean).
    """
    grid = sample_grid(schedule.n_steps, steps)
    z = z_init
    for i in range(len(grid) - 1):
        z = cfg_solve(params, schedule, z, int(grid[i + 1]),
                      int(grid[i] - grid[i + 1]), omega, c, denoiser)
    return z


def sample_grid(n_steps: int, steps: int) -> np.ndarray:
    """Decreasing step indices, evenly spaced from n_steps to 1."""
    if steps < 1 or steps > n_steps:
        raise ValueError(f"steps {steps} outside [1, {n_steps}]")
    return np.unique(np.round(np.linspace(n_steps, 1, steps)).astype(int))[::-1]
