"""Teacher diffusion model: VP noise schedule, denoiser, pretraining.

The denoiser predicts the injected noise (epsilon parameterization) from
a noisy latent, the caption embedding, and the discrete step index.  It
is a per-frame MLP wrapped around a single temporal-attention block that
acts on the raw latent's channel vectors per spatial position, so the
attention map doubles as the motion descriptor used for guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import Adam
from .rng import Rng
from .toyworld import PROMPT_DIM, VideoLatent


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last completed step."""

    def __init__(self, step: int, message: str = ""):
        super().__init__(message or f"training loss became non-finite at step {step}")
        self.step = step


# -- noise schedule -----------------------------------------------------------

T_EPS = 1e-3
T_MAX = 1.0
ALPHA_FLOOR = 0.02
_COSINE_SHIFT = 0.008


@dataclass
class NoiseSchedule:
    """Variance-preserving discretization: z_t = alpha * z0 + sigma * noise."""

    n_steps: int
    k: int
    t: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    def validate(self) -> None:
        n = self.n_steps
        if not (1 <= self.k <= n - 1):
            raise ValueError(f"skip k={self.k} outside [1, {n - 1}]")
        if self.alpha[0] <= 0.999:
            raise ValueError("alpha at t_1 must exceed 0.999")
        if self.alpha[-1] >= 0.05:
            raise ValueError("alpha at t_N must stay below 0.05")
        if np.any(np.diff(self.alpha) >= 0):
            raise ValueError("alpha must be strictly decreasing")
        if np.any(np.diff(self.sigma) <= 0):
            raise ValueError("sigma must be strictly increasing")
        vp = self.alpha ** 2 + self.sigma ** 2
        if np.max(np.abs(vp - 1.0)) > 1e-12:
            raise ValueError("variance-preserving identity violated")


def make_schedule(n_steps: int = 64, kind: str = "cosine", k: int = 5) -> NoiseSchedule:
    """Cosine VP schedule on a uniform t-grid from 1e-3 to 1."""
    if n_steps < 8:
        raise ValueError("n_steps must be at least 8")
    if kind != "cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")
    t = np.linspace(T_EPS, T_MAX, n_steps)
    raw = np.cos(0.5 * np.pi * (t + _COSINE_SHIFT) / (1.0 + _COSINE_SHIFT))
    alpha = ALPHA_FLOOR + (1.0 - ALPHA_FLOOR) * raw
    sigma = np.sqrt(1.0 - alpha ** 2)
    sched = NoiseSchedule(n_steps=n_steps, k=k, t=t, alpha=alpha, sigma=sigma)
    sched.validate()
    return sched


def add_noise(schedule: NoiseSchedule, z0: np.ndarray, n: int, noise: np.ndarray) -> np.ndarray:
    """Forward noising to step n (1-based)."""
    if not (1 <= n <= schedule.n_steps):
        raise ValueError(f"step {n} outside [1, {schedule.n_steps}]")
    if z0.shape != noise.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {noise.shape}")
    return schedule.alpha[n - 1] * z0 + schedule.sigma[n - 1] * noise


# -- denoiser -----------------------------------------------------------------

TIME_WIDTH = 16
HEAD_DIM = 16
HIDDEN = 64
# The Q/K similarity heads are fixed random projections: they are not
# optimized (see trainable_tensors), so the guidance-energy gradient keeps a
# stable, init-controlled magnitude relative to the latents.
ATTN_STD = 0.2


@dataclass
class DenoiserParams:
    """Weights of the toy denoiser; all fields are graph tensors."""

    frames: int
    channels: int
    height: int
    width: int
    n_total: int
    hidden: int
    head_dim: int
    w_in: Tensor
    b_in: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_mix: Tensor
    b_mix: Tensor
    w_out: Tensor
    b_out: Tensor
    w_skip: Tensor
    b_skip: Tensor
    w_gain: Tensor
    b_gain: Tensor

    _TENSOR_FIELDS = ("w_in", "b_in", "w_q", "w_k", "w_v", "w_o", "w_mix",
                      "b_mix", "w_out", "b_out", "w_skip", "b_skip",
                      "w_gain", "b_gain")
    _FROZEN_FIELDS = ("w_q", "w_k")

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in self._TENSOR_FIELDS]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.tensors()]

    def trainable_tensors(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors() if n not in self._FROZEN_FIELDS]

    def trainable_parameters(self) -> list[Tensor]:
        return [t for _, t in self.trainable_tensors()]

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)

    def copy(self) -> "DenoiserParams":
        kw = {name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.tensors()}
        return replace(self, **kw)

    def num_params(self) -> int:
        return sum(t.size for _, t in self.tensors())


def init_denoiser(rng: Rng, frames: int = 8, channels: int = 2, height: int = 8,
                  width: int = 8, n_total: int = 64, hidden: int = HIDDEN,
                  head_dim: int = HEAD_DIM) -> DenoiserParams:
    flat = channels * height * width
    in_dim = flat + TIME_WIDTH + PROMPT_DIM

    def normal(shape, std):
        return Tensor(rng.normal_array(shape) * std, requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    w_in = rng.normal_array((in_dim, hidden)) / math.sqrt(in_dim)
    w_in[flat + TIME_WIDTH:, :] = 0.0  # prompt rows start at zero so the null
    # prompt and an untrained caption produce identical outputs
    params = DenoiserParams(
        frames=frames, channels=channels, height=height, width=width,
        n_total=n_total, hidden=hidden, head_dim=head_dim,
        w_in=Tensor(w_in, requires_grad=True),
        b_in=zeros((hidden,)),
        w_q=normal((channels, head_dim), ATTN_STD),
        w_k=normal((channels, head_dim), ATTN_STD),
        w_v=normal((channels, head_dim), 1.0 / math.sqrt(channels)),
        w_o=normal((head_dim, channels), 1.0 / math.sqrt(head_dim)),
        w_mix=normal((hidden + flat, hidden), 1.0 / math.sqrt(hidden + flat)),
        b_mix=zeros((hidden,)),
        w_out=normal((hidden, flat), 0.1 / math.sqrt(hidden)),
        b_out=zeros((flat,)),
        w_skip=zeros((TIME_WIDTH, 1)),
        b_skip=zeros((1,)),
        w_gain=zeros((TIME_WIDTH, 1)),
        b_gain=zeros((1,)),
    )
    assert params.num_params() <= 50_000
    return params


def time_features(n: int, n_total: int, width: int = TIME_WIDTH) -> np.ndarray:
    """Sinusoidal embedding of the normalized step n/n_total."""
    s = n / n_total
    freqs = 2.0 ** np.arange(width // 2)
    ang = math.pi * s * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def attention_from_latent(params: DenoiserParams, z: Tensor) -> tuple[Tensor, Tensor]:
    """Frame-axis self-attention of a latent.

    Reshapes F x C x H x W to (H*W) x F x C, applies the Q/K/V heads per
    spatial position, and softmaxes scores over the last (frame) axis.
    Returns (attention map (H*W) x F x F, attended values (H*W) x F x C).
    """
    f, c, h, w = params.frames, params.channels, params.height, params.width
    if z.shape != (f, c, h, w):
        raise ValueError(f"latent shape {z.shape} does not match params {params.latent_shape}")
    if f < 2:
        raise ValueError("temporal attention needs at least 2 frames")
    zbar = ad.reshape(ad.transpose(z, (2, 3, 0, 1)), (h * w, f, c))
    q = ad.matmul(zbar, params.w_q)
    k = ad.matmul(zbar, params.w_k)
    v = ad.matmul(zbar, params.w_v)
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(params.head_dim))
    attn = ad.softmax_lastdim(logits)
    out = ad.matmul(ad.matmul(attn, v), params.w_o)
    return attn, out


def denoiser_forward(params: DenoiserParams, z, c, n: int,
                     extra_emb: Tensor | None = None) -> Tensor:
    """Noise prediction for latent z at step n under caption c.

    Differentiable in z, c, and every parameter.  `extra_emb` is an
    optional addition to the time embedding (the student injects its
    guidance-scale conditioning there).
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    c = c if isinstance(c, Tensor) else Tensor(c)
    f, ch, h, w = params.latent_shape
    if z.shape != (f, ch, h, w):
        raise ValueError(f"latent shape {z.shape} does not match params {params.latent_shape}")
    if c.shape != (PROMPT_DIM,):
        raise ValueError(f"prompt must have shape ({PROMPT_DIM},), got {c.shape}")
    if not (1 <= n <= params.n_total):
        raise ValueError(f"step {n} outside [1, {params.n_total}]")
    flat = ch * h * w

    t_feat = Tensor(time_features(n, params.n_total))
    emb = ad.add(t_feat, extra_emb) if extra_emb is not None else t_feat

    x = ad.reshape(z, (f, flat))
    inp = ad.concat([x, ad.repeat0(emb, f), ad.repeat0(c, f)], axis=1)
    h1 = ad.tanh(ad.add(ad.matmul(inp, params.w_in), params.b_in))

    _, attn_out = attention_from_latent(params, z)
    attn_flat = ad.reshape(ad.transpose(ad.reshape(attn_out, (h, w, f, ch)), (2, 3, 0, 1)),
                           (f, flat))

    h2 = ad.tanh(ad.add(ad.matmul(ad.concat([h1, attn_flat], axis=1), params.w_mix),
                        params.b_mix))
    out = ad.add(ad.matmul(h2, params.w_out), params.b_out)

    gain = ad.reshape(ad.add(ad.matmul(ad.reshape(emb, (1, TIME_WIDTH)), params.w_skip),
                             params.b_skip), ())
    return ad.add(ad.reshape(out, (f, ch, h, w)), ad.mul(z, gain))


# -- pretraining ----------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch: int = 8
    prompt_dropout: float = 0.1
    seed: int = 0


def pretrain_teacher(dataset, schedule: NoiseSchedule, config: PretrainConfig,
                     params: DenoiserParams | None = None) -> tuple[DenoiserParams, list[float]]:
    """Epsilon-prediction pretraining with prompt dropout for CFG support.

    Returns the trained params and the per-step loss curve.  Raises
    TrainingDiverged if the loss goes non-finite.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = Rng(config.seed).spawn(0x7EAC)
    video0 = dataset[0][0]
    if params is None:
        params = init_denoiser(Rng(config.seed).spawn(0x1217),
                               frames=video0.frames, channels=video0.channels,
                               height=video0.height, width=video0.width,
                               n_total=schedule.n_steps)
    opt = Adam(params.trainable_parameters(), lr=config.lr)
    losses: list[float] = []
    shape = video0.data.shape
    for step in range(config.steps):
        idx = rng.choice(len(dataset), config.batch)
        terms = []
        for i in idx:
            video, prompt, _ = dataset[i]
            n = rng.randint(1, schedule.n_steps)
            noise = rng.normal_array(shape)
            z_t = add_noise(schedule, video.data, n, noise)
            dropped = rng.uniform() < config.prompt_dropout
            c = np.zeros(PROMPT_DIM) if dropped else prompt.values
            eps_hat = denoiser_forward(params, Tensor(z_t), Tensor(c), n)
            terms.append(ad.mean(ad.square(ad.sub(eps_hat, Tensor(noise)))))
        loss = ad.scale(terms[0], 1.0 / len(terms))
        for term in terms[1:]:
            loss = ad.add(loss, ad.scale(term, 1.0 / len(terms)))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
    return params, losses
