"""Procedural moving-blob videos and their caption embeddings.

A "video" is an F x C x H x W array holding a Gaussian bump that drifts
with constant velocity, wrapping toroidally.  The eight generative
factors double as the caption: the prompt embedding is an affine
normalization of the factors into [-1, 1]^8, and the all-zero vector is
the null prompt.  The latent encoder is the identity, so videos and
latents share a shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Rng, derive_seed

PROMPT_DIM = 8

# (lo, hi) per factor: x0, y0, vel_x, vel_y, intensity, radius, mix0, mix1
FACTOR_RANGES = (
    (0.0, 1.0), (0.0, 1.0),
    (-0.1, 0.1), (-0.1, 0.1),
    (0.2, 1.0),
    (0.05, 0.3),
    (0.0, 1.0), (0.0, 1.0),
)


@dataclass
class CaptionFactors:
    """Generative factors of one blob video; doubles as its caption."""

    blob_x0: float
    blob_y0: float
    vel_x: float
    vel_y: float
    intensity: float
    radius: float
    channel_mix: tuple[float, float]

    def as_vector(self) -> np.ndarray:
        return np.array([self.blob_x0, self.blob_y0, self.vel_x, self.vel_y,
                         self.intensity, self.radius,
                         self.channel_mix[0], self.channel_mix[1]])

    @staticmethod
    def from_vector(v) -> "CaptionFactors":
        v = np.asarray(v, dtype=np.float64)
        return CaptionFactors(float(v[0]), float(v[1]), float(v[2]), float(v[3]),
                              float(v[4]), float(v[5]), (float(v[6]), float(v[7])))

    def validate(self) -> None:
        vec = self.as_vector()
        for x, (lo, hi) in zip(vec, FACTOR_RANGES):
            if not (lo - 1e-12 <= x <= hi + 1e-12):
                raise ValueError(f"factor {x} outside [{lo}, {hi}]")
        norm = np.hypot(*self.channel_mix)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"channel_mix must be unit-norm, got |mix| = {norm}")

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vel_x, self.vel_y))


@dataclass
class PromptEmbedding:
    """Caption as a length-8 vector in [-1, 1]; zeros is the null prompt."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(PROMPT_DIM)

    @staticmethod
    def null() -> "PromptEmbedding":
        return PromptEmbedding(np.zeros(PROMPT_DIM))


@dataclass
class VideoLatent:
    """F x C x H x W latent; identity encoder keeps it in pixel space."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError(f"latent must be F x C x H x W, got shape {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass
class MotionProfile:
    """Dataset motion knob: share of static clips and the speed cap."""

    static_fraction: float = 0.25
    max_speed: float = 0.08


def render_video(factors: CaptionFactors, frames: int = 8, channels: int = 2,
                 height: int = 8, width: int = 8) -> VideoLatent:
    """Rasterize the blob trajectory. Deterministic in the factors."""
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    data = np.zeros((frames, channels, height, width))
    mix = np.asarray(factors.channel_mix)[:channels]
    two_r2 = 2.0 * factors.radius * factors.radius
    for f in range(frames):
        cx = factors.blob_x0 + f * factors.vel_x
        cy = factors.blob_y0 + f * factors.vel_y
        dx = xs - cx
        dx -= np.round(dx)  # toroidal wrap into [-0.5, 0.5)
        dy = ys - cy
        dy -= np.round(dy)
        bump = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / two_r2)
        data[f] = factors.intensity * mix[:, None, None] * bump[None]
    return VideoLatent(data)


def encode_prompt(factors: CaptionFactors) -> PromptEmbedding:
    """Affine map of the 8 factor scalars onto [-1, 1] each."""
    vec = factors.as_vector()
    lo = np.array([r[0] for r in FACTOR_RANGES])
    hi = np.array([r[1] for r in FACTOR_RANGES])
    return PromptEmbedding(2.0 * (vec - lo) / (hi - lo) - 1.0)


def decode_prompt(embedding: PromptEmbedding) -> CaptionFactors:
    """Inverse of encode_prompt."""
    lo = np.array([r[0] for r in FACTOR_RANGES])
    hi = np.array([r[1] for r in FACTOR_RANGES])
    vec = lo + (embedding.values + 1.0) * 0.5 * (hi - lo)
    return CaptionFactors.from_vector(vec)


def sample_factors(rng: Rng, profile: MotionProfile) -> CaptionFactors:
    u = rng.uniforms(8)
    static = u[0] < profile.static_fraction
    vx = 0.0 if static else (2.0 * u[1] - 1.0) * profile.max_speed
    vy = 0.0 if static else (2.0 * u[2] - 1.0) * profile.max_speed
    phi = u[3] * np.pi / 2.0
    return CaptionFactors(
        blob_x0=float(u[4]),
        blob_y0=float(u[5]),
        vel_x=float(vx),
        vel_y=float(vy),
        intensity=float(0.2 + 0.8 * u[6]),
        radius=float(0.05 + 0.25 * u[7]),
        channel_mix=(float(np.cos(phi)), float(np.sin(phi))),
    )


def sample_dataset(seed: int, size: int, profile: MotionProfile | None = None,
                   frames: int = 8, channels: int = 2, height: int = 8,
                   width: int = 8) -> list[tuple[VideoLatent, PromptEmbedding, CaptionFactors]]:
    """Deterministic toy dataset; each sample has its own derived stream."""
    if size < 1:
        raise ValueError("size must be >= 1")
    profile = profile or MotionProfile()
    out = []
    for i in range(size):
        factors = sample_factors(Rng(derive_seed(seed, i)), profile)
        video = render_video(factors, frames, channels, height, width)
        out.append((video, encode_prompt(factors), factors))
    return out


def soft_centroid(frame: np.ndarray) -> tuple[float, float]:
    """Intensity-weighted mean position of a C x H x W frame, in fractions."""
    intensity = frame.mean(axis=0)
    h, w = intensity.shape
    weights = np.maximum(intensity, 0.0) + 1e-12
    weights = weights / weights.sum()
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return float((weights.sum(axis=0) * xs).sum()), float((weights.sum(axis=1) * ys).sum())
