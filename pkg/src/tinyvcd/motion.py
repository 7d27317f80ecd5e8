"""Motion guidance from temporal attention.

The motion of a latent is summarized by its frame-axis attention map.
Guidance compares a sample's map against a reference map, masked down to
each row's single strongest activation, and steers the sample with the
gradient of the squared masked residual.  The reference map and mask are
constants; only the sample side is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .teacher import DenoiserParams, attention_from_latent


@dataclass
class TemporalAttentionMap:
    """Row-stochastic P x F x F map, P = H*W spatial positions."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[1] != self.values.shape[2]:
            raise ValueError(f"attention map must be P x F x F, got {self.values.shape}")

    def validate(self) -> None:
        if np.max(np.abs(self.values.sum(axis=-1) - 1.0)) > 1e-9:
            raise ValueError("attention rows must sum to 1")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("attention entries must lie in [0, 1]")


@dataclass
class AttentionMask:
    """One-hot P x F x F mask marking each row's highest activation."""

    values: np.ndarray

    def validate(self) -> None:
        vals = self.values
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        if not np.all(vals.sum(axis=-1) == 1.0):
            raise ValueError("each mask row must contain exactly one 1")


def temporal_attention(params: DenoiserParams, z) -> TemporalAttentionMap:
    """Attention map of a latent under the teacher's Q/K heads."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    with ad.no_grad():
        attn, _ = attention_from_latent(params, z)
    return TemporalAttentionMap(attn.data)


def attention_mask(a_ref: TemporalAttentionMap) -> AttentionMask:
    """One-hot argmax of each reference row; ties go to the lowest index."""
    idx = np.argmax(a_ref.values, axis=-1)
    mask = np.zeros_like(a_ref.values)
    p, f, _ = a_ref.values.shape
    pi, fi = np.meshgrid(np.arange(p), np.arange(f), indexing="ij")
    mask[pi, fi, idx] = 1.0
    return AttentionMask(mask)


def pta_energy(params: DenoiserParams, z, a_ref: TemporalAttentionMap,
               mask: AttentionMask) -> Tensor:
    """Squared masked residual between reference and sample attention."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    attn, _ = attention_from_latent(params, z)
    if a_ref.values.shape != attn.shape or mask.values.shape != attn.shape:
        raise ValueError(f"reference/mask shape {a_ref.values.shape} does not match "
                         f"attention shape {attn.shape}")
    resid = ad.mul(Tensor(mask.values), ad.sub(Tensor(a_ref.values), attn))
    return ad.tsum(ad.square(resid))


def pta_gradient(params: DenoiserParams, z: np.ndarray, a_ref: TemporalAttentionMap,
                 mask: AttentionMask) -> np.ndarray:
    """Reverse-mode gradient of the guidance energy w.r.t. the latent."""
    probe = Tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    energy = pta_energy(params, probe, a_ref, mask)
    energy.backward()
    return probe.grad if probe.grad is not None else np.zeros_like(probe.data)
