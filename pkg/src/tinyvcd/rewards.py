"""Differentiable toy reward models and the reward objective.

Two reward families mirror an image-text scorer and a video-text
scorer.  Both are pure penalties (bounded above by zero) built from
blob statistics of the scored frames: a toroidal soft centroid, total
mass, and per-channel mass ratio, each compared against the same
statistics of a frame rendered from the caption's own factors.  The
decoder between student output and scored pixels is the identity.

Centroids are circular means of mass-normalized intensity, so blobs
straddling the frame boundary score exactly like interior ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .consistency import ConsistencyParams, cm_forward
from .rng import Rng
from .teacher import NoiseSchedule
from .toyworld import CaptionFactors, PromptEmbedding, decode_prompt, render_video

_WEIGHT_FLOOR = 1e-4
_OVERSHOOT = 1.25  # sup of dot(d, v) - |d - v|^2 over d is 1.25 |v|^2


@dataclass
class RewardWeights:
    beta_img: float = 0.2
    beta_v: float = 0.5
    m_frames: int = 2

    def validate(self, frames: int) -> None:
        if self.beta_img < 0 or self.beta_v < 0:
            raise ValueError("reward weights must be non-negative")
        if not (1 <= self.m_frames <= frames):
            raise ValueError(f"m_frames {self.m_frames} outside [1, {frames}]")


def _as_prompt(c) -> np.ndarray:
    if isinstance(c, PromptEmbedding):
        return c.values
    return np.asarray(c, dtype=np.float64)


def _soft_centroid(frame: Tensor) -> tuple[Tensor, Tensor]:
    """Circular-mean position of a C x H x W frame, in unit fractions."""
    c, h, w = frame.shape
    chans = [ad.reshape(ad.narrow(frame, 0, i, 1), (h, w)) for i in range(c)]
    acc = chans[0]
    for extra in chans[1:]:
        acc = ad.add(acc, extra)
    intensity = ad.scale(acc, 1.0 / c)
    weights = ad.add(ad.relu(intensity), Tensor(_WEIGHT_FLOOR))
    weights = ad.div(weights, ad.tsum(weights))

    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    two_pi = 2.0 * math.pi

    def circ(coords_2d):
        ang = Tensor(two_pi * coords_2d)
        s = ad.tsum(ad.mul(weights, ad.sin(ang)))
        csum = ad.add(ad.tsum(ad.mul(weights, ad.cos(ang))), Tensor(1e-9))
        return ad.scale(ad.atan2(s, csum), 1.0 / two_pi)

    cx = circ(np.broadcast_to(xs, (h, w)).copy())
    cy = circ(np.broadcast_to(ys[:, None], (h, w)).copy())
    return cx, cy


def _mass(frame: Tensor) -> Tensor:
    c = frame.shape[0]
    return ad.scale(ad.tsum(frame), 1.0 / c)


def _channel_ratio(frame: Tensor) -> Tensor:
    c = frame.shape[0]
    masses = ad.concat(
        [ad.reshape(ad.tsum(ad.narrow(frame, 0, i, 1)), (1,)) for i in range(c)])
    norm = ad.sqrt(ad.add(ad.tsum(ad.square(masses)), Tensor(1e-12)))
    return ad.div(masses, norm)


def _wrapped_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    d = ad.wrap_unit(ad.sub(a, b))
    return ad.square(d)


def reward_img(frame, c) -> Tensor:
    """Appearance score of one frame against its caption; at most 0.

    Compares soft centroid, mass, and channel ratio with the statistics
    of the caption's own first rendered frame.
    """
    frame = frame if isinstance(frame, Tensor) else Tensor(frame)
    factors = decode_prompt(PromptEmbedding(_as_prompt(c)))
    ch, h, w = frame.shape
    ref = render_video(factors, frames=1, channels=ch, height=h, width=w).data[0]
    with ad.no_grad():
        ref_cx, ref_cy = _soft_centroid(Tensor(ref))
        ref_mass = _mass(Tensor(ref))
    mix = np.asarray(factors.channel_mix[:ch])

    cx, cy = _soft_centroid(frame)
    pos = ad.add(_wrapped_sq_dist(cx, Tensor(ref_cx.data)),
                 _wrapped_sq_dist(cy, Tensor(ref_cy.data)))
    mass_pen = ad.square(ad.sub(_mass(frame), Tensor(ref_mass.data)))
    chan_pen = ad.tsum(ad.square(ad.sub(_channel_ratio(frame), Tensor(mix))))
    return ad.scale(ad.add(ad.add(pos, mass_pen), chan_pen), -1.0)


def reward_vid(video, c) -> Tensor:
    """Motion-alignment score of a video against its caption; at most 0.

    Per consecutive frame pair: dot(displacement, target) minus the
    squared displacement error, shifted so the per-pair supremum is 0.
    Targets are the caption render's own centroid displacements.
    """
    video = video if isinstance(video, Tensor) else Tensor(video)
    f, ch, h, w = video.shape
    if f < 2:
        raise ValueError("video reward needs at least 2 frames")
    factors = decode_prompt(PromptEmbedding(_as_prompt(c)))
    ref = render_video(factors, frames=f, channels=ch, height=h, width=w).data

    with ad.no_grad():
        ref_cent = [_soft_centroid(Tensor(ref[i])) for i in range(f)]
        ref_disp = []
        for i in range(f - 1):
            dx = ad.wrap_unit(ad.sub(ref_cent[i + 1][0], ref_cent[i][0])).item()
            dy = ad.wrap_unit(ad.sub(ref_cent[i + 1][1], ref_cent[i][1])).item()
            ref_disp.append((dx, dy))

    cents = [_soft_centroid(ad.reshape(ad.narrow(video, 0, i, 1), (ch, h, w)))
             for i in range(f)]
    total = Tensor(0.0)
    for i, (vx, vy) in enumerate(ref_disp):
        dx = ad.wrap_unit(ad.sub(cents[i + 1][0], cents[i][0]))
        dy = ad.wrap_unit(ad.sub(cents[i + 1][1], cents[i][1]))
        dot = ad.add(ad.scale(dx, vx), ad.scale(dy, vy))
        err = ad.add(ad.square(ad.sub(dx, Tensor(vx))), ad.square(ad.sub(dy, Tensor(vy))))
        bound = _OVERSHOOT * (vx * vx + vy * vy)
        total = ad.add(total, ad.sub(ad.sub(dot, err), Tensor(bound)))
    return ad.scale(total, 1.0 / len(ref_disp))


def reward_terms(theta: ConsistencyParams, batch, weights: RewardWeights,
                 frame_seed: int, schedule: NoiseSchedule) -> tuple[Tensor | None, Tensor | None]:
    """Per-family objective terms averaged over the batch.

    `batch` holds (z_noisy, omega, lam, prompt, n) tuples; the clean
    prediction is re-generated by the student, so gradients reach theta.
    Frame subsets for the image reward are drawn without replacement
    from `frame_seed`.
    """
    frames = theta.latent_shape[0]
    weights.validate(frames)
    rng = Rng(frame_seed)
    img_terms, vid_terms = [], []
    for z, omega, lam, prompt, n in batch:
        x0 = cm_forward(theta, Tensor(np.asarray(z, dtype=np.float64)),
                        float(omega), float(lam),
                        Tensor(np.asarray(prompt, dtype=np.float64)), int(n), schedule)
        if weights.beta_img > 0:
            picks = rng.choice(frames, weights.m_frames, replace=False)
            ch, h, w = x0.shape[1:]
            term = Tensor(0.0)
            for m in picks:
                frame = ad.reshape(ad.narrow(x0, 0, int(m), 1), (ch, h, w))
                term = ad.add(term, reward_img(frame, prompt))
            img_terms.append(term)
        if weights.beta_v > 0:
            vid_terms.append(reward_vid(x0, prompt))

    def avg(terms):
        if not terms:
            return None
        acc = ad.scale(terms[0], 1.0 / len(terms))
        for t in terms[1:]:
            acc = ad.add(acc, ad.scale(t, 1.0 / len(terms)))
        return acc

    return avg(img_terms), avg(vid_terms)


def reward_objective(theta: ConsistencyParams, batch, weights: RewardWeights,
                     frame_seed: int, schedule: NoiseSchedule) -> Tensor:
    """Mixture objective: beta_img * sum-of-M-frames R_img + beta_v * R_v."""
    if weights.beta_img == 0.0 and weights.beta_v == 0.0:
        return Tensor(0.0)
    j_img, j_v = reward_terms(theta, batch, weights, frame_seed, schedule)
    total = Tensor(0.0)
    if j_img is not None:
        total = ad.add(total, ad.scale(j_img, weights.beta_img))
    if j_v is not None:
        total = ad.add(total, ad.scale(j_v, weights.beta_v))
    return total
