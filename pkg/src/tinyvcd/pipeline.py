"""Data preprocessing and the distillation training loop.

Preprocessing turns each (video, caption) pair into a solver-target
record: noise the clean latent to step n + k, run the CFG-augmented
teacher solver down to step n, and, inside the guidance window, attach
the motion-guidance gradient taken at the noisy latent.  Every record
is a pure function of its own derived seed, so output bytes do not
depend on worker count or ordering.

Training follows the precomputed-target recipe: per step, a consistency
loss over a few records (target = stored solver output plus lambda
times stored guidance) minus weighted reward objectives evaluated on
the student's own predictions.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .consistency import (CDLossConfig, ConsistencyParams, cd_loss, init_student,
                          update_ema)
from .motion import attention_mask, pta_gradient, temporal_attention
from .optim import Adam
from .packio import (PackHeader, PreprocessedRecord, read_pack, read_params,
                     write_pack, write_params)
from .rewards import RewardWeights, reward_terms
from .rng import Rng, derive_seed
from .solver import cfg_solve, ddim_invert
from .teacher import (DenoiserParams, NoiseSchedule, TrainingDiverged, add_noise,
                      make_schedule)
from .toyworld import PROMPT_DIM


@dataclass
class TrainConfig:
    """Knobs for preprocessing and distillation; file keys match field names.

    `lam` is the motion-guidance strength (the config-file key `lambda`
    is accepted as an alias; the natural name is a Python keyword).
    """

    steps: int = 4000
    lr: float = 1e-5
    cd_batch: int = 3
    reward_batch: int = 1
    omega_min: float = 5.0
    omega_max: float = 15.0
    tau: float = 0.5
    lam: float = 500.0
    k: int = 5
    n_steps: int = 64
    beta_img: float = 0.2
    beta_v: float = 0.5
    m_frames: int = 2
    use_ema_target: bool = False
    ema_mu: float = 0.95
    huber_c: float = 1e-3
    seed: int = 0
    window_rule: str = "maintext"   # "maintext": n >= N(1-tau); "alg1": n > N(1-tau)/k
    guide_static: bool = False      # also attach guidance to zero-motion clips
    reward_short_only: bool = True  # reward batches drawn from short-caption records
    short_fraction: float = 0.5

    def validate(self) -> None:
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError("tau must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.omega_min > self.omega_max:
            raise ValueError("omega_min must not exceed omega_max")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.window_rule not in ("maintext", "alg1"):
            raise ValueError(f"unknown window rule {self.window_rule!r}")

    def reward_weights(self) -> RewardWeights:
        return RewardWeights(self.beta_img, self.beta_v, self.m_frames)

    def cd_config(self) -> CDLossConfig:
        return CDLossConfig(self.huber_c, self.use_ema_target, self.ema_mu)


_CONFIG_ALIASES = {"lambda": "lam"}


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Flat key=value file -> TrainConfig; '#' starts a comment."""
    cfg = base or TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            key = _CONFIG_ALIASES.get(key, key)
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            kind = types[key]
            if kind == "bool":
                updates[key] = value.lower() in ("1", "true", "yes")
            elif kind == "int":
                updates[key] = int(value)
            elif kind == "float":
                updates[key] = float(value)
            else:
                updates[key] = value
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def in_guidance_window(n: int, n_steps: int, tau: float, k: int,
                       rule: str = "maintext") -> bool:
    """Whether step index n is inside the high-noise guidance window."""
    if rule == "maintext":
        return n >= n_steps * (1.0 - tau)
    if rule == "alg1":
        return n > n_steps * (1.0 - tau) / k
    raise ValueError(f"unknown window rule {rule!r}")


def record_lambda(record: PreprocessedRecord, config: TrainConfig) -> float:
    """Per-record guidance strength: lambda where guidance exists, else 0."""
    return config.lam if np.any(record.guidance) else 0.0


# -- preprocessing (Algorithm 1) -----------------------------------------------

_worker_state: dict = {}


def build_record(index: int, dataset, params: DenoiserParams,
                 schedule: NoiseSchedule, config: TrainConfig) -> PreprocessedRecord:
    """Record `index`, a pure function of (dataset, params, config, index)."""
    video, prompt, factors = dataset[index % len(dataset)]
    rseed = derive_seed(config.seed, index)
    rng = Rng(rseed)
    n_max = schedule.n_steps - schedule.k
    n = rng.randint(1, n_max)
    omega = rng.uniform(config.omega_min, config.omega_max)
    short = rng.uniform() < config.short_fraction
    noise = rng.normal_array(video.data.shape)

    z_noisy = add_noise(schedule, video.data, n + schedule.k, noise)
    z_target = cfg_solve(params, schedule, z_noisy, n, schedule.k, omega, prompt.values)

    windowed = in_guidance_window(n, schedule.n_steps, config.tau, schedule.k,
                                  config.window_rule)
    if windowed and (config.guide_static or factors.speed > 0.0):
        z_ref = ddim_invert(params, schedule, video.data, n + schedule.k, prompt.values)
        a_ref = temporal_attention(params, z_ref)
        mask = attention_mask(a_ref)
        guidance = pta_gradient(params, z_noisy, a_ref, mask)
    else:
        guidance = np.zeros_like(z_noisy)

    return PreprocessedRecord(
        record_seed=rseed, n=n, omega=float(np.float32(omega)), short_caption=short,
        prompt=prompt.values.astype(np.float32),
        z_noisy=z_noisy.astype(np.float32),
        z_target=z_target.astype(np.float32),
        guidance=guidance.astype(np.float32),
    )


def _init_worker(dataset, params, schedule, config):
    _worker_state.update(dataset=dataset, params=params, schedule=schedule,
                         config=config)


def _worker_build(index: int) -> PreprocessedRecord:
    s = _worker_state
    return build_record(index, s["dataset"], s["params"], s["schedule"], s["config"])


def preprocess(dataset, params: DenoiserParams, config: TrainConfig, out_path,
               num_records: int | None = None, workers: int = 1) -> dict:
    """Algorithm-1 preprocessing into a CDPK pack; returns a summary."""
    config.validate()
    schedule = make_schedule(config.n_steps, k=config.k)
    if schedule.n_steps != params.n_total:
        raise ValueError(f"schedule N={schedule.n_steps} does not match "
                         f"teacher n_total={params.n_total}")
    num_records = num_records if num_records is not None else len(dataset)
    indices = list(range(num_records))
    if workers > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker,
                      initargs=(dataset, params, schedule, config)) as pool:
            records = pool.map(_worker_build, indices, chunksize=32)
    else:
        records = [build_record(i, dataset, params, schedule, config)
                   for i in indices]

    video0 = dataset[0][0]
    header = PackHeader(
        n_steps=schedule.n_steps, k=schedule.k, frames=video0.frames,
        channels=video0.channels, height=video0.height, width=video0.width,
        record_count=len(records), omega_min=config.omega_min,
        omega_max=config.omega_max, tau=config.tau, lam=config.lam,
    )
    write_pack(out_path, header, records)
    guided = sum(1 for r in records if np.any(r.guidance))
    windowed = sum(1 for r in records
                   if in_guidance_window(r.n, schedule.n_steps, config.tau,
                                         schedule.k, config.window_rule))
    return {"records": len(records), "guided": guided, "windowed": windowed,
            "short_caption": sum(1 for r in records if r.short_caption)}


# -- training (Algorithm 2) ------------------------------------------------------


def train(pack_path, teacher: DenoiserParams, config: TrainConfig,
          out_dir=None) -> tuple[ConsistencyParams, list[dict]]:
    """Distill the student against a preprocessed pack.

    Total loss per step is the consistency loss minus the weighted
    reward objectives.  Returns the student and per-step metric rows
    (step, l_cd, j_img, j_v, total).  Checkpoints land in `out_dir`
    every 500 steps, newest two retained; on divergence the last good
    params are saved there before raising.
    """
    config.validate()
    header, records = read_pack(pack_path)
    if header.n_steps != teacher.n_total:
        raise ValueError("pack and teacher disagree on the step grid")
    schedule = make_schedule(header.n_steps, k=header.k)
    student = init_student(teacher)
    theta_minus = student.copy() if config.use_ema_target else None
    opt = Adam(student.trainable_parameters(), lr=config.lr)
    rng = Rng(config.seed).spawn(0xD157)
    cd_cfg = config.cd_config()
    weights = config.reward_weights()
    use_rewards = weights.beta_img > 0 or weights.beta_v > 0

    short_pool = [i for i, r in enumerate(records) if r.short_caption]
    reward_pool = short_pool if (config.reward_short_only and short_pool) \
        else list(range(len(records)))

    rows: list[dict] = []
    for step in range(config.steps):
        idx = rng.choice(len(records), config.cd_batch)
        terms = [cd_loss(student, records[i], record_lambda(records[i], config),
                         cd_cfg, schedule, theta_minus) for i in idx]
        l_cd = ad.scale(terms[0], 1.0 / len(terms))
        for t in terms[1:]:
            l_cd = ad.add(l_cd, ad.scale(t, 1.0 / len(terms)))

        loss = l_cd
        j_img_val = 0.0
        j_v_val = 0.0
        if use_rewards:
            ridx = rng.choice(len(reward_pool), config.reward_batch)
            batch = []
            for j in ridx:
                rec = records[reward_pool[j]]
                batch.append((rec.z_noisy, rec.omega, record_lambda(rec, config),
                              rec.prompt, rec.n + schedule.k))
            frame_seed = derive_seed(config.seed, 0xF00000 + step)
            j_img, j_v = reward_terms(student, batch, weights, frame_seed, schedule)
            if j_img is not None:
                loss = ad.sub(loss, ad.scale(j_img, weights.beta_img))
                j_img_val = j_img.item()
            if j_v is not None:
                loss = ad.sub(loss, ad.scale(j_v, weights.beta_v))
                j_v_val = j_v.item()

        total = loss.item()
        if not math.isfinite(total):
            if out_dir is not None:
                save_student(os.path.join(out_dir, "student_lastgood.cdpr"), student)
            raise TrainingDiverged(step)

        opt.zero_grad()
        loss.backward()
        opt.step()
        if theta_minus is not None:
            update_ema(student, theta_minus, config.ema_mu)

        rows.append({"step": step, "l_cd": l_cd.item(), "j_img": j_img_val,
                     "j_v": j_v_val, "total": total})
        if out_dir is not None and (step + 1) % 500 == 0:
            _checkpoint(out_dir, student, step + 1)

    return student, rows


def _checkpoint(out_dir, student: ConsistencyParams, step: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_student(os.path.join(out_dir, f"student_{step:06d}.cdpr"), student)
    kept = sorted(f for f in os.listdir(out_dir)
                  if f.startswith("student_") and f.endswith(".cdpr")
                  and f != "student_lastgood.cdpr")
    for stale in kept[:-2]:
        os.remove(os.path.join(out_dir, stale))


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("step,l_cd,j_img,j_v,total\n")
        for row in rows:
            fh.write(f"{row['step']},{row['l_cd']:.10g},{row['j_img']:.10g},"
                     f"{row['j_v']:.10g},{row['total']:.10g}\n")


# -- parameter persistence --------------------------------------------------------

_META_FIELDS = ("n_total", "frames", "channels", "height", "width",
                "hidden", "head_dim")


def _meta_array(params: DenoiserParams) -> np.ndarray:
    return np.array([getattr(params, f) for f in _META_FIELDS], dtype=np.float64)


def save_teacher(path, params: DenoiserParams) -> None:
    write_params(path, [("meta", _meta_array(params))]
                 + [(n, t.data) for n, t in params.tensors()])


def _denoiser_from_table(table: dict[str, np.ndarray]) -> DenoiserParams:
    meta = table["meta"]
    kw = {f: int(v) for f, v in zip(_META_FIELDS, meta)}
    tensors = {n: Tensor(table[n], requires_grad=True)
               for n in DenoiserParams._TENSOR_FIELDS}
    return DenoiserParams(**kw, **tensors)


def load_teacher(path) -> DenoiserParams:
    return _denoiser_from_table(read_params(path))


def save_student(path, student: ConsistencyParams) -> None:
    write_params(path, [("meta", _meta_array(student.backbone))]
                 + [(n, t.data) for n, t in student.tensors()])


def load_student(path) -> ConsistencyParams:
    table = read_params(path)
    return ConsistencyParams(
        backbone=_denoiser_from_table(table),
        w_omega=Tensor(table["w_omega"], requires_grad=True),
        w_lambda=Tensor(table["w_lambda"], requires_grad=True),
    )
