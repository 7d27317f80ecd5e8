"""Toy analogue metrics and the paired ablation harness.

These metrics are desk-scale analogues of standard video-benchmark
dimensions (frame-difference dynamics, second-difference smoothness,
consecutive-frame feature similarity).  They are not comparable to any
published leaderboard numbers; CSV output says so in its header.

Ablations are paired: every variant sees the identical prompt/seed
grid, and directional expectations are settled by sign tests over the
paired differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .consistency import ConsistencyParams, multistep_sample
from .rewards import RewardWeights, reward_img, reward_vid
from .rng import derive_seed
from .teacher import NoiseSchedule
from .toyworld import (CaptionFactors, MotionProfile, PromptEmbedding,
                       encode_prompt, sample_factors)
from .rng import Rng

TOY_HEADER = "# toy analogue metrics; not comparable to any published benchmark"


def dynamic_degree(video: np.ndarray) -> float:
    """Mean absolute consecutive-frame difference."""
    if video.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    return float(np.mean(np.abs(np.diff(video, axis=0))))


def motion_smoothness(video: np.ndarray) -> float:
    """1 / (1 + mean second-difference magnitude); in (0, 1]."""
    if video.shape[0] < 3:
        raise ValueError("need at least 3 frames")
    second = video[2:] - 2.0 * video[1:-1] + video[:-2]
    return float(1.0 / (1.0 + np.mean(np.abs(second))))


def subject_consistency(video: np.ndarray) -> float:
    """Mean cosine similarity of consecutive flattened frames.

    A pair with an all-zero frame contributes 0.
    """
    f = video.shape[0]
    if f < 2:
        raise ValueError("need at least 2 frames")
    flat = video.reshape(f, -1)
    sims = []
    for i in range(f - 1):
        a, b = flat[i], flat[i + 1]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        sims.append(0.0 if na == 0.0 or nb == 0.0 else float(a @ b / (na * nb)))
    return float(np.mean(sims))


@dataclass
class EvalRow:
    prompt_id: int
    dynamic_degree: float
    motion_smoothness: float
    subject_consistency: float
    reward_img_mean: float
    reward_vid: float
    steps: int
    omega: float
    lam: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.rows]))

    def combined_reward(self, weights: RewardWeights) -> list[float]:
        return [weights.beta_img * r.reward_img_mean + weights.beta_v * r.reward_vid
                for r in self.rows]


def eval_prompts(prompts_seed: int, count: int, moving_only: bool = False,
                 min_speed: float = 0.02) -> list[CaptionFactors]:
    """Deterministic held-out prompt grid."""
    profile = MotionProfile(static_fraction=0.0 if moving_only else 0.25,
                            max_speed=0.08)
    out = []
    i = 0
    while len(out) < count:
        factors = sample_factors(Rng(derive_seed(prompts_seed, i)), profile)
        i += 1
        if moving_only and factors.speed < min_speed:
            continue
        out.append(factors)
    return out


def score_video(video: np.ndarray, prompt: PromptEmbedding) -> dict:
    per_frame = [reward_img(video[m], prompt).item() for m in range(video.shape[0])]
    return {
        "dynamic_degree": dynamic_degree(video),
        "motion_smoothness": motion_smoothness(video),
        "subject_consistency": subject_consistency(video),
        "reward_img_mean": float(np.mean(per_frame)),
        "reward_vid": reward_vid(video, prompt).item(),
    }


def evaluate_student(student: ConsistencyParams, schedule: NoiseSchedule,
                     prompts: list[CaptionFactors], seeds: list[int],
                     steps: int, omega: float, lam: float) -> EvalReport:
    """Sample once per (prompt, seed) pair and score."""
    report = EvalReport()
    for pid, (factors, seed) in enumerate(zip(prompts, seeds)):
        prompt = encode_prompt(factors)
        video = multistep_sample(student, steps, omega, lam, prompt.values,
                                 schedule, seed)
        scores = score_video(video, prompt)
        report.rows.append(EvalRow(prompt_id=pid, steps=steps, omega=omega,
                                   lam=lam, **scores))
    return report


def sign_test_wins(a: list[float], b: list[float]) -> int:
    """Count of paired positions where a is strictly greater."""
    return int(sum(1 for x, y in zip(a, b) if x > y))


@dataclass
class AblationExpectation:
    metric: str
    better: str
    worse: str
    min_wins: int


def run_ablation(variants: dict[str, tuple[ConsistencyParams, float]],
                 schedule: NoiseSchedule, prompts: list[CaptionFactors],
                 prompt_seeds: list[int], steps: int, omega: float,
                 expectations: list[AblationExpectation] | None = None,
                 ) -> tuple[dict[str, EvalReport], list[tuple[AblationExpectation, bool]]]:
    """Evaluate every variant on the identical prompt/seed grid.

    `variants` maps a name to (student, sampling lambda).  Returns the
    per-variant reports and the verdict for each declared expectation.
    """
    reports = {}
    for name, (student, lam) in variants.items():
        reports[name] = evaluate_student(student, schedule, prompts, prompt_seeds,
                                         steps, omega, lam)
    verdicts = []
    for exp in expectations or []:
        better = [getattr(r, exp.metric) for r in reports[exp.better].rows]
        worse = [getattr(r, exp.metric) for r in reports[exp.worse].rows]
        verdicts.append((exp, sign_test_wins(better, worse) >= exp.min_wins))
    return reports, verdicts


def write_report_csv(path, reports: dict[str, EvalReport]) -> None:
    cols = ("dynamic_degree", "motion_smoothness", "subject_consistency",
            "reward_img_mean", "reward_vid")
    with open(path, "w") as fh:
        fh.write(TOY_HEADER + "\n")
        fh.write("variant,prompt_id,steps,omega,lambda," + ",".join(cols) + "\n")
        for name, report in reports.items():
            for r in report.rows:
                vals = ",".join(f"{getattr(r, c):.8g}" for c in cols)
                fh.write(f"{name},{r.prompt_id},{r.steps},{r.omega},{r.lam},{vals}\n")
        for name, report in reports.items():
            vals = ",".join(f"{report.mean(c):.8g}" for c in cols)
            fh.write(f"{name},aggregate,,,,{vals}\n")
