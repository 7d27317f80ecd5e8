"""Toy video consistency distillation with reward feedback and motion guidance.

Library layout:
    autodiff     reverse-mode f64 tensor engine
    rng          counter-based deterministic PRNG
    toyworld     moving-blob videos and caption embeddings
    teacher      noise schedule, denoiser, epsilon-prediction pretraining
    solver       DDIM step, CFG / guidance-augmented solve, DDIM inversion
    motion       temporal attention, masks, guidance energy and gradient
    consistency  student model, distillation loss, few-step sampling
    rewards      differentiable appearance / motion scorers and objective
    pipeline     preprocessing (records) and the training loop
    packio       CDPK record packs and CDPR parameter files
    metrics      toy evaluation metrics and the paired ablation harness
    cli          gen-data / pretrain / preprocess / distill / sample / eval
"""

from .autodiff import Tensor, grad_check, no_grad
from .consistency import (CDLossConfig, ConsistencyParams, cd_loss, cm_forward,
                          init_student, multistep_sample, update_ema)
from .metrics import dynamic_degree, motion_smoothness, run_ablation, subject_consistency
from .motion import attention_mask, pta_energy, pta_gradient, temporal_attention
from .packio import PackHeader, PreprocessedRecord, read_pack, write_pack
from .pipeline import TrainConfig, preprocess, train
from .rewards import RewardWeights, reward_img, reward_objective, reward_vid
from .rng import Rng
from .solver import SolveRequest, augmented_solve, cfg_solve, ddim_invert, ddim_step
from .teacher import (DenoiserParams, NoiseSchedule, PretrainConfig, add_noise,
                      denoiser_forward, init_denoiser, make_schedule, pretrain_teacher)
from .toyworld import (CaptionFactors, MotionProfile, PromptEmbedding, VideoLatent,
                       decode_prompt, encode_prompt, render_video, sample_dataset)

__version__ = "0.1.0"
