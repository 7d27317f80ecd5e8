"""Command-line front end: gen-data, pretrain, preprocess, distill, sample, eval.

Every subcommand is a thin wrapper over library calls; all randomness
flows from --seed, so reruns reproduce outputs byte for byte.  Datasets
travel in the same CDPK container as training packs, with the clean
video stored in the z_noisy slot and zeroed solver fields (documented
in the README).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .consistency import multistep_sample
from .metrics import (AblationExpectation, TOY_HEADER, eval_prompts,
                      evaluate_student, run_ablation, write_report_csv)
from .packio import PackHeader, PreprocessedRecord, read_pack, write_pack
from .pipeline import (TrainConfig, load_student, load_teacher, load_train_config,
                       preprocess, save_student, save_teacher, train,
                       write_metrics_csv)
from .rng import derive_seed
from .teacher import PretrainConfig, make_schedule, pretrain_teacher
from .toyworld import (CaptionFactors, MotionProfile, PromptEmbedding,
                       VideoLatent, encode_prompt, sample_dataset)


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_train_config(args.config, cfg)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def dataset_to_pack(dataset, path, seed: int) -> None:
    """Store clean videos in the CDPK container (dataset convention)."""
    video0 = dataset[0][0]
    header = PackHeader(
        n_steps=2, k=1, frames=video0.frames, channels=video0.channels,
        height=video0.height, width=video0.width, record_count=len(dataset),
        omega_min=0.0, omega_max=0.0, tau=0.0, lam=0.0)
    records = []
    for i, (video, prompt, _) in enumerate(dataset):
        zeros = np.zeros(video.data.shape, dtype=np.float32)
        records.append(PreprocessedRecord(
            record_seed=derive_seed(seed, i), n=1, omega=0.0, short_caption=False,
            prompt=prompt.values.astype(np.float32),
            z_noisy=video.data.astype(np.float32),
            z_target=zeros, guidance=zeros.copy()))
    write_pack(path, header, records)


def pack_to_dataset(path):
    """Inverse of dataset_to_pack."""
    from .toyworld import decode_prompt

    _, records = read_pack(path)
    out = []
    for rec in records:
        prompt = PromptEmbedding(rec.prompt.astype(np.float64))
        out.append((VideoLatent(rec.z_noisy.astype(np.float64)), prompt,
                    decode_prompt(prompt)))
    return out


def _cmd_gen_data(args) -> int:
    profile = MotionProfile(static_fraction=args.static_fraction,
                            max_speed=args.max_speed)
    dataset = sample_dataset(args.seed, args.size, profile)
    dataset_to_pack(dataset, args.out, args.seed)
    moving = sum(1 for _, _, f in dataset if f.speed > 0)
    print(f"wrote {len(dataset)} videos to {args.out} ({moving} moving)")
    return 0


def _cmd_pretrain(args) -> int:
    dataset = pack_to_dataset(args.data)
    cfg = _config_from_args(args)
    schedule = make_schedule(cfg.n_steps, k=cfg.k)
    pt = PretrainConfig(steps=args.steps, lr=args.lr, batch=args.batch,
                        prompt_dropout=args.prompt_dropout, seed=cfg.seed)
    params, losses = pretrain_teacher(dataset, schedule, pt)
    save_teacher(args.out, params)
    head = float(np.mean(losses[:100])) if losses else float("nan")
    tail = float(np.mean(losses[-100:])) if losses else float("nan")
    print(f"teacher saved to {args.out}; loss {head:.4f} -> {tail:.4f} "
          f"over {len(losses)} steps")
    return 0


def _cmd_preprocess(args) -> int:
    dataset = pack_to_dataset(args.data)
    teacher = load_teacher(args.teacher)
    cfg = _config_from_args(args)
    summary = preprocess(dataset, teacher, cfg, args.out,
                         num_records=args.num_records, workers=args.workers)
    print(f"wrote {summary['records']} records to {args.out}: "
          f"{summary['windowed']} in guidance window, {summary['guided']} with "
          f"guidance, {summary['short_caption']} short-caption")
    return 0


def _cmd_distill(args) -> int:
    teacher = load_teacher(args.teacher)
    cfg = _config_from_args(args)
    student, rows = train(args.pack, teacher, cfg, out_dir=args.checkpoint_dir)
    save_student(args.out, student)
    if args.metrics:
        write_metrics_csv(args.metrics, rows)
    print(f"student saved to {args.out}; final l_cd "
          f"{np.mean([r['l_cd'] for r in rows[-100:]]):.5f}" if rows
          else f"student saved to {args.out}")
    return 0


def _cmd_sample(args) -> int:
    student = load_student(args.model)
    cfg = _config_from_args(args)
    schedule = make_schedule(student.backbone.n_total, k=cfg.k)
    if args.prompt_factors:
        vals = [float(x) for x in args.prompt_factors.split(",")]
        if len(vals) != 8:
            raise SystemExit("--prompt-factors needs 8 comma-separated values")
        factors = CaptionFactors.from_vector(vals)
    else:
        factors = eval_prompts(args.seed, 1)[0]
    prompt = encode_prompt(factors)
    video = multistep_sample(student, args.steps, args.omega, args.lam,
                             prompt.values, schedule, args.seed)
    np.save(args.out, video.astype(np.float32))
    print(f"sampled {video.shape} video -> {args.out} "
          f"(steps={args.steps}, omega={args.omega}, lambda={args.lam})")
    return 0


def _parse_ablation_spec(path) -> tuple[dict[str, str], list[AblationExpectation]]:
    variants: dict[str, str] = {}
    expectations: list[AblationExpectation] = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("expect "):
                # expect <metric> <better> > <worse> [min_wins]
                parts = line.split()
                if len(parts) < 5 or parts[3] != ">":
                    raise ValueError(f"bad expectation line: {line!r}")
                min_wins = int(parts[5]) if len(parts) > 5 else 0
                expectations.append(AblationExpectation(parts[1], parts[2],
                                                        parts[4], min_wins))
            else:
                name, path_part = (p.strip() for p in line.split("=", 1))
                variants[name] = path_part
    return variants, expectations


def _cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    first_model = args.model or next(iter(_parse_ablation_spec(args.ablation_spec)[0].values()))
    schedule = make_schedule(load_student(first_model).backbone.n_total, k=cfg.k)
    prompts = eval_prompts(args.prompts_seed, args.num_prompts,
                           moving_only=args.moving_only)
    seeds = [derive_seed(args.prompts_seed, 0xABB0 + i)
             for i in range(len(prompts))]

    if args.ablation_spec:
        named, expectations = _parse_ablation_spec(args.ablation_spec)
        variants = {name: (load_student(p), args.lam) for name, p in named.items()}
        reports, verdicts = run_ablation(variants, schedule, prompts, seeds,
                                         args.steps, args.omega, expectations)
        write_report_csv(args.out, reports)
        ok = True
        for exp, passed in verdicts:
            ok &= passed
            print(f"expect {exp.metric}: {exp.better} > {exp.worse} "
                  f"(>= {exp.min_wins} wins): {'pass' if passed else 'FAIL'}")
        print(f"report -> {args.out}")
        return 0 if ok else 1

    student = load_student(args.model)
    report = evaluate_student(student, schedule, prompts, seeds, args.steps,
                              args.omega, args.lam)
    write_report_csv(args.out, {"model": report})
    print(TOY_HEADER)
    for metric in ("dynamic_degree", "motion_smoothness", "subject_consistency",
                   "reward_img_mean", "reward_vid"):
        print(f"{metric}: {report.mean(metric):.6f}")
    print(f"report -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinyvcd",
        description="toy video consistency distillation with reward and motion guidance")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="write a toy video dataset pack")
    common(p)
    p.set_defaults(seed=0)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--static-fraction", type=float, default=0.25)
    p.add_argument("--max-speed", type=float, default=0.08)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the teacher denoiser")
    common(p)
    p.add_argument("--data", required=True, help="dataset pack from gen-data")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--prompt-dropout", type=float, default=0.1)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("preprocess", help="build solver-target records")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--num-records", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("distill", help="train the consistency student")
    common(p)
    p.add_argument("--pack", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--metrics", help="write per-step loss CSV here")
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("sample", help="few-step sampling from a student")
    common(p)
    p.set_defaults(seed=0)
    p.add_argument("--model", required=True)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--omega", type=float, default=10.0)
    p.add_argument("--lambda", dest="lam", type=float, default=500.0)
    p.add_argument("--prompt-factors",
                   help="8 comma-separated factors: x0,y0,vx,vy,intensity,radius,mix0,mix1")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="score a student (or ablation grid) on held-out prompts")
    common(p)
    p.add_argument("--model")
    p.add_argument("--ablation-spec",
                   help="flat file of `name = checkpoint` lines plus optional "
                        "`expect <metric> <a> > <b> [min_wins]` lines")
    p.add_argument("--prompts-seed", type=int, default=2024)
    p.add_argument("--num-prompts", type=int, default=32)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--omega", type=float, default=10.0)
    p.add_argument("--lambda", dest="lam", type=float, default=500.0)
    p.add_argument("--moving-only", action="store_true")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and not (args.model or args.ablation_spec):
        raise SystemExit("eval needs --model or --ablation-spec")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
