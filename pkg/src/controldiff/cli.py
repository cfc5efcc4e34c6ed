"""Command-line entry point for every stage of the pipeline.

Subcommands: gen-data, pretrain-base, train-local, train-global, merge,
sample, ablate, eval, lambda-sweep, conflict. Each run writes its artifacts
and a JSON manifest (full config, seeds, thread count, command line) under
--run-dir, so results can be reproduced bit-exactly.

Configuration comes from built-in defaults, optionally overridden by a JSON
file (--config), which individual flags override in turn. Exit codes: 0 on
success, 2 for usage or configuration errors, 3 for contract or invariant
violations, 1 for anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, training
from .checkpoint import load_checkpoint, save_checkpoint
from .composite import sample_batch
from .conditions import (CONDITION_CHANNELS, LOCAL_CONDITIONS, SceneDataset,
                         condition_slices)
from .config import RunConfig, SamplerConfig
from .diffusion import NoiseSchedule
from .errors import (CheckpointError, ConfigurationError, ContractViolation,
                     ControlDiffError, DomainError, NumericsError, StateError)
from .images import load_png, save_grid, save_png
from .text import PAD_ID

ALL_CONDITIONS = LOCAL_CONDITIONS + ("global",)


def _common_options():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config file")
    common.add_argument("--run-dir", type=Path, help="artifact directory (default runs/<command>)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--threads", type=int, help="torch thread count (default: cpu count, max 8)")
    return common


def build_parser():
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="controldiff",
        description="Train and sample a diffusion model with local and global control adapters.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="write the dataset manifest and preview grids")
    p.add_argument("--preview", type=int, default=8, help="scenes to render for inspection")

    p = sub.add_parser("pretrain-base", parents=[common], help="train the base model")
    p.add_argument("--steps", type=int, help="override the configured step budget")

    for name in ("train-local", "train-global"):
        p = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} adapter")
        p.add_argument("--base", type=Path, required=True, help="base checkpoint")
        p.add_argument("--steps", type=int)

    p = sub.add_parser("merge", parents=[common],
                       help="combine base and adapter checkpoints into one file")
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--local", type=Path, dest="local_ckpt")
    p.add_argument("--global", type=Path, dest="global_ckpt")
    p.add_argument("--out", type=Path, help="output path (default <run-dir>/merged.pt)")

    p = sub.add_parser("sample", parents=[common], help="generate images")
    p.add_argument("--checkpoint", type=Path, help="merged checkpoint")
    p.add_argument("--base", type=Path, help="base checkpoint (alternative to --checkpoint)")
    p.add_argument("--local", type=Path, dest="local_ckpt")
    p.add_argument("--global", type=Path, dest="global_ckpt")
    p.add_argument("--scene-id", type=int, help="take conditions from this dataset scene")
    p.add_argument("--use", help="comma list of conditions to apply "
                   f"({','.join(ALL_CONDITIONS)}; default: all with --scene-id)")
    for name in LOCAL_CONDITIONS:
        p.add_argument(f"--{name}-map", type=Path, help=f"{name} condition map PNG")
    p.add_argument("--prompt", help="caption text")
    p.add_argument("--count", type=int, default=8, help="number of samples")
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--cfg-scale", type=float, help="guidance scale")
    p.add_argument("--lambda", type=float, dest="lam", help="global token weight")

    p = sub.add_parser("ablate", parents=[common], help="run a training strategy")
    p.add_argument("--strategy", required=True,
                   choices=("default_separate", "joint_scratch", "joint_after"))
    p.add_argument("--base", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="controllability metric battery")
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--local", type=Path, dest="local_ckpt")
    p.add_argument("--global", type=Path, dest="global_ckpt")
    p.add_argument("--num-samples", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--cfg-scale", type=float)

    p = sub.add_parser("lambda-sweep", parents=[common],
                       help="global similarity and prompt consistency across weights")
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--global", type=Path, dest="global_ckpt", required=True)
    p.add_argument("--local", type=Path, dest="local_ckpt")
    p.add_argument("--reference-scene", type=int, required=True,
                   help="scene whose palette is the global condition")
    p.add_argument("--prompt", help="conflicting caption text")
    p.add_argument("--prompt-scene", type=int, help="scene whose caption is the prompt")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)

    p = sub.add_parser("conflict", parents=[common],
                       help="dominance matrix for conflicting local conditions")
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--local", type=Path, dest="local_ckpt", required=True)
    p.add_argument("--scene-a", type=int, required=True)
    p.add_argument("--scene-b", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)

    return parser


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.master_seed = args.seed
    return cfg


def _sampler_config(cfg, args):
    return SamplerConfig(
        num_steps=args.steps if getattr(args, "steps", None) else cfg.sampler.num_steps,
        cfg_scale=args.cfg_scale if getattr(args, "cfg_scale", None) is not None
        else cfg.sampler.cfg_scale,
        eta=cfg.sampler.eta,
        seed=args.seed if args.seed is not None else cfg.sampler.seed,
    )


def _model_from_args(args):
    if getattr(args, "checkpoint", None):
        roles = load_checkpoint(args.checkpoint).roles
        if "base" not in roles:
            raise ConfigurationError("--checkpoint must contain the base role")
        return training.merge_adapters(
            args.checkpoint,
            args.checkpoint if "local_adapter" in roles else None,
            args.checkpoint if "global_adapter" in roles else None,
        )
    if not getattr(args, "base", None):
        raise ConfigurationError("need --checkpoint or --base")
    return training.merge_adapters(args.base, getattr(args, "local_ckpt", None),
                                   getattr(args, "global_ckpt", None))


def _parse_use(args):
    if args.use is None:
        return list(ALL_CONDITIONS) if args.scene_id is not None else []
    names = [n.strip() for n in args.use.split(",") if n.strip()]
    for n in names:
        if n not in ALL_CONDITIONS:
            raise ConfigurationError(
                f"unknown condition {n!r}, expected subset of {ALL_CONDITIONS}")
    return names


def _stack_from_files(args, image_size):
    slices = condition_slices()
    stack = np.zeros((sum(CONDITION_CHANNELS.values()), image_size, image_size),
                     dtype=np.float32)
    provided = False
    for name in LOCAL_CONDITIONS:
        path = getattr(args, f"{name.replace('-', '_')}_map", None)
        if path is None:
            continue
        provided = True
        array = load_png(path)
        if array.ndim == 2:
            array = array[None]
        want = CONDITION_CHANNELS[name]
        if array.shape[0] != want or array.shape[-2:] != (image_size, image_size):
            raise ConfigurationError(
                f"{name} map must be {want}x{image_size}x{image_size}, got {array.shape}")
        stack[slices[name]] = array
    return stack if provided else None


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(run_dir, name, cfg, args, extra=None):
    payload = {
        "argv": [a for a in (args._argv or [])],
        "command": args.command,
        "threads": torch.get_num_threads(),
        "torch_version": torch.__version__,
        "config": cfg.to_dict(),
    }
    payload.update(extra or {})
    return training.write_manifest(run_dir, name, payload)


def cmd_gen_data(args, cfg, run_dir):
    dataset = SceneDataset(cfg.data, cfg.backbone.image_size)
    manifest = dataset.write_manifest(run_dir / "dataset_manifest.json", cfg.train.policy)
    tiles = []
    for i in range(args.preview):
        image, _, conds = dataset.sample(i)
        tiles.append(image)
        tiles.append(np.repeat(conds.map_for("edge"), 3, axis=0))
        tiles.append(np.repeat(conds.map_for("depth"), 3, axis=0))
        tiles.append(conds.map_for("segmentation"))
        tiles.append(np.repeat(conds.map_for("sketch"), 3, axis=0))
    if tiles:
        save_grid(tiles, run_dir / "preview.png", columns=5)
    print(f"dataset manifest: {manifest}")
    _manifest(run_dir, "gen_data_run", cfg, args, {"manifest": str(manifest)})
    return 0


def cmd_pretrain_base(args, cfg, run_dir):
    path, _ = training.pretrain_base(cfg, run_dir, steps=args.steps)
    print(f"base checkpoint: {path}")
    return 0


def cmd_train_local(args, cfg, run_dir):
    path, _ = training.train_local(cfg, run_dir, args.base, steps=args.steps)
    print(f"local adapter checkpoint: {path}")
    return 0


def cmd_train_global(args, cfg, run_dir):
    path, _ = training.train_global(cfg, run_dir, args.base, steps=args.steps)
    print(f"global adapter checkpoint: {path}")
    return 0


def cmd_merge(args, cfg, run_dir):
    model, merged_cfg = training.merge_adapters(args.base, args.local_ckpt, args.global_ckpt)
    out = args.out or run_dir / "merged.pt"
    modules = {"base": model.base}
    if model.local_adapter is not None:
        modules["local_adapter"] = model.local_adapter
    if model.global_adapter is not None:
        modules["global_adapter"] = model.global_adapter
    save_checkpoint(out, modules, merged_cfg)
    _manifest(run_dir, "merge_run", merged_cfg, args,
              {"output": str(out), "roles": sorted(modules)})
    print(f"merged checkpoint: {out} (roles: {', '.join(sorted(modules))})")
    return 0


def cmd_sample(args, cfg, run_dir):
    model, cfg = _model_from_args(args)
    sampler_cfg = _sampler_config(cfg, args)
    schedule = NoiseSchedule(cfg.schedule)
    dataset = SceneDataset(cfg.data, cfg.backbone.image_size)
    use = _parse_use(args)
    local_names = [n for n in use if n != "global"]

    stack = embed = None
    if args.scene_id is not None:
        _, _, conds = dataset.sample(args.scene_id)
        if local_names:
            stack = evaluation.restricted_stack(conds, local_names)
        if "global" in use:
            embed = conds.global_embed
    else:
        stack = _stack_from_files(args, cfg.backbone.image_size)
        if "global" in use:
            raise ConfigurationError("--use global requires --scene-id")
    token_ids = evaluation.encode_prompt(args.prompt) if args.prompt else None
    if token_ids is None and stack is None and embed is None:
        # no inputs at all: draw from the prior under an empty prompt
        token_ids = np.full(cfg.backbone.text_len, PAD_ID, dtype=np.int64)
    weight = args.lam if args.lam is not None else cfg.train.lambda_train

    n = args.count
    generator = torch.Generator()
    generator.manual_seed(sampler_cfg.seed)
    samples = sample_batch(
        model, schedule, sampler_cfg,
        token_ids=torch.from_numpy(np.tile(token_ids, (n, 1))) if token_ids is not None else None,
        local_stack=torch.from_numpy(np.tile(stack, (n, 1, 1, 1))) if stack is not None else None,
        global_embed=torch.from_numpy(np.tile(embed, (n, 1))) if embed is not None else None,
        weight=weight, generator=generator)

    out_dir = run_dir / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, sample in enumerate(samples.numpy()):
        path = out_dir / f"sample_{i:02d}.png"
        save_png(sample, path)
        files.append({"file": str(path), "sha256": _sha256(path)})
    grid = out_dir / "grid.png"
    save_grid(list(samples.numpy()), grid)
    _manifest(run_dir, "sample_run", cfg, args, {
        "sampler": {"steps": sampler_cfg.num_steps, "cfg_scale": sampler_cfg.cfg_scale,
                    "eta": sampler_cfg.eta, "seed": sampler_cfg.seed},
        "weight": weight, "conditions": use, "scene_id": args.scene_id,
        "prompt": args.prompt, "outputs": files, "grid": str(grid)})
    print(f"wrote {len(files)} samples under {out_dir}")
    return 0


def cmd_ablate(args, cfg, run_dir):
    result = training.run_ablation(args.strategy, cfg, run_dir, args.base)
    print(f"{args.strategy}: local={result['local']} global={result['global']} "
          f"({result['elapsed_seconds']:.0f}s)")
    return 0


def cmd_eval(args, cfg, run_dir):
    model, cfg = _model_from_args(args)
    sampler_cfg = _sampler_config(cfg, args)
    schedule = NoiseSchedule(cfg.schedule)
    dataset = SceneDataset(cfg.data, cfg.backbone.image_size)
    indices = list(dataset.heldout_indices)[:args.num_samples]
    rows = []
    if model.local_adapter is not None:
        gain = evaluation.controllability_gain(
            model, schedule, sampler_cfg, dataset, indices,
            seed=cfg.sampler.seed, batch_size=args.batch_size)
        rows += [{"metric": f"edge_{k}", "value": v} for k, v in gain.items()]
    if model.global_adapter is not None:
        gap = evaluation.global_similarity_gap(
            model, schedule, sampler_cfg, dataset, indices,
            seed=cfg.sampler.seed, batch_size=args.batch_size)
        rows += [{"metric": f"global_{k}", "value": v} for k, v in gap.items()]
    if model.local_adapter is not None and model.global_adapter is not None:
        comp = evaluation.composability(
            model, schedule, sampler_cfg, dataset, indices[:32],
            seed=cfg.sampler.seed, batch_size=args.batch_size)
        rows += [{"metric": f"compose_{k}", "value": v} for k, v in comp.items()]
    if not rows:
        raise ConfigurationError("eval needs at least one adapter checkpoint")
    path = evaluation.write_csv(run_dir / "eval.csv", rows)
    for row in rows:
        print(f"{row['metric']}: {row['value']:.4f}")
    _manifest(run_dir, "eval_run", cfg, args, {"csv": str(path)})
    return 0


def cmd_lambda_sweep(args, cfg, run_dir):
    model, cfg = _model_from_args(args)
    sampler_cfg = _sampler_config(cfg, args)
    schedule = NoiseSchedule(cfg.schedule)
    dataset = SceneDataset(cfg.data, cfg.backbone.image_size)
    _, _, conds = dataset.sample(args.reference_scene)
    if args.prompt:
        prompt_ids = evaluation.encode_prompt(args.prompt)
    elif args.prompt_scene is not None:
        prompt_ids = evaluation.encode_prompt(dataset.scene(args.prompt_scene).caption)
    else:
        raise ConfigurationError("lambda-sweep needs --prompt or --prompt-scene")
    rows = evaluation.lambda_sweep(
        model, schedule, sampler_cfg, conds.global_embed, prompt_ids,
        batch_size=args.batch_size, seed=cfg.sampler.seed)
    path = evaluation.write_csv(run_dir / "lambda_sweep.csv", rows)
    for row in rows:
        print(f"lambda={row['lambda']:.2f} similarity={row['global_similarity']:.4f} "
              f"prompt={row['prompt_consistency']:.4f}")
    _manifest(run_dir, "lambda_sweep_run", cfg, args, {"csv": str(path)})
    return 0


def cmd_conflict(args, cfg, run_dir):
    model, cfg = _model_from_args(args)
    sampler_cfg = _sampler_config(cfg, args)
    schedule = NoiseSchedule(cfg.schedule)
    dataset = SceneDataset(cfg.data, cfg.backbone.image_size)
    rows = evaluation.conflict_matrix(
        model, schedule, sampler_cfg, dataset, args.scene_a, args.scene_b,
        batch_size=args.batch_size, seed=cfg.sampler.seed)
    path = evaluation.write_csv(run_dir / "conflict.csv", rows)
    for row in rows:
        print(f"{row['type_a']:>12} vs {row['type_b']:<12} dominance "
              f"{row['dominance']:+.3f} +- {row['ci95']:.3f}")
    _manifest(run_dir, "conflict_run", cfg, args, {"csv": str(path)})
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-base": cmd_pretrain_base,
    "train-local": cmd_train_local,
    "train-global": cmd_train_global,
    "merge": cmd_merge,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "lambda-sweep": cmd_lambda_sweep,
    "conflict": cmd_conflict,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    args._argv = argv
    torch.set_num_threads(args.threads or min(os.cpu_count() or 1, 8))
    try:
        cfg = _load_config(args)
        run_dir = args.run_dir or Path("runs") / args.command
        run_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, run_dir)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, StateError, NumericsError, DomainError,
            CheckpointError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    except ControlDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
