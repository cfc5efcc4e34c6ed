"""Training phases: base pretraining, separate adapter fine-tuning, merging.

The base model is trained once on captioned scenes and frozen. Each adapter
is then fine-tuned on its own, with only adapter parameters receiving
gradients, and the pieces are merged at inference without further tuning.
Two alternative strategies are available for comparison: training both
adapters jointly from scratch on the frozen base ("joint_scratch") and a
further joint phase after separate training ("joint_after").

Every random draw (init, batch order, dropout, noise) comes from a stream
derived from (master_seed, phase, stream), so a fixed master seed reproduces
loss curves exactly. Losses go to an append-only metrics.csv per run
directory; each phase writes a JSON manifest capturing enough to rerun it.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import UNetBackbone, freeze
from .checkpoint import (check_compatible, load_checkpoint, load_role_into,
                         save_checkpoint, topology_hash)
from .composite import ControlledModel
from .conditions import SceneDataset, apply_dropout
from .config import RunConfig
from .diffusion import NoiseSchedule, training_loss
from .errors import ConfigurationError, ContractViolation
from .global_adapter import GlobalAdapter
from .local_adapter import LocalAdapter
from .text import PAD_ID

PHASES = {"base": 0, "local": 1, "global": 2, "joint_scratch": 3, "joint_after": 4}


def _seed_int(master_seed, phase, stream):
    ss = np.random.SeedSequence([master_seed, PHASES[phase], stream])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _np_rng(master_seed, phase, stream):
    return np.random.default_rng(np.random.SeedSequence([master_seed, PHASES[phase], stream]))


def _torch_gen(master_seed, phase, stream):
    gen = torch.Generator()
    gen.manual_seed(_seed_int(master_seed, phase, stream))
    return gen


@dataclass
class Batch:
    x0: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    token_ids: torch.Tensor  # (B, K0) int64
    stack: torch.Tensor  # (B, C, H, W)
    global_embed: torch.Tensor  # (B, D_g)
    global_present: torch.Tensor  # (B,) float 0/1


def collate(samples):
    """Stack (image, token_ids, conditions) triples into a training batch."""
    images, ids, stacks, embeds, present = [], [], [], [], []
    for image, token_ids, conds in samples:
        images.append(image)
        ids.append(token_ids)
        stacks.append(conds.local)
        embeds.append(conds.global_embed)
        present.append(float(conds.global_present))
    return Batch(
        x0=torch.from_numpy(np.stack(images)) * 2.0 - 1.0,
        token_ids=torch.from_numpy(np.stack(ids)),
        stack=torch.from_numpy(np.stack(stacks)),
        global_embed=torch.from_numpy(np.stack(embeds)),
        global_present=torch.tensor(present, dtype=torch.float32),
    )


class BatchSampler:
    """Seeded stream of training batches with text and condition dropout."""

    def __init__(self, dataset, train_config, phase):
        self.dataset = dataset
        self.cfg = train_config
        self.index_rng = _np_rng(train_config.master_seed, phase, 0)
        self.dropout_rng = _np_rng(train_config.master_seed, phase, 1)
        self.noise_generator = _torch_gen(train_config.master_seed, phase, 2)

    def next(self):
        indices = self.index_rng.integers(0, len(self.dataset), size=self.cfg.batch_size)
        samples = []
        for i in indices:
            image, token_ids, conds = self.dataset.sample(int(i))
            if self.dropout_rng.random() < self.cfg.text_dropout:
                token_ids = np.full_like(token_ids, PAD_ID)
            conds = apply_dropout(conds, self.cfg.policy, self.dropout_rng)
            samples.append((image, token_ids, conds))
        return collate(samples)


def heldout_batch(dataset, count=64):
    """Fixed evaluation batch from the held-out split, conditions all present."""
    indices = list(dataset.heldout_indices)[:count]
    if not indices:
        raise ConfigurationError("dataset has no held-out scenes")
    return collate([dataset.sample(i) for i in indices])


def heldout_loss(model_fn, schedule, batch, seed=1234):
    """Denoising loss on a fixed batch with fixed noise draws, for comparisons."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    with torch.no_grad():
        return float(training_loss(model_fn, schedule, batch.x0, generator=gen))


def _append_metrics(run_dir, rows):
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    path = Path(run_dir) / "metrics.csv"
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["phase", "step", "loss", "seconds"])
        if new:
            writer.writeheader()
        writer.writerows(rows)
    return path


def write_manifest(run_dir, name, payload):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"{name}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _run_manifest(run_config, phase, steps, elapsed, extra=None):
    payload = {
        "phase": phase,
        "steps": steps,
        "elapsed_seconds": round(elapsed, 3),
        "master_seed": run_config.train.master_seed,
        "torch_version": torch.__version__,
        "threads": torch.get_num_threads(),
        "config": run_config.to_dict(),
    }
    payload.update(extra or {})
    return payload


def train_steps(loss_of_batch, parameters, sampler, steps, lr, run_config, run_dir,
                phase, step_callback=None):
    """Shared optimizer loop; returns the per-step loss history."""
    params = [p for p in parameters if p.requires_grad]
    if steps > 0 and not params:
        raise ConfigurationError(f"phase {phase!r} has no trainable parameters")
    optimizer = torch.optim.AdamW(params, lr=lr,
                                  weight_decay=run_config.train.weight_decay)
    history, pending = [], []
    start = time.monotonic()
    for step in range(1, steps + 1):
        batch = sampler.next()
        loss = loss_of_batch(batch)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        history.append(value)
        if step % run_config.train.log_every == 0 or step == 1 or step == steps:
            pending.append({"phase": phase, "step": step, "loss": f"{value:.6f}",
                            "seconds": f"{time.monotonic() - start:.1f}"})
        if len(pending) >= 10:
            _append_metrics(run_dir, pending)
            pending = []
        if step_callback is not None:
            step_callback(step, value)
    if pending:
        _append_metrics(run_dir, pending)
    return history


def _check_frozen(base):
    for name, p in base.named_parameters():
        if p.grad is not None and p.grad.abs().max() > 0:
            raise ContractViolation(f"frozen base parameter {name} received gradient")


def pretrain_base(run_config, run_dir, dataset=None, steps=None, step_callback=None):
    """Train the text-conditioned base model from scratch and checkpoint it."""
    run_dir = Path(run_dir)
    cfg = run_config
    dataset = dataset or SceneDataset(cfg.data, cfg.backbone.image_size)
    steps = cfg.train.base_steps if steps is None else steps
    torch.manual_seed(_seed_int(cfg.train.master_seed, "base", 7))
    base = UNetBackbone(cfg.backbone)
    schedule = NoiseSchedule(cfg.schedule)
    sampler = BatchSampler(dataset, cfg.train, "base")
    held = heldout_batch(dataset)

    def model_fn_for(batch):
        tokens = base.encode_text(batch.token_ids)
        return lambda x_t, t: base(x_t, t, tokens)

    initial = heldout_loss(model_fn_for(held), schedule, held)
    start = time.monotonic()
    history = train_steps(
        lambda b: training_loss(model_fn_for(b), schedule, b.x0,
                                generator=sampler.noise_generator),
        base.parameters(), sampler, steps, cfg.train.base_lr, cfg, run_dir,
        "base", step_callback)
    final = heldout_loss(model_fn_for(held), schedule, held)
    path = save_checkpoint(run_dir / "base.pt", {"base": base}, cfg)
    write_manifest(run_dir, "base_manifest", _run_manifest(
        cfg, "base", steps, time.monotonic() - start,
        {"heldout_loss_initial": initial, "heldout_loss_final": final,
         "heldout_loss_ratio": final / initial if initial else None,
         "checkpoint": str(path)}))
    return path, history


def _load_base(base_ckpt_path, run_config):
    ckpt = load_checkpoint(base_ckpt_path)
    if ckpt.topology_hash != topology_hash(run_config):
        raise ConfigurationError(
            "base checkpoint topology does not match the run configuration"
        )
    base = UNetBackbone(run_config.backbone)
    load_role_into(ckpt, "base", base)
    return freeze(base)


def train_local(run_config, run_dir, base_ckpt_path, dataset=None, steps=None,
                step_callback=None):
    """Fine-tune the local adapter against a frozen base; base stays untouched."""
    run_dir = Path(run_dir)
    cfg = run_config
    dataset = dataset or SceneDataset(cfg.data, cfg.backbone.image_size)
    steps = cfg.train.adapter_steps if steps is None else steps
    base = _load_base(base_ckpt_path, cfg)
    torch.manual_seed(_seed_int(cfg.train.master_seed, "local", 8))
    adapter = LocalAdapter(cfg.backbone, cfg.local_adapter).init_from_base(base)
    model = ControlledModel(base, local_adapter=adapter)
    schedule = NoiseSchedule(cfg.schedule)
    sampler = BatchSampler(dataset, cfg.train, "local")

    def loss_of_batch(batch):
        bound = lambda x_t, t: model(x_t, t, batch.token_ids, local_stack=batch.stack)
        return training_loss(bound, schedule, batch.x0, generator=sampler.noise_generator)

    start = time.monotonic()
    history = train_steps(loss_of_batch, adapter.parameters(), sampler, steps,
                          cfg.train.adapter_lr, cfg, run_dir, "local", step_callback)
    _check_frozen(base)
    path = save_checkpoint(run_dir / "local.pt", {"local_adapter": adapter}, cfg)
    write_manifest(run_dir, "local_manifest", _run_manifest(
        cfg, "local", steps, time.monotonic() - start,
        {"base_checkpoint": str(base_ckpt_path), "checkpoint": str(path)}))
    return path, history


def train_global(run_config, run_dir, base_ckpt_path, dataset=None, steps=None,
                 step_callback=None):
    """Fine-tune the global adapter against a frozen base."""
    run_dir = Path(run_dir)
    cfg = run_config
    dataset = dataset or SceneDataset(cfg.data, cfg.backbone.image_size)
    steps = cfg.train.adapter_steps if steps is None else steps
    base = _load_base(base_ckpt_path, cfg)
    torch.manual_seed(_seed_int(cfg.train.master_seed, "global", 9))
    adapter = GlobalAdapter(cfg.global_adapter, cfg.backbone.token_dim)
    model = ControlledModel(base, global_adapter=adapter)
    schedule = NoiseSchedule(cfg.schedule)
    sampler = BatchSampler(dataset, cfg.train, "global")

    def loss_of_batch(batch):
        bound = lambda x_t, t: model(
            x_t, t, batch.token_ids, global_embed=batch.global_embed,
            global_present=batch.global_present, weight=cfg.train.lambda_train)
        return training_loss(bound, schedule, batch.x0, generator=sampler.noise_generator)

    start = time.monotonic()
    history = train_steps(loss_of_batch, adapter.parameters(), sampler, steps,
                          cfg.train.adapter_lr, cfg, run_dir, "global", step_callback)
    _check_frozen(base)
    path = save_checkpoint(run_dir / "global.pt", {"global_adapter": adapter}, cfg)
    write_manifest(run_dir, "global_manifest", _run_manifest(
        cfg, "global", steps, time.monotonic() - start,
        {"base_checkpoint": str(base_ckpt_path), "checkpoint": str(path)}))
    return path, history


def merge_adapters(base_ckpt_path, local_ckpt_path=None, global_ckpt_path=None):
    """Assemble an inference model from separately trained checkpoints.

    Returns (model, run_config). Merging is read-only and idempotent: no
    weights are modified, so re-merging the same files yields an identical
    model.
    """
    base_ckpt = load_checkpoint(base_ckpt_path)
    cfg = RunConfig.from_dict(base_ckpt.config)
    base = UNetBackbone(cfg.backbone)
    load_role_into(base_ckpt, "base", base)
    freeze(base)
    local = global_ = None
    others = []
    if local_ckpt_path is not None:
        ckpt = load_checkpoint(local_ckpt_path)
        others.append(ckpt)
        local = LocalAdapter(cfg.backbone, cfg.local_adapter)
        load_role_into(ckpt, "local_adapter", local)
    if global_ckpt_path is not None:
        ckpt = load_checkpoint(global_ckpt_path)
        others.append(ckpt)
        global_ = GlobalAdapter(cfg.global_adapter, cfg.backbone.token_dim)
        load_role_into(ckpt, "global_adapter", global_)
    check_compatible(base_ckpt, *others)
    return ControlledModel(base, local_adapter=local, global_adapter=global_).eval(), cfg


def _train_joint(run_config, run_dir, base, local, global_, dataset, steps, phase,
                 step_callback=None):
    cfg = run_config
    model = ControlledModel(base, local_adapter=local, global_adapter=global_)
    schedule = NoiseSchedule(cfg.schedule)
    sampler = BatchSampler(dataset, cfg.train, phase)

    def loss_of_batch(batch):
        bound = lambda x_t, t: model(
            x_t, t, batch.token_ids, local_stack=batch.stack,
            global_embed=batch.global_embed, global_present=batch.global_present,
            weight=cfg.train.lambda_train)
        return training_loss(bound, schedule, batch.x0, generator=sampler.noise_generator)

    params = list(local.parameters()) + list(global_.parameters())
    history = train_steps(loss_of_batch, params, sampler, steps,
                          cfg.train.adapter_lr, cfg, run_dir, phase, step_callback)
    _check_frozen(base)
    return history


def run_ablation(strategy, run_config, run_dir, base_ckpt_path, dataset=None,
                 step_callback=None):
    """Produce adapter checkpoints under one of the training strategies.

    default_separate: the standard recipe (local and global fine-tuned
    independently). joint_scratch: both adapters trained together from fresh
    initialization for the same per-adapter step budget. joint_after:
    separate training followed by a shorter joint phase.
    """
    strategies = ("default_separate", "joint_scratch", "joint_after")
    if strategy not in strategies:
        raise ConfigurationError(f"unknown strategy {strategy!r}, expected one of {strategies}")
    run_dir = Path(run_dir)
    cfg = run_config
    dataset = dataset or SceneDataset(cfg.data, cfg.backbone.image_size)
    start = time.monotonic()

    if strategy == "default_separate":
        local_path, _ = train_local(cfg, run_dir, base_ckpt_path, dataset,
                                    step_callback=step_callback)
        global_path, _ = train_global(cfg, run_dir, base_ckpt_path, dataset,
                                      step_callback=step_callback)
    else:
        base = _load_base(base_ckpt_path, cfg)
        if strategy == "joint_scratch":
            # identical initialization to the separate recipe, so the only
            # difference under one master seed is the training strategy
            torch.manual_seed(_seed_int(cfg.train.master_seed, "local", 8))
            local = LocalAdapter(cfg.backbone, cfg.local_adapter).init_from_base(base)
            torch.manual_seed(_seed_int(cfg.train.master_seed, "global", 9))
            global_ = GlobalAdapter(cfg.global_adapter, cfg.backbone.token_dim)
            steps, phase = cfg.train.adapter_steps, "joint_scratch"
        else:
            local_path, _ = train_local(cfg, run_dir, base_ckpt_path, dataset,
                                        step_callback=step_callback)
            global_path, _ = train_global(cfg, run_dir, base_ckpt_path, dataset,
                                          step_callback=step_callback)
            local = LocalAdapter(cfg.backbone, cfg.local_adapter)
            load_role_into(load_checkpoint(local_path), "local_adapter", local)
            global_ = GlobalAdapter(cfg.global_adapter, cfg.backbone.token_dim)
            load_role_into(load_checkpoint(global_path), "global_adapter", global_)
            steps, phase = cfg.train.joint_steps, "joint_after"
        _train_joint(cfg, run_dir, base, local, global_, dataset, steps, phase,
                     step_callback)
        local_path = save_checkpoint(run_dir / f"{strategy}_local.pt",
                                     {"local_adapter": local}, cfg)
        global_path = save_checkpoint(run_dir / f"{strategy}_global.pt",
                                      {"global_adapter": global_}, cfg)

    elapsed = time.monotonic() - start
    write_manifest(run_dir, f"{strategy}_manifest", _run_manifest(
        cfg, strategy, None, elapsed,
        {"base_checkpoint": str(base_ckpt_path),
         "local_checkpoint": str(local_path),
         "global_checkpoint": str(global_path)}))
    return {"strategy": strategy, "local": local_path, "global": global_path,
            "elapsed_seconds": elapsed}
