"""Shared fixtures: small configurations and a tiny trained pipeline.

Most tests run against a scaled-down model (16px, 8 base channels) so the
whole suite stays fast; structural properties do not depend on width. Tests
marked `trained` evaluate real checkpoints from `runs/acceptance`, training
them first if the directory is empty (slow).
"""

from __future__ import annotations

from pathlib import Path

import pytest
import torch

from controldiff import training
from controldiff.config import (BackboneConfig, DataConfig, GlobalAdapterConfig,
                                LocalAdapterConfig, RunConfig, SamplerConfig,
                                ScheduleConfig, TrainConfig)

ACCEPTANCE_DIR = Path(__file__).resolve().parent.parent / "runs" / "acceptance"


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_backbone(**overrides):
    kw = dict(image_size=16, base_channels=8, token_dim=16, time_embed_dim=32)
    kw.update(overrides)
    return BackboneConfig(**kw)


def tiny_run_config(**train_overrides):
    cfg = RunConfig(
        backbone=tiny_backbone(),
        local_adapter=LocalAdapterConfig(extractor_channels=(8, 16, 16, 16)),
        global_adapter=GlobalAdapterConfig(hidden_dim=32),
        schedule=ScheduleConfig(),
        sampler=SamplerConfig(num_steps=5),
        data=DataConfig(seed=77, num_scenes=24, heldout_scenes=8),
        train=TrainConfig(batch_size=2, base_steps=8, adapter_steps=4,
                          joint_steps=2, log_every=4),
    )
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg


def perturb_output_layer(base, seed=0, std=0.3):
    """Give the zero-initialized output conv nonzero weights.

    A fresh model predicts exactly zero, which would make any
    output-comparison test pass vacuously; this makes outputs nonzero
    deterministically.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        base.out_conv.weight.copy_(
            torch.randn(base.out_conv.weight.shape, generator=gen) * std)
        base.out_conv.bias.copy_(
            torch.randn(base.out_conv.bias.shape, generator=gen) * 0.1)
    return base


@pytest.fixture(scope="session")
def tiny_pipeline(tmp_path_factory):
    """A fully trained (briefly) base + both adapters at the tiny scale.

    Returns a dict with the run config, run dir, and checkpoint paths.
    Session-scoped: training even a few steps of every phase is the slowest
    part of the suite.
    """
    run_dir = tmp_path_factory.mktemp("tiny_pipeline")
    cfg = tiny_run_config()
    base_path, base_history = training.pretrain_base(cfg, run_dir)
    local_path, _ = training.train_local(cfg, run_dir, base_path)
    global_path, _ = training.train_global(cfg, run_dir, base_path)
    return {
        "config": cfg,
        "run_dir": run_dir,
        "base": base_path,
        "local": local_path,
        "global": global_path,
        "base_history": base_history,
    }


def pytest_collection_modifyitems(config, items):
    # keep the acceptance report ordered and last: its trained-model criteria
    # depend on artifacts that other tests never touch
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")
