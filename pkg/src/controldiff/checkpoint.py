"""Single-file checkpoints with a role-partitioned parameter manifest.

Format (torch.save, loadable with weights_only=True):

    {
      "format_version": 1,
      "topology_hash": <sha256 over the model-defining config sections>,
      "config": <full run config dict>,
      "manifest": {"<role>/<name>": {"shape": [...], "dtype": "...",
                                      "role": "...", "trainable": bool}},
      "params": {"<role>/<name>": tensor},
    }

Roles are "base", "local_adapter" and "global_adapter". Every entry name is
prefixed by its role, so no parameter can belong to two roles. Adapter
checkpoints carry only their own role; merging them back requires the same
topology hash as the base checkpoint they were trained against.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
ROLES = ("base", "local_adapter", "global_adapter")


def topology_hash(run_config):
    """Digest of the config sections that determine parameter shapes."""
    sections = {
        key: run_config.to_dict()[key]
        for key in ("backbone", "local_adapter", "global_adapter")
    }
    blob = json.dumps(sections, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    format_version: int
    topology_hash: str
    config: dict
    manifest: dict
    params: dict

    @property
    def roles(self):
        return sorted({entry["role"] for entry in self.manifest.values()})

    def role_state_dict(self, role):
        """The state dict of one role, with the role prefix stripped."""
        prefix = role + "/"
        state = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        if not state:
            raise CheckpointError(f"checkpoint has no role {role!r} (roles: {self.roles})")
        return state

    def trainable_count(self, role):
        return sum(
            1 for entry in self.manifest.values()
            if entry["role"] == role and entry["trainable"]
        )


def save_checkpoint(path, modules, run_config):
    """Write modules ({role: nn.Module}) into one checkpoint file."""
    for role in modules:
        if role not in ROLES:
            raise CheckpointError(f"unknown role {role!r}, expected one of {ROLES}")
    manifest, params = {}, {}
    for role, module in modules.items():
        trainable = {name for name, p in module.named_parameters() if p.requires_grad}
        for name, tensor in module.state_dict().items():
            key = f"{role}/{name}"
            manifest[key] = {
                "shape": list(tensor.shape),
                "dtype": str(tensor.dtype).removeprefix("torch."),
                "role": role,
                "trainable": name in trainable,
            }
            params[key] = tensor.detach().clone()
    payload = {
        "format_version": FORMAT_VERSION,
        "topology_hash": topology_hash(run_config),
        "config": run_config.to_dict(),
        "manifest": manifest,
        "params": params,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot deserialize {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {payload.get('format_version')!r}"
        )
    return Checkpoint(
        format_version=payload["format_version"],
        topology_hash=payload["topology_hash"],
        config=payload["config"],
        manifest=payload["manifest"],
        params=payload["params"],
    )


def load_role_into(checkpoint, role, module):
    """Restore one role's parameters into a module, shapes checked strictly."""
    try:
        module.load_state_dict(checkpoint.role_state_dict(role), strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"role {role!r} does not fit module: {exc}") from exc
    return module


def check_compatible(*checkpoints):
    hashes = {c.topology_hash for c in checkpoints}
    if len(hashes) > 1:
        raise CheckpointError(
            f"topology hash mismatch between checkpoints: {sorted(hashes)}"
        )
