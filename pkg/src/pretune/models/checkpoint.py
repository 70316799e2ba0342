"""Checkpoint directories: ``manifest.json`` + named parameter payloads.

The manifest records the architecture config, an inventory digest, the seed
and the epoch. Loading rebuilds the architecture and refuses to proceed when
the rebuilt inventory digest differs from the recorded one.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from ..errors import ManifestError
from . import architecture_of, build_model, config_dict
from .inventory import parameter_inventory

MANIFEST = "manifest.json"
WEIGHTS = "weights.pt"
STATE = "state.pt"


def save_checkpoint(
    out_dir: str | Path,
    model: nn.Module,
    *,
    seed: int,
    epoch: int,
    state: dict[str, Any] | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write ``model`` (and optional training ``state``) to ``out_dir`` atomically per file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "architecture": architecture_of(model),
        "config": config_dict(model),
        "inventory_digest": parameter_inventory(model).digest(),
        "seed": seed,
        "epoch": epoch,
        **(extra or {}),
    }
    _atomic_torch_save(model.state_dict(), out_dir / WEIGHTS)
    if state is not None:
        _atomic_torch_save(state, out_dir / STATE)
    tmp = out_dir / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out_dir / MANIFEST)
    return out_dir


def _atomic_torch_save(obj, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(obj, tmp)
    tmp.replace(path)


def read_manifest(ckpt_dir: str | Path) -> dict[str, Any]:
    path = Path(ckpt_dir) / MANIFEST
    if not path.exists():
        raise ManifestError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(
    ckpt_dir: str | Path, model: nn.Module | None = None, with_state: bool = False
) -> tuple[nn.Module, dict[str, Any], dict[str, Any] | None]:
    """Load weights into ``model`` (or a freshly built one); returns ``(model, manifest, state)``."""
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    if model is None:
        model = build_model(manifest["architecture"], manifest["config"], seed=manifest.get("seed", 0))
    digest = parameter_inventory(model).digest()
    if digest != manifest["inventory_digest"]:
        raise ManifestError(
            f"inventory digest mismatch for {ckpt_dir}: checkpoint {manifest['inventory_digest'][:12]} "
            f"vs model {digest[:12]}"
        )
    model.load_state_dict(torch.load(ckpt_dir / WEIGHTS, weights_only=True))
    state = None
    if with_state and (ckpt_dir / STATE).exists():
        state = torch.load(ckpt_dir / STATE, weights_only=False)
    return model, manifest, state
