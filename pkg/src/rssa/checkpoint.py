"""Checkpoint archives.

A checkpoint is a zip file holding one ``.npy`` entry per array, named by its
dotted key (``G.convs.0.weight.npy``), and a ``metadata.json`` entry with an
integer ``schema_version``. Entries carry a fixed timestamp so identical
contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

SCHEMA_VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_STAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    return info


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray | torch.Tensor], metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    meta = {"schema_version": SCHEMA_VERSION, **metadata}
    with zipfile.ZipFile(tmp, "w") as zf:
        for key in sorted(arrays):
            value = arrays[key]
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(value), allow_pickle=False)
            zf.writestr(_entry(f"{key}.npy"), buf.getvalue())
        zf.writestr(_entry("metadata.json"), json.dumps(meta, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("metadata.json"))
            arrays = {
                name[: -len(".npy")]: np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                for name in zf.namelist()
                if name.endswith(".npy")
            }
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema_version {version!r}, expected {SCHEMA_VERSION}")
    return arrays, meta


def module_arrays(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    p = prefix + "."
    state = {k[len(p):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(p)}
    if not state:
        raise CheckpointError(f"checkpoint has no arrays under {prefix!r}")
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{prefix}: {exc}") from None


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    """Split an optimizer state into tensors (per-parameter slots) and JSON (hyperparameters)."""
    state = opt.state_dict()
    arrays = {}
    for idx, slots in state["state"].items():
        for name, value in slots.items():
            arrays[f"{prefix}.state.{idx}.{name}"] = torch.as_tensor(value)
    return arrays, {"param_groups": state["param_groups"]}


def load_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], meta: dict, prefix: str) -> None:
    p = prefix + ".state."
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        if key.startswith(p):
            idx, name = key[len(p):].split(".", 1)
            state.setdefault(int(idx), {})[name] = torch.from_numpy(value.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
