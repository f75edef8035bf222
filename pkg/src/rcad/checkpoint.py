"""Denoiser and detector checkpoints in the shared block container.

Blocks: ``meta`` (sorted JSON: kind, config, architecture hash, extras) and one
little-endian float32 block per state-dict entry, named after the entry.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np
import torch

from . import container
from .detector import Detector, DetectorConfig, encoder_checksum
from .diffusion import Denoiser, DenoiserConfig, architecture_hash
from .errors import ContainerError, IncompatibleArtifacts

CKPT_MAGIC = b"RCADCKPT"
CKPT_VERSION = 1
_KINDS = {"denoiser": 1, "detector": 2}


def _config_from_dict(cls, d: dict):
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def to_bytes(model: Union[Denoiser, Detector]) -> bytes:
    if isinstance(model, Denoiser):
        kind, cfg = "denoiser", model.config
    elif isinstance(model, Detector):
        kind, cfg = "detector", model.config
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    state = model.state_dict()
    meta = {
        "kind": kind,
        "config": asdict(cfg),
        "arch": architecture_hash(model),
        "params": list(state),
        "train_log": getattr(model, "train_log", {}),
    }
    if kind == "detector":
        meta["encoder_checksum"] = model.encoder_checksum
    blocks = [("meta", json.dumps(meta, sort_keys=True).encode())]
    for name, t in state.items():
        blocks.append((name, np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()))
    return container.pack(CKPT_MAGIC, CKPT_VERSION, _KINDS[kind], blocks)


def from_bytes(data: bytes) -> Union[Denoiser, Detector]:
    _, ident, blocks = container.unpack(data, CKPT_MAGIC, (CKPT_VERSION,))
    if "meta" not in blocks:
        raise ContainerError("checkpoint has no meta block", block="meta")
    meta = json.loads(blocks["meta"])
    if meta["kind"] == "denoiser":
        model = Denoiser(_config_from_dict(DenoiserConfig, meta["config"]))
    elif meta["kind"] == "detector":
        model = Detector(_config_from_dict(DetectorConfig, meta["config"]))
    else:
        raise ContainerError(f"unknown checkpoint kind {meta['kind']!r}", block="meta")
    if architecture_hash(model) != meta["arch"]:
        raise IncompatibleArtifacts("checkpoint architecture does not match its config")
    state = model.state_dict()
    loaded = {}
    for name in meta["params"]:
        if name not in blocks:
            raise ContainerError(f"missing parameter block {name!r}", block=name)
        ref = state[name]
        arr = np.frombuffer(blocks[name], dtype="<f4")
        if arr.size != ref.numel():
            raise ContainerError(f"parameter block {name!r} has {arr.size} values, expected {ref.numel()}", block=name)
        loaded[name] = torch.from_numpy(arr.copy()).reshape(ref.shape).to(ref.dtype)
    model.load_state_dict(loaded)
    model.train_log = meta.get("train_log", {})
    if meta["kind"] == "detector":
        model.encoder_checksum = encoder_checksum(model)
        if model.encoder_checksum != meta["encoder_checksum"]:
            raise IncompatibleArtifacts("detector encoder checksum mismatch after load")
        model.generator.eval()
    else:
        for p in model.parameters():
            p.requires_grad_(False)
        model.eval()
    return model


def save(model: Union[Denoiser, Detector], path) -> int:
    return container.write(path, to_bytes(model))


def load(path) -> Union[Denoiser, Detector]:
    return from_bytes(Path(path).read_bytes())
