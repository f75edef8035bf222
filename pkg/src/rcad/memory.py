"""Per-class compression into a semantic embedding and a spatial mapper.

A class is reduced to the handful of tensors that steer the frozen
diffusion model towards it: ``v`` (K condition tokens), an affine map that
turns an encoded object mask into spatial tokens, and a few stored masks.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import container
from .codec import CodecDescriptor, encode
from .diffusion import (
    ConditionTokens,
    Denoiser,
    NoiseSchedule,
    _loss_from_draws,
    architecture_hash,
    uniform_batch,
    weights_checksum,
)
from .errors import ContainerError, FrozenWeightsModified, NonConvergence

MEMORY_MAGIC = b"RCADMEM1"
FORMAT_VERSION = 1


def to_diffusion_space(latent: np.ndarray) -> np.ndarray:
    """Affine map from codec range [0, 1] to the [-1, 1] range the model is trained on."""
    return 2.0 * np.asarray(latent) - 1.0


def from_diffusion_space(z: np.ndarray) -> np.ndarray:
    return (np.asarray(z) + 1.0) / 2.0


def denoiser_fingerprint(model: Denoiser) -> str:
    return f"{architecture_hash(model)}:{weights_checksum(model)}"


# ---------------------------------------------------------------------------
# condition pieces
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FrozenPrompt:
    tokens: np.ndarray  # P x C
    seed: int

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def make_prompt(P: int, C: int, seed: int) -> FrozenPrompt:
    rng = np.random.default_rng([seed, 0x9807])
    return FrozenPrompt(rng.standard_normal((P, C)).astype(np.float32), seed)


@dataclass(eq=False)
class SemanticEmbedding:
    v: np.ndarray  # K x C

    def __post_init__(self):
        if self.v.ndim != 2 or self.v.shape[0] < 1:
            raise ValueError("semantic embedding needs K >= 1 rows")
        if not np.all(np.isfinite(self.v)):
            raise ValueError("semantic embedding has non-finite entries")

    @property
    def K(self) -> int:
        return self.v.shape[0]

    @property
    def C(self) -> int:
        return self.v.shape[1]


def init_semantic_embedding(K: int, C: int, seed: int) -> SemanticEmbedding:
    if K < 1 or C < 1:
        raise ValueError("K and C must be >= 1")
    rng = np.random.default_rng([seed, 0x5E3A])
    return SemanticEmbedding((0.02 * rng.standard_normal((K, C))).astype(np.float32))


def build_semantic_condition(prompt: FrozenPrompt, v: SemanticEmbedding) -> ConditionTokens:
    if prompt.width != v.C:
        raise ValueError(f"prompt width {prompt.width} != embedding width {v.C}")
    return ConditionTokens(np.concatenate([prompt.tokens, v.v], axis=0), prompt.tokens.shape[0], v.K, 0)


@dataclass(eq=False)
class SpatialMapper:
    """Affine n -> m map applied row-wise to a reshaped mask latent."""

    weight: np.ndarray  # n x m
    bias: np.ndarray  # m
    latent_elements: int
    cond_dim: int

    def __post_init__(self):
        n, m = self.weight.shape
        if self.bias.shape != (m,):
            raise ValueError("bias must have length m")
        if self.latent_elements % n:
            raise ValueError(f"latent size {self.latent_elements} is not divisible by n={n}")
        if (self.rows * m) % self.cond_dim:
            raise ValueError(f"R*m = {self.rows * m} is not divisible by C={self.cond_dim}")

    @property
    def n(self) -> int:
        return self.weight.shape[0]

    @property
    def m(self) -> int:
        return self.weight.shape[1]

    @property
    def rows(self) -> int:
        return self.latent_elements // self.n

    @property
    def reshape_in(self) -> Tuple[int, int]:
        return (self.rows, self.n)

    @property
    def reshape_out(self) -> Tuple[int, int]:
        return (self.rows * self.m // self.cond_dim, self.cond_dim)

    @property
    def tokens(self) -> int:
        return self.reshape_out[0]


def make_spatial_mapper(n: int, m: int, C: int, latent_elements: int, seed: int) -> SpatialMapper:
    rng = np.random.default_rng([seed, 0x3A9])
    bound = 1.0 / math.sqrt(n)
    return SpatialMapper(
        rng.uniform(-bound, bound, (n, m)).astype(np.float32),
        rng.uniform(-bound, bound, m).astype(np.float32),
        latent_elements,
        C,
    )


def spatial_tokens(mask_latents: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, reshape_out) -> torch.Tensor:
    """(B, E) flattened mask latents -> (B, S_tok, C) spatial tokens."""
    b = mask_latents.shape[0]
    rows = mask_latents.reshape(b, -1, weight.shape[0])
    return (rows @ weight + bias).reshape(b, *reshape_out)


def mask_latents(masks: np.ndarray, codec: CodecDescriptor) -> np.ndarray:
    """Encode a stack of binary masks and flatten each to one row."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim == 2:
        masks = masks[None]
    z = encode(masks[..., None], codec)
    return z.reshape(len(masks), -1)


def spatial_encode(mask: np.ndarray, codec: CodecDescriptor, mapper: SpatialMapper) -> np.ndarray:
    flat = torch.from_numpy(mask_latents(mask, codec)).float()
    if flat.shape[1] != mapper.latent_elements:
        raise ValueError(f"mask latent has {flat.shape[1]} elements, mapper expects {mapper.latent_elements}")
    out = spatial_tokens(flat, torch.from_numpy(mapper.weight), torch.from_numpy(mapper.bias), mapper.reshape_out)
    return out[0].numpy()


# ---------------------------------------------------------------------------
# class memory
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ClassMemory:
    class_id: int
    v: Optional[SemanticEmbedding]
    mapper: Optional[SpatialMapper]
    stored_masks: np.ndarray  # N_mask x H x W bool
    prompt_seed: int
    prompt_len: int
    codec: CodecDescriptor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= len(self.stored_masks) <= 10:
            raise ValueError("a class memory stores between 1 and 10 masks")
        if self.v is None and self.mapper is None:
            raise ValueError("a class memory needs a semantic embedding, a spatial mapper, or both")

    @property
    def mode(self) -> str:
        if self.v is not None and self.mapper is not None:
            return "both"
        return "semantic_only" if self.mapper is None else "spatial_only"

    @property
    def cond_dim(self) -> int:
        return self.v.C if self.v is not None else self.mapper.cond_dim

    def prompt(self) -> FrozenPrompt:
        return make_prompt(self.prompt_len, self.cond_dim, self.prompt_seed)

    def conditions(self, masks: Optional[np.ndarray] = None) -> Tuple[torch.Tensor, Tuple[int, int, int]]:
        """Condition tokens for a batch of (augmented) masks: (B, L, C), layout."""
        prompt = torch.from_numpy(self.prompt().tokens)
        parts = [prompt]
        K = S = 0
        if self.v is not None:
            parts.append(torch.from_numpy(self.v.v))
            K = self.v.K
        b = 1 if masks is None else len(masks)
        base = torch.cat(parts, 0)[None].expand(b, -1, -1)
        if self.mapper is None:
            return base, (self.prompt_len, K, 0)
        if masks is None:
            raise ValueError("spatial memories need masks to build conditions")
        flat = torch.from_numpy(mask_latents(masks, self.codec)).float()
        sp = spatial_tokens(flat, torch.from_numpy(self.mapper.weight), torch.from_numpy(self.mapper.bias), self.mapper.reshape_out)
        S = sp.shape[1]
        return torch.cat([base, sp], 1), (self.prompt_len, K, S)


@dataclass(frozen=True)
class CompressConfig:
    K: int = 8
    n: int = 32
    m: int = 64
    C: int = 64
    P: int = 4
    steps: int = 400
    lr_v: float = 1e-2
    lr_w: float = 1e-3
    optimizer: str = "sgd"
    batch: int = 16
    seed: int = 0
    prompt_seed: int = 0
    mapper_seed: int = 0  # must match the backbone's shared mapper
    n_mask: int = 8
    use_semantic: bool = True
    use_spatial: bool = True
    min_improvement: float = 0.3
    probe_size: int = 32


def compress_class(
    images: np.ndarray,
    masks: np.ndarray,
    frozen_denoiser: Denoiser,
    codec: CodecDescriptor,
    schedule: NoiseSchedule,
    config: CompressConfig = CompressConfig(),
    class_id: int = 0,
) -> ClassMemory:
    """Invert one class into (v, W) against a frozen denoiser.

    Only the embedding and the mapper receive gradients; the denoiser's
    checksum is compared before and after.
    """
    images = np.asarray(images)
    masks = np.asarray(masks).astype(bool)
    if len(images) < 8 or len(masks) != len(images):
        raise ValueError("compress_class needs >= 8 images with one mask each")
    if not (config.use_semantic or config.use_spatial):
        raise ValueError("at least one of semantic / spatial features must be enabled")
    if not 1 <= config.n_mask <= 10:
        raise ValueError("n_mask must lie in [1, 10]")

    before = weights_checksum(frozen_denoiser)
    grads_were = [p.requires_grad for p in frozen_denoiser.parameters()]
    for p in frozen_denoiser.parameters():
        p.requires_grad_(False)

    z0 = torch.from_numpy(to_diffusion_space(encode(images, codec))).float().permute(0, 3, 1, 2)
    flat_masks = torch.from_numpy(mask_latents(masks, codec)).float()
    prompt = torch.from_numpy(make_prompt(config.P, config.C, config.prompt_seed).tokens)

    torch.manual_seed(config.seed)
    groups = []
    v = w = b = None
    if config.use_semantic:
        v = torch.from_numpy(init_semantic_embedding(config.K, config.C, config.seed).v).requires_grad_(True)
        groups.append({"params": [v], "lr": config.lr_v})
    if config.use_spatial:
        mapper0 = make_spatial_mapper(config.n, config.m, config.C, flat_masks.shape[1], config.mapper_seed)
        w = torch.from_numpy(mapper0.weight).requires_grad_(True)
        b = torch.from_numpy(mapper0.bias).requires_grad_(True)
        groups.append({"params": [w, b], "lr": config.lr_w})
        reshape_out = mapper0.reshape_out
    layout = (config.P, config.K if v is not None else 0, reshape_out[0] if w is not None else 0)

    def cond_for(idx):
        parts = [prompt[None].expand(len(idx), -1, -1)]
        if v is not None:
            parts.append(v[None].expand(len(idx), -1, -1))
        if w is not None:
            parts.append(spatial_tokens(flat_masks[idx], w, b, reshape_out))
        return uniform_batch(torch.cat(parts, 1), layout)

    n = len(z0)
    probe = torch.arange(min(n, config.probe_size))
    pgen = torch.Generator().manual_seed(config.seed + 104729)
    probe_t = torch.randint(0, schedule.T, (len(probe),), generator=pgen)
    probe_eps = torch.randn(z0[probe].shape, generator=pgen)

    def probe_loss():
        with torch.no_grad():
            return float(_loss_from_draws(frozen_denoiser, z0[probe], cond_for(probe), schedule, probe_t, probe_eps))

    start = probe_loss()
    if config.optimizer == "adam":
        opt = torch.optim.Adam(groups)
    elif config.optimizer == "sgd":
        opt = torch.optim.SGD(groups)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.steps, 1))
    gen = torch.Generator().manual_seed(config.seed)
    losses = []
    try:
        for _ in range(config.steps):
            idx = torch.randint(0, n, (config.batch,), generator=gen)
            t = torch.randint(0, schedule.T, (config.batch,), generator=gen)
            eps = torch.randn(z0[idx].shape, generator=gen)
            loss = _loss_from_draws(frozen_denoiser, z0[idx], cond_for(idx), schedule, t, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(float(loss.detach()))
        end = probe_loss()
    finally:
        for p, g in zip(frozen_denoiser.parameters(), grads_were):
            p.requires_grad_(g)

    if weights_checksum(frozen_denoiser) != before:
        raise FrozenWeightsModified("denoiser weights changed during compression")
    if end > (1 - config.min_improvement) * start:
        raise NonConvergence(f"class {class_id}: probe loss {start:.4f} -> {end:.4f} did not improve enough")

    rng = np.random.default_rng([config.seed, class_id, 0x3A5C])
    keep = np.sort(rng.choice(len(masks), size=min(config.n_mask, len(masks)), replace=False))
    mapper = None
    if w is not None:
        mapper = SpatialMapper(
            w.detach().numpy().copy(), b.detach().numpy().copy(), flat_masks.shape[1], config.C
        )
    meta = {
        "format_version": FORMAT_VERSION,
        "mode": "both" if v is not None and w is not None else ("semantic_only" if w is None else "spatial_only"),
        "K": config.K if v is not None else 0,
        "C": config.C,
        "n": config.n if w is not None else 0,
        "m": config.m if w is not None else 0,
        "steps": config.steps,
        "optimizer": config.optimizer,
        "seed": config.seed,
        "mapper_seed": config.mapper_seed,
        "probe_start": start,
        "probe_end": end,
        "loss_tail": [round(x, 6) for x in losses[-10:]],
        "denoiser": denoiser_fingerprint(frozen_denoiser),
        "codec": codec.describe(),
        "stored_mask_indices": [int(i) for i in keep],
    }
    return ClassMemory(
        class_id=class_id,
        v=SemanticEmbedding(v.detach().numpy().copy()) if v is not None else None,
        mapper=mapper,
        stored_masks=masks[keep].copy(),
        prompt_seed=config.prompt_seed,
        prompt_len=config.P,
        codec=codec,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _memory_blocks(memory: ClassMemory) -> List[Tuple[str, bytes]]:
    blocks = []
    if memory.v is not None:
        blocks.append(("v", _f32(memory.v.v)))
    if memory.mapper is not None:
        blocks.append(("W", _f32(memory.mapper.weight) + _f32(memory.mapper.bias)))
    n_mask, h, w = memory.stored_masks.shape
    packed = b"".join(np.packbits(m.reshape(-1)).tobytes() for m in memory.stored_masks.astype(bool))
    blocks.append(("masks", struct.pack("<III", n_mask, h, w) + packed))
    meta = dict(memory.meta)
    meta.update(
        {
            "prompt_seed": memory.prompt_seed,
            "prompt_len": memory.prompt_len,
            "codec": memory.codec.describe(),
            "v_shape": list(memory.v.v.shape) if memory.v is not None else None,
            "W_shape": list(memory.mapper.weight.shape) if memory.mapper is not None else None,
            "latent_elements": memory.mapper.latent_elements if memory.mapper is not None else None,
            "cond_dim": memory.cond_dim,
        }
    )
    blocks.append(("meta", json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()))
    return blocks


def memory_to_bytes(memory: ClassMemory) -> bytes:
    return container.pack(MEMORY_MAGIC, FORMAT_VERSION, memory.class_id, _memory_blocks(memory))


def memory_from_bytes(data: bytes, codec: Optional[CodecDescriptor] = None) -> ClassMemory:
    _, class_id, blocks = container.unpack(data, MEMORY_MAGIC, (FORMAT_VERSION,))
    try:
        meta = json.loads(blocks["meta"].decode())
    except (KeyError, ValueError) as exc:
        raise ContainerError("meta block missing or unreadable", block="meta") from exc
    v = None
    if meta.get("v_shape"):
        v = SemanticEmbedding(np.frombuffer(blocks["v"], dtype="<f4").reshape(meta["v_shape"]).astype(np.float32))
    mapper = None
    if meta.get("W_shape"):
        n, m = meta["W_shape"]
        raw = np.frombuffer(blocks["W"], dtype="<f4").astype(np.float32)
        if raw.size != n * m + m:
            raise ContainerError("W block has the wrong size", block="W")
        mapper = SpatialMapper(raw[: n * m].reshape(n, m).copy(), raw[n * m :].copy(), meta["latent_elements"], meta["cond_dim"])
    mb = blocks["masks"]
    n_mask, h, w = struct.unpack_from("<III", mb, 0)
    per = math.ceil(h * w / 8)
    if len(mb) != 12 + n_mask * per:
        raise ContainerError("masks block has the wrong size", block="masks")
    masks = np.stack(
        [np.unpackbits(np.frombuffer(mb, np.uint8, per, 12 + i * per))[: h * w].reshape(h, w).astype(bool) for i in range(n_mask)]
    )
    if codec is None:
        desc = dict(meta["codec"])
        if desc["kind"] != "resize":
            raise ValueError("trained_ae memories need the codec passed explicitly")
        desc.pop("weights_ref", None)
        codec = CodecDescriptor(**desc)
    elif codec.describe() != meta["codec"]:
        raise ValueError("codec passed to load does not match the one recorded in the memory")
    prompt_seed, prompt_len = int(meta["prompt_seed"]), int(meta["prompt_len"])
    for key in ("prompt_seed", "prompt_len", "codec", "v_shape", "W_shape", "latent_elements", "cond_dim"):
        meta.pop(key, None)
    meta["codec"] = codec.describe()
    return ClassMemory(class_id, v, mapper, masks, prompt_seed, prompt_len, codec, meta)


def save_memory(memory: ClassMemory, path) -> int:
    return container.write(path, memory_to_bytes(memory))


def load_memory(path, codec: Optional[CodecDescriptor] = None) -> ClassMemory:
    return memory_from_bytes(Path(path).read_bytes(), codec)


def memory_footprint(memory: ClassMemory) -> Dict[str, int]:
    """Serialized size per block plus the total, in bytes."""
    sizes = container.block_sizes(_memory_blocks(memory))
    sizes["total"] = sum(sizes.values())
    return sizes
