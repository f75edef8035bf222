"""Regenerate historical classes from their memories.

Stored masks are rotated and shifted to diversify object placement, turned
into spatial tokens by the class's mapper, joined with the prompt and the
semantic embedding, and fed to the frozen sampler.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .codec import CodecDescriptor, decode
from .data import Sample, derive_seed
from .diffusion import Denoiser, NoiseSchedule, sample_batch, uniform_batch
from .errors import IncompatibleArtifacts
from .memory import ClassMemory, denoiser_fingerprint, from_diffusion_space, memory_to_bytes


@dataclass(frozen=True)
class MaskAugmentSpec:
    rotation_range: float = 180.0  # degrees, symmetric
    shift_range: float = 0.10  # fraction of the side, symmetric
    boundary: str = "clamp_inside"
    min_retention: float = 0.9
    max_redraws: int = 8

    def __post_init__(self):
        if not 0 <= self.shift_range <= 0.3:
            raise ValueError("shift_range must lie in [0, 0.3]")
        if self.boundary not in ("clamp_inside", "zero_pad"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if not 0.5 <= self.min_retention <= 1.0:
            raise ValueError("min_retention must lie in [0.5, 1]")


def _warp(mask: np.ndarray, theta_deg: float, shift: np.ndarray, center: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    th = np.deg2rad(theta_deg)
    # inverse map: output pixel -> source pixel
    py, px = yy - center[0] - shift[0], xx - center[1] - shift[1]
    sy = np.sin(-th) * px + np.cos(-th) * py + center[0]
    sx = np.cos(-th) * px - np.sin(-th) * py + center[1]
    iy, ix = np.floor(sy).astype(int), np.floor(sx).astype(int)
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(mask, dtype=bool)
    out[inside] = mask[iy[inside], ix[inside]]
    return out


def augment_mask(mask: np.ndarray, spec: MaskAugmentSpec, seed: int) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if not mask.any() or (spec.rotation_range == 0 and spec.shift_range == 0):
        return mask.copy()
    rng = np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, 0xA06])
    h, w = mask.shape
    center = np.argwhere(mask).mean(0) + 0.5
    theta = rng.uniform(-spec.rotation_range, spec.rotation_range)
    area = mask.sum()
    if spec.boundary == "zero_pad":
        shift = rng.uniform(-spec.shift_range, spec.shift_range, 2) * np.array([h, w])
        return _warp(mask, theta, shift, center)
    for _ in range(spec.max_redraws):
        shift = rng.uniform(-spec.shift_range, spec.shift_range, 2) * np.array([h, w])
        out = _warp(mask, theta, shift, center)
        if out.sum() >= spec.min_retention * area:
            return out
    return _warp(mask, theta, np.zeros(2), center)


@dataclass(eq=False)
class ReplaySet:
    class_id: int
    samples: List[Sample]
    manifest: dict = field(default_factory=dict)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])


def _memory_hash(memory: ClassMemory) -> str:
    return hashlib.sha256(memory_to_bytes(memory)).hexdigest()[:16]


def check_compatible(memory: ClassMemory, denoiser: Denoiser, codec: CodecDescriptor) -> None:
    recorded = memory.meta.get("denoiser")
    actual = denoiser_fingerprint(denoiser)
    if recorded != actual:
        raise IncompatibleArtifacts(f"memory of class {memory.class_id} was built against denoiser {recorded}, got {actual}")
    if memory.codec.describe() != codec.describe():
        raise IncompatibleArtifacts(f"memory of class {memory.class_id} was built with a different codec")


def replay_class(
    memory: ClassMemory,
    n_samples: int,
    denoiser: Denoiser,
    codec: CodecDescriptor,
    schedule: NoiseSchedule,
    spec: MaskAugmentSpec = MaskAugmentSpec(),
    seed: int = 0,
    steps: Optional[int] = None,
    batch: int = 64,
) -> ReplaySet:
    check_compatible(memory, denoiser, codec)
    masks = memory.stored_masks
    h, w = masks.shape[1:]
    lat_hw = (h // codec.factor, w // codec.factor)
    entries, samples = [], []
    for start in range(0, n_samples, batch):
        idx = list(range(start, min(n_samples, start + batch)))
        aug_seeds = [derive_seed(seed, i, 1) for i in idx]
        noise_seeds = [derive_seed(seed, i, 2) for i in idx]
        aug = np.stack([augment_mask(masks[i % len(masks)], spec, s) for i, s in zip(idx, aug_seeds)])
        tokens, layout = memory.conditions(aug if memory.mapper is not None else None)
        if tokens.shape[0] != len(idx):
            tokens = tokens.expand(len(idx), -1, -1)
        z = sample_batch(denoiser, uniform_batch(tokens.contiguous(), layout), schedule, noise_seeds, steps, lat_hw, clip=(-1.0, 1.0))
        images = decode(from_diffusion_space(z), codec)
        for j, i in enumerate(idx):
            samples.append(Sample(image=images[j], object_mask=aug[j], class_id=memory.class_id))
            entries.append({"index": i, "mask_index": i % len(masks), "augment_seed": aug_seeds[j], "noise_seed": noise_seeds[j]})
    manifest = {
        "class_id": memory.class_id,
        "memory_hash": _memory_hash(memory),
        "denoiser": denoiser_fingerprint(denoiser),
        "codec": codec.describe(),
        "schedule": schedule.describe(),
        "steps": steps if steps is not None else schedule.T,
        "seed": seed,
        "augment": asdict(spec),
        "mode": memory.mode,
        "entries": entries,
    }
    return ReplaySet(memory.class_id, samples, manifest)


@dataclass(eq=False)
class ReplayBuffer:
    samples: List[Sample]
    manifest: dict

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def class_histogram(self) -> dict:
        ids, counts = np.unique([s.class_id for s in self.samples], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


def build_replay_buffer(
    memories: Sequence[ClassMemory],
    per_class: int,
    denoiser: Denoiser,
    codec: CodecDescriptor,
    schedule: NoiseSchedule,
    spec: MaskAugmentSpec = MaskAugmentSpec(),
    seed: int = 0,
    shuffle_seed: Optional[int] = None,
    steps: Optional[int] = None,
    cache: Optional[dict] = None,
) -> ReplayBuffer:
    """Replay every memory and shuffle the union.

    ``cache`` maps (memory hash, per_class, seed, steps) to a ReplaySet; since
    replay is a pure function of those inputs, reusing an entry changes nothing.
    """
    if not memories:
        raise ValueError("build_replay_buffer needs at least one memory")
    sets = []
    for mem in memories:
        class_seed = derive_seed(seed, mem.class_id)
        key = (_memory_hash(mem), per_class, class_seed, steps, tuple(sorted(asdict(spec).items())))
        if cache is not None and key in cache:
            sets.append(cache[key])
            continue
        rs = replay_class(mem, per_class, denoiser, codec, schedule, spec, class_seed, steps)
        if cache is not None:
            cache[key] = rs
        sets.append(rs)
    pool = [s for rs in sets for s in rs.samples]
    shuffle_seed = seed if shuffle_seed is None else shuffle_seed
    order = np.random.default_rng([shuffle_seed, 0x5F1E]).permutation(len(pool))
    manifest = {
        "shuffle_seed": shuffle_seed,
        "per_class": per_class,
        "sets": [{k: v for k, v in rs.manifest.items() if k != "entries"} for rs in sets],
    }
    return ReplayBuffer([pool[i] for i in order], manifest)
