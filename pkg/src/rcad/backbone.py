"""One-off pretraining of the diffusion backbone.

Stands in for an external pretrained latent diffusion model.  The denoiser is
trained jointly with per-class placeholder conditions (an embedding and a
spatial mapper per class, built exactly like the ones class memories learn
later).  The spatial mapper is held at its seeded initialization and shared
by all classes during this phase, so the frozen network learns to read the
exact projection every class memory starts from; memories then refine their
own copy.  Placeholders are discarded afterwards; continual runs only ever
see the frozen denoiser.  Segments are randomly dropped and the semantic block
randomly truncated so every layout used later (semantic-only, spatial-only,
small K) is in-distribution for the frozen network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
import torch

from .codec import CodecDescriptor, encode
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule, CondBatch, _loss_from_draws, layout_ids
from .errors import NonConvergence
from .memory import make_prompt, make_spatial_mapper, mask_latents, to_diffusion_space

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    K: int = 8
    n: int = 32
    m: int = 64
    P: int = 4
    prompt_seed: int = 0
    mapper_seed: int = 0
    p_semantic_only: float = 0.15
    p_spatial_only: float = 0.15
    p_truncate: float = 0.25
    min_improvement: float = 0.5
    probe_size: int = 64
    train_mapper: bool = False  # learn per-class mappers instead of the shared seeded one
    model: DenoiserConfig = field(default_factory=DenoiserConfig)


def pretrain_denoiser(
    data: Dict[int, Tuple[np.ndarray, np.ndarray]],
    codec: CodecDescriptor,
    schedule: NoiseSchedule,
    config: PretrainConfig = PretrainConfig(),
) -> Denoiser:
    """Train the backbone on ``{class_id: (images, masks)}``."""
    cfg = config
    C = cfg.model.cond_dim
    if cfg.model.spatial_readout not in (None, (cfg.n, cfg.m)):
        raise ValueError(f"denoiser spatial_readout {cfg.model.spatial_readout} does not match mapper (n={cfg.n}, m={cfg.m})")
    class_ids = sorted(data)
    z_all, m_all, c_all = [], [], []
    for slot, k in enumerate(class_ids):
        images, masks = data[k]
        z_all.append(to_diffusion_space(encode(np.asarray(images), codec)))
        m_all.append(mask_latents(np.asarray(masks), codec))
        c_all.append(np.full(len(images), slot))
    z0 = torch.from_numpy(np.concatenate(z_all)).float().permute(0, 3, 1, 2)
    flat_masks = torch.from_numpy(np.concatenate(m_all)).float()
    slots = torch.from_numpy(np.concatenate(c_all)).long()
    n_items = len(z0)

    torch.manual_seed(cfg.seed)
    model = Denoiser(cfg.model)
    n_cls = len(class_ids)
    placeholders = torch.nn.Parameter(0.02 * torch.randn(n_cls, cfg.K, C))
    m0 = make_spatial_mapper(cfg.n, cfg.m, C, flat_masks.shape[1], cfg.mapper_seed)
    w_init = torch.from_numpy(m0.weight)
    mapper_w = torch.nn.Parameter(w_init[None].repeat(n_cls, 1, 1).clone(), requires_grad=cfg.train_mapper)
    mapper_b = torch.nn.Parameter(torch.from_numpy(m0.bias)[None].repeat(n_cls, 1).clone(), requires_grad=cfg.train_mapper)
    reshape_out = m0.reshape_out
    S = reshape_out[0]
    prompt = torch.from_numpy(make_prompt(cfg.P, C, cfg.prompt_seed).tokens)
    seg, idx = layout_ids((cfg.P, cfg.K, S))
    sem_pos = (seg == 1).nonzero().flatten()
    spa_pos = (seg == 2).nonzero().flatten()

    def conditions(items, mode_draw=None, k_draw=None, mask_items=None):
        b = len(items)
        s = slots[items]
        rows = flat_masks[items if mask_items is None else mask_items].reshape(b, -1, cfg.n)
        sp = (torch.einsum("brn,bnm->brm", rows, mapper_w[s]) + mapper_b[s][:, None, :]).reshape(b, *reshape_out)
        tokens = torch.cat([prompt[None].expand(b, -1, -1), placeholders[s], sp], 1)
        pad = torch.zeros(b, tokens.shape[1], dtype=torch.bool)
        if mode_draw is not None:
            pad[:, spa_pos] = (mode_draw < cfg.p_semantic_only)[:, None]
            spatial_only = (mode_draw >= cfg.p_semantic_only) & (mode_draw < cfg.p_semantic_only + cfg.p_spatial_only)
            pad[:, sem_pos] = spatial_only[:, None]
            if k_draw is not None:
                pad[:, sem_pos] |= idx[sem_pos][None, :] >= k_draw[:, None]
        return CondBatch(tokens, seg.expand(b, -1), idx.expand(b, -1), pad)

    pgen = torch.Generator().manual_seed(cfg.seed + 7919)
    probe = torch.randperm(n_items, generator=pgen)[: cfg.probe_size]
    probe_t = torch.randint(0, schedule.T, (len(probe),), generator=pgen)
    probe_eps = torch.randn(z0[probe].shape, generator=pgen)

    def probe_loss(mask_items=None):
        with torch.no_grad():
            cond = conditions(probe, mask_items=mask_items)
            return float(_loss_from_draws(model, z0[probe], cond, schedule, probe_t, probe_eps))

    start = probe_loss()
    params = list(model.parameters()) + [placeholders] + ([mapper_w, mapper_b] if cfg.train_mapper else [])
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1))
    gen = torch.Generator().manual_seed(cfg.seed)
    for step in range(cfg.steps):
        items = torch.randint(0, n_items, (cfg.batch,), generator=gen)
        mode_draw = torch.rand(cfg.batch, generator=gen)
        k_draw = torch.randint(1, cfg.K + 1, (cfg.batch,), generator=gen)
        k_draw = torch.where(torch.rand(cfg.batch, generator=gen) < cfg.p_truncate, k_draw, torch.full_like(k_draw, cfg.K))
        t = torch.randint(0, schedule.T, (cfg.batch,), generator=gen)
        eps = torch.randn(z0[items].shape, generator=gen)
        loss = _loss_from_draws(model, z0[items], conditions(items, mode_draw, k_draw), schedule, t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, float(loss.detach()))
    end = probe_loss() if cfg.steps else start
    # same probe with every mask swapped for another image's: the gap measures
    # how much the network leans on the spatial tokens
    shuffled = probe_loss(probe.roll(1))
    model.train_log = {"probe_start": start, "probe_end": end, "probe_shuffled_masks": shuffled}
    if cfg.steps and end > (1 - cfg.min_improvement) * start:
        raise NonConvergence(f"backbone probe loss {start:.4f} -> {end:.4f} did not improve enough")
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model
