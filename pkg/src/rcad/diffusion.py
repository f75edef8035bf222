"""Small token-conditioned latent diffusion model.

The denoiser is a three-level U-shaped convolutional net.  Latent positions
attend to a block of condition tokens through cross-attention; each token
carries a learned segment embedding (prompt / semantic / spatial) plus an
index-within-segment embedding, so the network can tell token roles apart
even when one segment is absent.

Public latents are channel-last numpy arrays (h, w, c); the network itself
works on NCHW tensors.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonConvergence

PROMPT, SEMANTIC, SPATIAL = 0, 1, 2


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"

    def describe(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_first": float(self.beta[0]), "beta_last": float(self.beta[-1])}


def make_schedule(T: int = 200, kind: str = "linear", beta_bounds: Optional[Tuple[float, float]] = None) -> NoiseSchedule:
    if T < 10:
        raise ValueError("T must be >= 10")
    if beta_bounds is None:
        if kind == "linear":
            # the classic (1e-4, 0.02) endpoints belong to T=1000; rescale so
            # shorter chains still end in (almost) pure noise
            scale = 1000.0 / T
            beta_bounds = (1e-4 * scale, min(0.02 * scale, 0.999))
        else:
            beta_bounds = (1e-4, 0.999)
    b1, b2 = beta_bounds
    if not 0 < b1 < b2 < 1:
        raise ValueError("beta bounds must satisfy 0 < b1 < b2 < 1")
    if kind == "linear":
        beta = np.linspace(b1, b2, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        beta = np.clip(1 - f[1:] / f[:-1], b1, b2)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] >= 0.05:
        raise ValueError(f"alpha_bar[T-1] = {alpha_bar[-1]:.4f} >= 0.05; schedule does not reach noise")
    return NoiseSchedule(T, beta, alpha, alpha_bar, kind)


def q_sample(z0, t: int, eps, schedule: NoiseSchedule):
    """Noise a clean latent to step ``t`` (works on numpy arrays and tensors)."""
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match z0 shape {tuple(z0.shape)}")
    if not 0 <= t < schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T})")
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def _q_sample_batch(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    ab = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype)[t].view(-1, 1, 1, 1)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ConditionTokens:
    tokens: Union[np.ndarray, torch.Tensor]  # L x C
    prompt_len: int
    semantic_len: int
    spatial_len: int = 0

    def __post_init__(self):
        lens = (self.prompt_len, self.semantic_len, self.spatial_len)
        if min(lens) < 0:
            raise ValueError("layout lengths must be nonnegative")
        if sum(lens) < 1 or sum(lens) != self.tokens.shape[0]:
            raise ValueError(f"layout {lens} does not match {self.tokens.shape[0]} tokens")

    @property
    def layout(self) -> Tuple[int, int, int]:
        return (self.prompt_len, self.semantic_len, self.spatial_len)

    @property
    def width(self) -> int:
        return int(self.tokens.shape[1])


def layout_ids(layout: Tuple[int, int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Segment id and index-within-segment for every token of a layout."""
    seg, idx = [], []
    for s, n in zip((PROMPT, SEMANTIC, SPATIAL), layout):
        seg += [s] * n
        idx += list(range(n))
    return torch.tensor(seg, dtype=torch.long), torch.tensor(idx, dtype=torch.long)


@dataclass(eq=False)
class CondBatch:
    tokens: torch.Tensor  # B x L x C
    segment: torch.Tensor  # B x L
    index: torch.Tensor  # B x L
    pad: Optional[torch.Tensor] = None  # B x L, True where padded

    def __len__(self):
        return self.tokens.shape[0]

    def select(self, idx) -> "CondBatch":
        return CondBatch(
            self.tokens[idx], self.segment[idx], self.index[idx], None if self.pad is None else self.pad[idx]
        )


def uniform_batch(tokens: torch.Tensor, layout: Tuple[int, int, int]) -> CondBatch:
    """Wrap a B x L x C tensor whose rows all share one layout."""
    seg, idx = layout_ids(layout)
    b = tokens.shape[0]
    return CondBatch(tokens, seg.expand(b, -1), idx.expand(b, -1))


def batch_conditions(conds: Sequence[ConditionTokens], dtype=torch.float32) -> CondBatch:
    """Stack conditions, right-padding ones with fewer tokens."""
    L = max(c.tokens.shape[0] for c in conds)
    C = conds[0].width
    tokens = torch.zeros(len(conds), L, C, dtype=dtype)
    segment = torch.zeros(len(conds), L, dtype=torch.long)
    index = torch.zeros(len(conds), L, dtype=torch.long)
    pad = torch.ones(len(conds), L, dtype=torch.bool)
    for i, c in enumerate(conds):
        if c.width != C:
            raise ValueError("conditions in one batch must share a width")
        n = c.tokens.shape[0]
        tokens[i, :n] = torch.as_tensor(c.tokens, dtype=dtype)
        s, j = layout_ids(c.layout)
        segment[i, :n], index[i, :n], pad[i, :n] = s, j, False
    return CondBatch(tokens, segment, index, pad if pad.any() else None)


def _as_cond_batch(cond, n: int, dtype) -> CondBatch:
    if isinstance(cond, CondBatch):
        return cond
    if isinstance(cond, ConditionTokens):
        cond = [cond] * n
    return batch_conditions(cond, dtype=dtype)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    widths: Tuple[int, int, int] = (32, 48, 64)
    cond_dim: int = 64
    time_dim: int = 64
    attn_dim: int = 64
    heads: int = 4
    max_segment_tokens: int = 64
    coord_channels: bool = True
    # (n, m) of the spatial mapper whose tokens are read back onto the latent
    # grid as extra input channels; None leaves spatial tokens to attention only
    spatial_readout: Optional[Tuple[int, int]] = (32, 64)


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x))) + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    def __init__(self, channels: int, cond_dim: int, attn_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = _norm(channels)
        self.q = nn.Linear(channels, attn_dim, bias=False)
        self.k = nn.Linear(cond_dim, attn_dim, bias=False)
        self.v = nn.Linear(cond_dim, attn_dim, bias=False)
        self.out = nn.Linear(attn_dim, channels)

    def forward(self, x, ctx, pad=None):
        b, c, h, w = x.shape
        d = self.q.out_features // self.heads
        q = self.q(self.norm(x).flatten(2).transpose(1, 2)).view(b, h * w, self.heads, d).transpose(1, 2)
        k = self.k(ctx).view(b, -1, self.heads, d).transpose(1, 2)
        v = self.v(ctx).view(b, -1, self.heads, d).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d)
        if pad is not None:
            logits = logits.masked_fill(pad[:, None, None, :], float("-inf"))
        attn = logits.softmax(-1) @ v
        attn = attn.transpose(1, 2).reshape(b, h * w, -1)
        return x + self.out(attn).transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Predicts the noise in a latent given a step index and condition tokens."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        w0, w1, w2 = config.widths
        td = config.time_dim * 2
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, td), nn.SiLU(), nn.Linear(td, td))
        self.segment_emb = nn.Embedding(3, config.cond_dim)
        self.index_emb = nn.Embedding(config.max_segment_tokens, config.cond_dim)
        nn.init.normal_(self.segment_emb.weight, std=0.1)
        nn.init.normal_(self.index_emb.weight, std=0.1)
        self.cond_norm = nn.LayerNorm(config.cond_dim)

        c_in = config.latent_channels + (2 if config.coord_channels else 0)
        if config.spatial_readout is not None:
            n, m = config.spatial_readout
            self.readout = nn.Linear(m, n)
            c_in += config.latent_channels + 1
        self.inp = nn.Conv2d(c_in, w0, 3, padding=1)
        self.enc1 = ResBlock(w0, w0, td)
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w1, w1, td)
        self.attn2 = CrossAttention(w1, config.cond_dim, config.attn_dim, config.heads)
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.mid = ResBlock(w2, w2, td)
        self.attn_mid = CrossAttention(w2, config.cond_dim, config.attn_dim, config.heads)
        self.dec2 = ResBlock(w2 + w1, w1, td)
        self.attn_dec2 = CrossAttention(w1, config.cond_dim, config.attn_dim, config.heads)
        self.dec1 = ResBlock(w1 + w0, w0, td)
        self.out_norm = _norm(w0)
        self.out = nn.Conv2d(w0, config.latent_channels, 3, padding=1)

    def context(self, cond: CondBatch) -> torch.Tensor:
        if cond.tokens.shape[-1] != self.config.cond_dim:
            raise ValueError(
                f"condition width {cond.tokens.shape[-1]} does not match model width {self.config.cond_dim}"
            )
        if int(cond.index.max()) >= self.config.max_segment_tokens:
            raise ValueError(f"a condition segment exceeds {self.config.max_segment_tokens} tokens")
        ctx = cond.tokens + self.segment_emb(cond.segment) + self.index_emb(cond.index)
        return self.cond_norm(ctx)

    def spatial_map(self, cond: CondBatch, h: int, w: int) -> torch.Tensor:
        """Undo the mapper's reshape: S_tok x C -> R x m -> (learned m -> n) -> latent grid.

        Returns (B, c_lat + 1, h, w); the last channel flags items that carry
        a spatial block, so "no mask" differs from "empty mask".
        """
        n, m = self.config.spatial_readout
        c_lat, C = self.config.latent_channels, self.config.cond_dim
        b = len(cond)
        elements = h * w * c_lat
        if elements % n or (elements // n * m) % C:
            raise ValueError(f"spatial readout (n={n}, m={m}) does not divide a {h}x{w}x{c_lat} latent")
        R = elements // n
        S = R * m // C
        present = cond.segment == SPATIAL
        if cond.pad is not None:
            present = present & ~cond.pad
        block = cond.tokens.new_zeros(b, S, C)
        bi, li = present.nonzero(as_tuple=True)
        if len(bi):
            if int(cond.index[bi, li].max()) >= S:
                raise ValueError(f"condition has more than the {S} spatial tokens this latent size implies")
            block = block.index_put((bi, cond.index[bi, li]), cond.tokens[bi, li])
        grid = self.readout(block.reshape(b, R, m)).reshape(b, h, w, c_lat).permute(0, 3, 1, 2)
        has = present.any(1).to(grid.dtype)[:, None, None, None].expand(b, 1, h, w)
        return torch.cat([grid * has, has], 1)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: CondBatch) -> torch.Tensor:
        b, _, h, w = z_t.shape
        ctx = self.context(cond)
        pad = cond.pad
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim).to(z_t.dtype))
        x = z_t
        if self.config.coord_channels:
            ys = torch.linspace(-1, 1, h, dtype=z_t.dtype)
            xs = torch.linspace(-1, 1, w, dtype=z_t.dtype)
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            x = torch.cat([x, gy.expand(b, 1, h, w), gx.expand(b, 1, h, w)], dim=1)
        if self.config.spatial_readout is not None:
            x = torch.cat([x, self.spatial_map(cond, h, w)], dim=1)
        h1 = self.enc1(self.inp(x), temb)
        h2 = self.attn2(self.enc2(self.down1(h1), temb), ctx, pad)
        m = self.attn_mid(self.mid(self.down2(h2), temb), ctx, pad)
        u = F.interpolate(m, size=h2.shape[-2:], mode="nearest")
        u = self.attn_dec2(self.dec2(torch.cat([u, h2], 1), temb), ctx, pad)
        u = F.interpolate(u, size=h1.shape[-2:], mode="nearest")
        u = self.dec1(torch.cat([u, h1], 1), temb)
        return self.out(F.silu(self.out_norm(u)))


def architecture_hash(model: nn.Module) -> str:
    desc = {
        "class": type(model).__name__,
        "config": asdict(model.config) if hasattr(model, "config") else None,
        "params": [[k, list(v.shape)] for k, v in model.state_dict().items()],
    }
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def weights_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def denoiser_forward(weights: Denoiser, z_t, t: int, cond: ConditionTokens):
    """Single-latent convenience wrapper: (h, w, c) in, (h, w, c) out."""
    is_np = isinstance(z_t, np.ndarray)
    dtype = next(weights.parameters()).dtype
    z = torch.as_tensor(z_t, dtype=dtype).permute(2, 0, 1)[None]
    tokens = torch.as_tensor(cond.tokens, dtype=dtype)
    out = weights(z, torch.tensor([t]), uniform_batch(tokens[None], cond.layout))[0].permute(1, 2, 0)
    return out.detach().numpy() if is_np else out


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------


def _to_nchw(z0, dtype) -> torch.Tensor:
    z = torch.as_tensor(np.asarray(z0) if isinstance(z0, (list, tuple)) else z0, dtype=dtype)
    return z.permute(0, 3, 1, 2)


def _loss_from_draws(model, z0, cond, schedule, t, eps):
    z_t = _q_sample_batch(z0, t, eps, schedule)
    eps_hat = model(z_t, t, cond)
    return ((eps - eps_hat) ** 2).flatten(1).sum(1).mean()


def ldm_loss(model: Callable, z0_batch, cond_batch, schedule: NoiseSchedule, seed: int) -> torch.Tensor:
    """Batch mean of the squared noise-prediction error at seeded (t, eps).

    ``z0_batch`` is (B, h, w, c); ``cond_batch`` is a list of ConditionTokens
    or a CondBatch.  ``model`` is any callable ``(z_t, t, cond) -> eps_hat``
    taking NCHW tensors, so tests can pass stubs.
    """
    dtype = next(model.parameters()).dtype if isinstance(model, nn.Module) else torch.float64
    z0 = _to_nchw(z0_batch, dtype)
    if len(z0) == 0:
        raise ValueError("empty batch")
    cond = _as_cond_batch(cond_batch, len(z0), dtype)
    if len(cond) != len(z0):
        raise ValueError("need one condition per latent")
    gen = torch.Generator().manual_seed(int(seed))
    t = torch.randint(0, schedule.T, (len(z0),), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(dtype)
    return _loss_from_draws(model, z0, cond, schedule, t, eps)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    min_improvement: float = 0.5
    probe_size: int = 32
    model: DenoiserConfig = field(default_factory=DenoiserConfig)


def train_denoiser(dataset, schedule: NoiseSchedule, config: TrainConfig = TrainConfig(), init: Optional[Denoiser] = None) -> Denoiser:
    """Fit the denoiser on fixed (latent, condition) pairs.

    Raises NonConvergence when the probe loss does not drop by at least
    ``config.min_improvement`` (a fraction of its step-0 value).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    torch.manual_seed(config.seed)
    model = init if init is not None else Denoiser(config.model)
    if config.steps == 0:
        return model
    z_all = _to_nchw(np.stack([np.asarray(z) for z, _ in dataset]), torch.float32)
    cond_all = batch_conditions([c for _, c in dataset])
    n = len(z_all)
    probe = torch.arange(min(n, config.probe_size))
    probe_seed = config.seed + 7919

    def probe_loss():
        with torch.no_grad():
            return float(ldm_loss(model, z_all[probe].permute(0, 2, 3, 1), cond_all.select(probe), schedule, probe_seed))

    start = probe_loss()
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.steps)
    for _ in range(config.steps):
        idx = torch.randint(0, n, (config.batch,), generator=gen)
        t = torch.randint(0, schedule.T, (config.batch,), generator=gen)
        eps = torch.randn(z_all[idx].shape, generator=gen)
        loss = _loss_from_draws(model, z_all[idx], cond_all.select(idx), schedule, t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    end = probe_loss()
    model.train_log = {"probe_start": start, "probe_end": end}
    if end > (1 - config.min_improvement) * start:
        raise NonConvergence(f"denoiser probe loss {start:.4f} -> {end:.4f} did not improve enough")
    return model


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _timesteps(schedule: NoiseSchedule, steps: int) -> List[int]:
    if not 1 <= steps <= schedule.T:
        raise ValueError(f"steps must lie in [1, {schedule.T}]")
    if steps == schedule.T:
        return list(range(schedule.T - 1, -1, -1))
    ts = np.unique(np.round(np.linspace(0, schedule.T - 1, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


@torch.no_grad()
def sample_batch(
    model: Denoiser,
    cond: CondBatch,
    schedule: NoiseSchedule,
    seeds: Sequence[int],
    steps: Optional[int] = None,
    latent_hw: Tuple[int, int] = (16, 16),
    clip: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """Ancestral reverse diffusion for a batch; each item has its own noise stream.

    Returns (B, h, w, c) latents.  ``clip`` bounds the predicted clean latent
    at every step.
    """
    steps = schedule.T if steps is None else steps
    ts = _timesteps(schedule, steps)
    c = model.config.latent_channels
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    x = torch.stack([torch.randn(c, *latent_hw, generator=g) for g in gens])
    ab = schedule.alpha_bar
    for i, t in enumerate(ts):
        ab_t = float(ab[t])
        ab_prev = float(ab[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        beta = 1.0 - ab_t / ab_prev
        eps = model(x, torch.full((len(x),), t, dtype=torch.long), cond)
        x0 = (x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
        if clip is not None:
            x0 = x0.clamp(*clip)
        mean = (math.sqrt(ab_prev) * beta / (1 - ab_t)) * x0 + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab_t)) * x
        if i + 1 < len(ts):
            var = beta * (1 - ab_prev) / (1 - ab_t)
            noise = torch.stack([torch.randn(c, *latent_hw, generator=g) for g in gens])
            x = mean + math.sqrt(var) * noise
        else:
            x = mean
    return x.permute(0, 2, 3, 1).numpy().astype(np.float64)


def sample(
    weights: Denoiser,
    cond: ConditionTokens,
    schedule: NoiseSchedule,
    seed: int,
    steps: Optional[int] = None,
    latent_hw: Tuple[int, int] = (16, 16),
    clip: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    if steps is not None and steps < 1:
        raise ValueError("steps must be >= 1")
    batch = uniform_batch(torch.as_tensor(cond.tokens, dtype=torch.float32)[None], cond.layout)
    return sample_batch(weights, batch, schedule, [seed], steps, latent_hw, clip)[0]
