"""Latent encoder/decoder used by the diffusion model and the spatial path.

Two kinds are supported: a parameter-free ``resize`` codec (block average
plus channel replication) and a small convolutional ``trained_ae``.
Arrays are channel-last; a leading batch axis is accepted everywhere.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch
from torch import nn

FACTORS = (1, 2, 4, 8)


@dataclass(frozen=True)
class CodecDescriptor:
    kind: str = "resize"
    factor: int = 4
    latent_channels: int = 4
    in_channels: int = 3
    upsample: str = "nearest"
    weights_ref: Optional[str] = None
    state: Optional[Dict[str, np.ndarray]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("resize", "trained_ae"):
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.factor not in FACTORS:
            raise ValueError(f"factor must be one of {FACTORS}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.kind == "trained_ae" and self.state is None:
            raise ValueError("trained_ae codec needs weights")

    def latent_shape(self, h: int, w: int):
        return (h // self.factor, w // self.factor, self.latent_channels)

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "factor": self.factor,
            "latent_channels": self.latent_channels,
            "in_channels": self.in_channels,
            "upsample": self.upsample,
            "weights_ref": self.weights_ref,
        }


def _as_batch(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    single = x.ndim == 3
    return (x[None] if single else x), single


def _project_channels(x: np.ndarray, c_out: int) -> np.ndarray:
    c_in = x.shape[-1]
    if c_out == c_in:
        return x
    if c_out > c_in:
        return x[..., [j % c_in for j in range(c_out)]]
    return np.stack([x[..., [i for i in range(c_in) if i % c_out == j]].mean(-1) for j in range(c_out)], -1)


def _unproject_channels(z: np.ndarray, c_out: int) -> np.ndarray:
    c_lat = z.shape[-1]
    if c_lat == c_out:
        return z
    if c_lat > c_out:
        return np.stack([z[..., [j for j in range(c_lat) if j % c_out == i]].mean(-1) for i in range(c_out)], -1)
    return z[..., [i % c_lat for i in range(c_out)]]


def encode(x: np.ndarray, codec: CodecDescriptor) -> np.ndarray:
    """Map H x W x c arrays (or a batch of them) to the latent grid."""
    xb, single = _as_batch(x)
    n, h, w, c = xb.shape
    f = codec.factor
    if h % f or w % f:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {f}")
    if c == 1 and codec.in_channels != 1:
        xb = np.repeat(xb, codec.in_channels, axis=-1)
    if codec.kind == "resize":
        pooled = xb.reshape(n, h // f, f, w // f, f, xb.shape[-1]).mean(axis=(2, 4))
        z = _project_channels(pooled, codec.latent_channels)
    else:
        net = _autoencoder(codec)
        with torch.no_grad():
            t = torch.from_numpy(xb).float().permute(0, 3, 1, 2)
            z = net.encoder(t).permute(0, 2, 3, 1).double().numpy()
    return z[0] if single else z


def decode(z: np.ndarray, codec: CodecDescriptor, out_shape=None) -> np.ndarray:
    """Inverse of :func:`encode`; output is clamped to [0, 1]."""
    zb, single = _as_batch(z)
    if zb.shape[-1] != codec.latent_channels:
        raise ValueError(f"latent has {zb.shape[-1]} channels, codec expects {codec.latent_channels}")
    f = codec.factor
    if codec.kind == "resize":
        if codec.upsample == "nearest":
            up = zb.repeat(f, axis=1).repeat(f, axis=2)
        else:
            t = torch.from_numpy(zb).permute(0, 3, 1, 2)
            up = nn.functional.interpolate(t, scale_factor=f, mode="bilinear", align_corners=False)
            up = up.permute(0, 2, 3, 1).numpy()
        x = _unproject_channels(up, codec.in_channels)
    else:
        net = _autoencoder(codec)
        with torch.no_grad():
            t = torch.from_numpy(zb).float().permute(0, 3, 1, 2)
            x = net.decoder(t).permute(0, 2, 3, 1).double().numpy()
    x = np.clip(x, 0.0, 1.0)
    return x[0] if single else x


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# trained autoencoder
# ---------------------------------------------------------------------------


class ConvAutoencoder(nn.Module):
    def __init__(self, factor: int, latent_channels: int, in_channels: int = 3, width: int = 32):
        super().__init__()
        n_down = int(round(math.log2(factor)))
        enc = [nn.Conv2d(in_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(width, latent_channels, 1)]
        dec = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(width, in_channels, 3, padding=1), nn.Sigmoid()]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        return self.decoder(self.encoder(x))


_AE_CACHE: Dict[str, ConvAutoencoder] = {}


def _state_digest(state: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def _autoencoder(codec: CodecDescriptor) -> ConvAutoencoder:
    key = codec.weights_ref
    if key not in _AE_CACHE:
        width = int(codec.state["encoder.0.weight"].shape[0])
        net = ConvAutoencoder(codec.factor, codec.latent_channels, codec.in_channels, width)
        net.load_state_dict({k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in codec.state.items()})
        net.eval()
        _AE_CACHE[key] = net
    return _AE_CACHE[key]


@dataclass(frozen=True)
class AutoencoderConfig:
    factor: int = 4
    latent_channels: int = 4
    width: int = 32
    steps: int = 1500
    lr: float = 2e-3
    batch: int = 32
    seed: int = 0
    min_psnr: float = 20.0


def fit_autoencoder(train_images: np.ndarray, config: AutoencoderConfig = AutoencoderConfig()) -> CodecDescriptor:
    images = np.asarray(train_images, dtype=np.float32)
    if len(images) < 32:
        raise ValueError("fit_autoencoder needs at least 32 images")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    net = ConvAutoencoder(config.factor, config.latent_channels, images.shape[-1], config.width)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.steps, 1))
    data = torch.from_numpy(images).permute(0, 3, 1, 2)
    for _ in range(config.steps):
        idx = torch.randint(0, len(data), (config.batch,), generator=gen)
        loss = nn.functional.mse_loss(net(data[idx]), data[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()

    state = {k: v.detach().numpy().astype(np.float32) for k, v in net.state_dict().items()}
    codec = CodecDescriptor(
        kind="trained_ae",
        factor=config.factor,
        latent_channels=config.latent_channels,
        in_channels=images.shape[-1],
        weights_ref=_state_digest(state),
        state=state,
    )
    recon = decode(encode(images, codec), codec)
    quality = psnr(recon, images)
    if quality < config.min_psnr:
        raise ValueError(f"autoencoder reached only {quality:.1f} dB PSNR (< {config.min_psnr} dB)")
    return codec
