"""Feature-reconstruction anomaly detector.

A frozen multi-scale encoder E produces a feature pyramid F; a trainable
generator G squeezes the pyramid through a small bottleneck and rebuilds it as
F*.  Residuals between F and F* form the anomaly map.  G only learns to rebuild
what it has seen, so unfamiliar structure (defects, and classes the detector
has forgotten) leaves large residuals.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FrozenWeightsModified, IncompatibleArtifacts, NonConvergence

log = logging.getLogger(__name__)

STRIDES = (2, 4, 8)


@dataclass(frozen=True)
class DetectorConfig:
    widths: Tuple[int, int, int] = (16, 32, 64)
    levels: Tuple[int, ...] = (0, 1, 2)  # which pyramid levels feed the loss and the map
    gen_width: int = 64
    bottleneck: int = 32
    top_k: float = 0.01
    encoder_seed: int = 0
    encoder_mode: str = "random"  # or "autoencoder": pre-fit on the first task, then frozen
    in_channels: int = 3

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ValueError("encoder needs three widths")
        if not self.levels or any(l not in (0, 1, 2) for l in self.levels):
            raise ValueError("levels must be a nonempty subset of (0, 1, 2)")
        if not 0 < self.top_k <= 1:
            raise ValueError("top_k must lie in (0, 1]")
        if self.encoder_mode not in ("random", "autoencoder"):
            raise ValueError(f"unknown encoder mode {self.encoder_mode!r}")


@dataclass(frozen=True)
class DetectorTrainConfig:
    steps: int = 600
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    min_improvement: float = 0.3
    probe_size: int = 32


class FeaturePyramid(NamedTuple):
    levels: List[torch.Tensor]  # each (B, C_l, H_l, W_l)


class AnomalyMap(NamedTuple):
    map: np.ndarray
    image_score: float


class Encoder(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        c0 = config.in_channels
        w = config.widths
        self.stages = nn.ModuleList(
            [
                nn.Conv2d(c0, w[0], 3, stride=2, padding=1),
                nn.Conv2d(w[0], w[1], 3, stride=2, padding=1),
                nn.Conv2d(w[1], w[2], 3, stride=2, padding=1),
            ]
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        out = []
        for conv in self.stages:
            x = F.relu(conv(x))
            out.append(x)
        return out


class Generator(nn.Module):
    """Pyramid in, pyramid out, through a 4x4 bottleneck."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        w, g = config.widths, config.gen_width
        self.fuse = nn.Conv2d(sum(w), g, 1)
        self.down = nn.Conv2d(g, config.bottleneck, 3, stride=2, padding=1)
        self.up8 = nn.Conv2d(config.bottleneck, g, 3, padding=1)
        # channel counts shrink as resolution grows to keep CPU training cheap
        self.up16 = nn.Conv2d(g, g // 2, 3, padding=1)
        self.up32 = nn.Conv2d(g // 2, g // 4, 3, padding=1)
        self.heads = nn.ModuleList([nn.Conv2d(g // 4, w[0], 1), nn.Conv2d(g // 2, w[1], 1), nn.Conv2d(g, w[2], 1)])

    def forward(self, feats: List[torch.Tensor]) -> List[torch.Tensor]:
        size8 = feats[2].shape[-2:]
        pooled = [F.adaptive_avg_pool2d(f, size8) for f in feats]
        h = F.relu(self.fuse(torch.cat(pooled, 1)))
        h = F.relu(self.down(h))
        h8 = F.relu(self.up8(F.interpolate(h, size=size8, mode="nearest")))
        h16 = F.relu(self.up16(F.interpolate(h8, size=feats[1].shape[-2:], mode="nearest")))
        h32 = F.relu(self.up32(F.interpolate(h16, size=feats[0].shape[-2:], mode="nearest")))
        return [self.heads[0](h32), self.heads[1](h16), self.heads[2](h8)]


class Detector(nn.Module):
    """Frozen encoder plus trainable generator; plays the DetectorWeights role."""

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.config = config
        torch.manual_seed(config.encoder_seed)
        self.encoder = Encoder(config)
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        torch.manual_seed(config.encoder_seed + 1)
        self.generator = Generator(config)
        self.encoder_checksum = encoder_checksum(self)
        self.train_log: dict = {}

    def check_encoder(self) -> None:
        if encoder_checksum(self) != self.encoder_checksum:
            raise FrozenWeightsModified("detector encoder weights changed")


def encoder_checksum(det: Detector) -> str:
    h = hashlib.sha256()
    for name, t in sorted(det.encoder.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().float().numpy().tobytes())
    return h.hexdigest()[:16]


def _to_tensor(x, channels: int) -> torch.Tensor:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != channels:
        raise ValueError(f"expected images (B,H,W,{channels}) or (H,W,{channels}), got {x.shape}")
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise ValueError("image sides must be multiples of 8")
    return torch.from_numpy(x).permute(0, 3, 1, 2) * 2 - 1


def encode_features(x, det: Detector) -> FeaturePyramid:
    with torch.no_grad():
        return FeaturePyramid(det.encoder(_to_tensor(x, det.config.in_channels)))


def reconstruct_features(feats: FeaturePyramid, det: Detector) -> FeaturePyramid:
    widths = tuple(f.shape[1] for f in feats.levels)
    if widths != tuple(det.config.widths):
        raise IncompatibleArtifacts(f"pyramid widths {widths} do not match detector {det.config.widths}")
    return FeaturePyramid(det.generator(list(feats.levels)))


def detector_loss(feats: FeaturePyramid, recon: FeaturePyramid, levels: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Sum over levels of the per-level mean squared residual."""
    levels = range(len(feats.levels)) if levels is None else levels
    return sum(((feats.levels[l] - recon.levels[l]) ** 2).mean() for l in levels)


def residual_maps(x, det: Detector) -> torch.Tensor:
    """(B, H, W) anomaly maps."""
    xt = _to_tensor(x, det.config.in_channels)
    with torch.no_grad():
        feats = det.encoder(xt)
        recon = det.generator(feats)
        maps = []
        for l in det.config.levels:
            r = ((feats[l] - recon[l]) ** 2).sum(1, keepdim=True)
            maps.append(F.interpolate(r, size=xt.shape[-2:], mode="bilinear", align_corners=False))
        return torch.stack(maps).mean(0)[:, 0].clamp_min(0)


def top_k_score(amap: np.ndarray, top_k: float) -> float:
    flat = np.sort(np.asarray(amap, dtype=np.float64).ravel())
    k = max(1, int(round(top_k * flat.size)))
    return float(flat[-k:].mean())


def anomaly_map(x, det: Detector) -> AnomalyMap:
    m = residual_maps(x, det)[0].numpy()
    return AnomalyMap(m, top_k_score(m, det.config.top_k))


def score_images(images, det: Detector, batch: int = 128) -> Tuple[np.ndarray, np.ndarray]:
    """Maps (N,H,W) and image scores (N,) for a stack of images."""
    images = np.asarray(images)
    maps = np.concatenate([residual_maps(images[i : i + batch], det).numpy() for i in range(0, len(images), batch)])
    scores = np.array([top_k_score(m, det.config.top_k) for m in maps])
    return maps, scores


def _fit_encoder_as_autoencoder(det: Detector, images: torch.Tensor, steps: int = 300, seed: int = 0) -> None:
    """Opt-in encoder mode: fit E with a throwaway decoder, then freeze it."""
    w = det.config.widths
    dec = nn.Sequential(
        nn.ConvTranspose2d(w[2], w[1], 4, 2, 1), nn.ReLU(),
        nn.ConvTranspose2d(w[1], w[0], 4, 2, 1), nn.ReLU(),
        nn.ConvTranspose2d(w[0], det.config.in_channels, 4, 2, 1),
    )
    for p in det.encoder.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(list(det.encoder.parameters()) + list(dec.parameters()), lr=2e-3)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        xb = images[torch.randint(0, len(images), (32,), generator=gen)]
        loss = F.mse_loss(dec(det.encoder(xb)[-1]), xb)
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in det.encoder.parameters():
        p.requires_grad_(False)
    det.encoder_checksum = encoder_checksum(det)


def train_detector(
    images,
    init: Optional[Detector] = None,
    config: DetectorTrainConfig = DetectorTrainConfig(),
    detector_config: DetectorConfig = DetectorConfig(),
) -> Detector:
    """Train G on normal images, cold or warm-started from ``init``."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("train_detector needs at least one image")
    if init is not None:
        if config.steps == 0:
            return init
        det = copy.deepcopy(init)
    else:
        det = Detector(detector_config)
    x = _to_tensor(images, det.config.in_channels)
    if init is None and det.config.encoder_mode == "autoencoder":
        _fit_encoder_as_autoencoder(det, x, seed=config.seed)
    det.check_encoder()
    with torch.no_grad():
        feats_all = det.encoder(x)
    levels = det.config.levels

    pgen = torch.Generator().manual_seed(config.seed + 104729)
    probe = torch.randperm(len(x), generator=pgen)[: config.probe_size]

    def probe_loss(generator):
        with torch.no_grad():
            fp = [f[probe] for f in feats_all]
            return float(detector_loss(FeaturePyramid(fp), FeaturePyramid(generator(fp)), levels))

    start = probe_loss(det.generator)
    # a warm start may already sit near its optimum, so convergence is judged
    # against what a freshly initialised generator would score on the probe
    reference = start if init is None else max(start, probe_loss(Detector(det.config).generator.eval()))
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(det.generator.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    det.generator.train()
    for step in range(config.steps):
        items = torch.randint(0, len(x), (config.batch,), generator=gen)
        fb = [f[items] for f in feats_all]
        loss = detector_loss(FeaturePyramid(fb), FeaturePyramid(det.generator(fb)), levels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    det.generator.eval()
    end = probe_loss(det.generator) if config.steps else start
    det.check_encoder()
    det.train_log = {
        "probe_start": start,
        "probe_end": end,
        "probe_reference": reference,
        "steps": config.steps,
        "n_images": int(len(x)),
        "warm_start": init is not None,
    }
    if config.steps and end > (1 - config.min_improvement) * reference:
        raise NonConvergence(
            f"detector probe loss {end:.4f} is not {config.min_improvement:.0%} below the reference {reference:.4f}"
        )
    return det


def detector_summary(det: Detector) -> dict:
    return {"config": asdict(det.config), "encoder_checksum": det.encoder_checksum}
