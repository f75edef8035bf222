"""Object-mask acquisition and the mask degradations used in robustness runs.

Real deployments would put a promptable segmenter behind ``SegmenterBackend``;
here ``OracleSegmenter`` answers from the benchmark's ground truth.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import MaskNotFound, StrategyMisuse


class SegmenterBackend(Protocol):
    def point_prompt(self, image: np.ndarray, points: Sequence[Tuple[int, int]]) -> np.ndarray: ...

    def propose_all(self, image: np.ndarray) -> List[Tuple[np.ndarray, float]]: ...


def image_key(image: np.ndarray) -> str:
    a = np.ascontiguousarray(image, dtype=np.float32)
    return hashlib.sha1(a.tobytes() + str(a.shape).encode()).hexdigest()


class OracleSegmenter:
    """Looks up ground-truth masks by image content.

    A point prompt returns every pixel sharing the prompted pixel's label
    (object or background), which is what a good segmenter does on a
    single-object image.
    """

    def __init__(self, masks: Optional[dict] = None):
        self._masks = dict(masks or {})

    @classmethod
    def from_samples(cls, samples: Iterable) -> "OracleSegmenter":
        return cls({image_key(s.image): np.asarray(s.object_mask, dtype=bool) for s in samples})

    def add(self, image: np.ndarray, mask: np.ndarray) -> None:
        self._masks[image_key(image)] = np.asarray(mask, dtype=bool)

    def _lookup(self, image: np.ndarray) -> np.ndarray:
        try:
            return self._masks[image_key(image)]
        except KeyError:
            raise MaskNotFound("oracle has no mask for this image") from None

    def point_prompt(self, image, points):
        obj = self._lookup(image)
        out = np.zeros_like(obj)
        for x, y in points:
            out |= obj if obj[y, x] else ~obj
        return out.astype(np.uint8)

    def propose_all(self, image):
        obj = self._lookup(image)
        frac = float(obj.mean())
        return [(obj.astype(np.uint8), frac), ((~obj).astype(np.uint8), 1.0 - frac)]


def corner_prompt_mask(image: np.ndarray, backend: SegmenterBackend) -> np.ndarray:
    """Segment the background from the four corners and invert it."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    background = np.zeros((h, w), dtype=bool)
    for pt in [(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)]:
        background |= np.asarray(backend.point_prompt(image, [pt])).astype(bool)
    if background.all():
        raise StrategyMisuse("corner prompts covered the whole frame; the object may fill the image")
    return ~background


def area_select_mask(image: np.ndarray, backend: SegmenterBackend, area_range: Tuple[float, float]) -> np.ndarray:
    lo, hi = area_range
    if not 0 <= lo < hi <= 1:
        raise ValueError("area_range must satisfy 0 <= lo < hi <= 1")
    mid = (lo + hi) / 2
    best, best_d = None, None
    for mask, frac in backend.propose_all(image):
        if lo <= frac <= hi:
            d = round(abs(frac - mid), 12)
            if best_d is None or d < best_d:
                best, best_d = mask, d
    if best is None:
        raise MaskNotFound(f"no proposal with area fraction in [{lo}, {hi}]")
    return np.asarray(best).astype(bool)


def default_area_range(train_masks: np.ndarray, spread: float = 0.3) -> Tuple[float, float]:
    """Plus or minus ``spread`` around the median training-mask area fraction."""
    med = float(np.median(np.asarray(train_masks, dtype=bool).mean(axis=(-2, -1))))
    return max(0.0, med * (1 - spread)), min(1.0, med * (1 + spread))


@dataclass(frozen=True)
class MaskNoiseSpec:
    mode: str = "mixed"  # dilate | erode | mixed
    magnitude: int = 2
    affected_fraction: float = 0.3

    def __post_init__(self):
        if self.mode not in ("dilate", "erode", "mixed"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")
        if not 0 <= self.affected_fraction <= 1:
            raise ValueError("affected_fraction must lie in [0, 1]")

    def validate_for(self, side: int) -> None:
        if self.magnitude > side / 8:
            raise ValueError(f"magnitude {self.magnitude} exceeds side/8 for side {side}")


class PerturbResult(NamedTuple):
    mask: np.ndarray
    clamped: bool  # erosion emptied the mask and it was reduced to a 1-pixel core


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy**2 + xx**2 <= r * r


def _stamp(points: np.ndarray, shape: Tuple[int, int], radius: int) -> np.ndarray:
    seeds = np.zeros(shape, dtype=bool)
    seeds[points[:, 0], points[:, 1]] = True
    return ndimage.binary_dilation(seeds, structure=disc(radius))


def perturb_mask(mask: np.ndarray, spec: MaskNoiseSpec, seed: int) -> PerturbResult:
    """Grow or shrink the mask around a random subset of its boundary.

    Dilation stamps discs on selected inner-boundary pixels; erosion removes
    discs centred on selected outer-boundary pixels.  With
    ``affected_fraction=1`` both reduce to ordinary morphology with a disc.
    """
    mask = np.asarray(mask).astype(bool)
    spec.validate_for(min(mask.shape))
    if spec.magnitude == 0 or spec.affected_fraction == 0 or not mask.any():
        return PerturbResult(mask.copy(), False)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, 0x0015E])
    mode = spec.mode if spec.mode != "mixed" else ("dilate" if rng.random() < 0.5 else "erode")
    cross = ndimage.generate_binary_structure(2, 1)
    if mode == "dilate":
        boundary = mask & ~ndimage.binary_erosion(mask, cross, border_value=0)
    else:
        # pixels outside the frame count as background, like standard erosion
        padded = np.pad(mask, 1)
        ring = ndimage.binary_dilation(padded, cross) & ~padded
        boundary = ring
    pts = np.argwhere(boundary)
    n_sel = max(1, int(round(spec.affected_fraction * len(pts))))
    chosen = pts[rng.choice(len(pts), size=n_sel, replace=False)]
    if mode == "dilate":
        return PerturbResult(mask | _stamp(chosen, mask.shape, spec.magnitude), False)
    removed = _stamp(chosen, boundary.shape, spec.magnitude)[1:-1, 1:-1]
    out = mask & ~removed
    if not out.any():
        dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
        out = np.zeros_like(mask)
        out[np.unravel_index(np.argmax(dist), mask.shape)] = True
        return PerturbResult(out, True)
    return PerturbResult(out, False)


def mbr_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("mbr_mask needs at least one foreground pixel")
    ys, xs = np.nonzero(mask)
    out = np.zeros_like(mask)
    out[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1] = True
    return out


def apply_mask_strategy(
    masks: np.ndarray,
    strategy: str = "clean",
    noise: MaskNoiseSpec = MaskNoiseSpec(),
    seed: int = 0,
) -> Tuple[np.ndarray, dict]:
    """Degrade a stack of masks for the robustness runs.

    ``noisy`` perturbs a seeded ``noise.affected_fraction`` share of the masks
    (each perturbed mask also has that share of its boundary touched);
    ``mbr`` replaces every mask by its bounding rectangle.
    """
    masks = np.asarray(masks).astype(bool)
    info = {"strategy": strategy, "perturbed": [], "clamped": []}
    if strategy == "clean":
        return masks.copy(), info
    if strategy == "mbr":
        return np.stack([mbr_mask(m) for m in masks]), info
    if strategy != "noisy":
        raise ValueError(f"unknown mask strategy {strategy!r}")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xD15C])
    n_sel = int(round(noise.affected_fraction * len(masks)))
    chosen = sorted(rng.choice(len(masks), size=n_sel, replace=False).tolist())
    out = masks.copy()
    for i in chosen:
        res = perturb_mask(masks[i], noise, seed=int(rng.integers(2**62)))
        out[i] = res.mask
        if res.clamped:
            info["clamped"].append(i)
    info["perturbed"] = chosen
    return out, info
