"""Procedural continual anomaly-detection benchmark.

Every class is a textured 2-D shape family rendered on a plain background;
every sample draws its own pose.  Test splits add small defects with exact
pixel ground truth.  All randomness flows through explicit seeds so a
benchmark is a pure function of its config.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import AnomalyPlacementError

SHAPE_FAMILIES = ("disc", "polygon", "ring", "cross", "blob")
ANOMALY_KINDS = ("scratch", "blotch", "hole", "color_shift")
SUPPORTED_SIDES = (32, 64, 128)

# keeps the object this far (fraction of side) from the frame at maximal scale
_FRAME_MARGIN = 0.04
_MAX_ANOMALY_FRACTION = 0.25


@dataclass(frozen=True)
class Texture:
    color: Tuple[float, float, float]
    stripe_freq: float  # cycles across the object diameter
    stripe_angle: float  # radians, object frame
    amplitude: float


@dataclass(frozen=True)
class Background:
    color: Tuple[float, float, float]
    noise: float


@dataclass(frozen=True)
class PoseRange:
    dx: Tuple[float, float]
    dy: Tuple[float, float]
    theta: Tuple[float, float]  # degrees


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape_family: str
    texture: Texture
    scale_range: Tuple[float, float]  # object diameter as a fraction of the side
    pose_range: PoseRange
    background: Background
    shape_params: Tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "shape_family": self.shape_family,
            "texture": {
                "color": list(self.texture.color),
                "stripe_freq": self.texture.stripe_freq,
                "stripe_angle": self.texture.stripe_angle,
                "amplitude": self.texture.amplitude,
            },
            "scale_range": list(self.scale_range),
            "pose_range": {
                "dx": list(self.pose_range.dx),
                "dy": list(self.pose_range.dy),
                "theta": list(self.pose_range.theta),
            },
            "background": {
                "color": list(self.background.color),
                "noise": self.background.noise,
            },
            "shape_params": list(self.shape_params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSpec":
        t, p, b = d["texture"], d["pose_range"], d["background"]
        return cls(
            class_id=int(d["class_id"]),
            shape_family=d["shape_family"],
            texture=Texture(tuple(t["color"]), t["stripe_freq"], t["stripe_angle"], t["amplitude"]),
            scale_range=tuple(d["scale_range"]),
            pose_range=PoseRange(tuple(p["dx"]), tuple(p["dy"]), tuple(p["theta"])),
            background=Background(tuple(b["color"]), b["noise"]),
            shape_params=tuple(d["shape_params"]),
        )


@dataclass(frozen=True)
class Pose:
    dx: float
    dy: float
    theta: float  # degrees
    scale: float


@dataclass(eq=False)
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    object_mask: np.ndarray  # H x W bool
    class_id: int
    is_anomalous: bool = False
    anomaly_gt: Optional[np.ndarray] = None
    pose: Optional[Pose] = None
    anomaly_kind: Optional[str] = None

    def __post_init__(self):
        if self.anomaly_gt is None:
            self.anomaly_gt = np.zeros(self.object_mask.shape, dtype=bool)


@dataclass(frozen=True)
class BenchmarkConfig:
    n_classes: int = 5
    n_train_per_class: int = 64
    n_test_normal: int = 16
    n_test_anom: int = 16
    image_side: int = 64
    master_seed: int = 0


@dataclass(eq=False)
class Benchmark:
    classes: List[ClassSpec]
    train: Dict[int, List[Sample]]
    test: Dict[int, List[Sample]]
    image_side: int
    master_seed: int
    config: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def spec(self, class_id: int) -> ClassSpec:
        for s in self.classes:
            if s.class_id == class_id:
                return s
        raise KeyError(class_id)


def derive_seed(*parts: int) -> int:
    """Collapse a tuple of integers into one 63-bit seed."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0] >> 1)


def make_class_spec(master_seed: int, class_id: int) -> ClassSpec:
    if class_id < 0:
        raise ValueError("class_id must be >= 0")
    run_rng = np.random.default_rng([master_seed, 0x5EED])
    families = run_rng.permutation(len(SHAPE_FAMILIES))
    hue0 = run_rng.random()
    family = SHAPE_FAMILIES[families[class_id % len(SHAPE_FAMILIES)]]

    rng = np.random.default_rng([master_seed, class_id, 0xC1A55])
    hue = (hue0 + class_id * 0.618033988749895) % 1.0
    color = colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.78, 1.0))
    texture = Texture(
        color=tuple(float(c) for c in color),
        stripe_freq=float(rng.uniform(1.5, 3.0)),
        stripe_angle=float(rng.uniform(0, np.pi)),
        amplitude=float(rng.uniform(0.12, 0.25)),
    )
    bg_rgb = colorsys.hsv_to_rgb((hue + 0.5 + rng.uniform(-0.08, 0.08)) % 1.0, rng.uniform(0.3, 0.5), rng.uniform(0.2, 0.34))
    bg = Background(color=tuple(float(c) for c in bg_rgb), noise=0.015)
    lo = float(rng.uniform(0.38, 0.46))
    hi = lo + 0.08
    bound = min(0.3, 0.5 - hi / 2 - _FRAME_MARGIN)
    pose_range = PoseRange((-bound, bound), (-bound, bound), (-180.0, 180.0))

    if family == "polygon":
        params = (float(rng.integers(3, 7)),)
    elif family == "ring":
        params = (float(rng.uniform(0.45, 0.6)),)
    elif family == "cross":
        params = (float(rng.uniform(0.3, 0.4)),)
    elif family == "blob":
        params = tuple(float(x) for x in np.concatenate([rng.uniform(0.05, 0.12, 3), rng.uniform(0, 2 * np.pi, 3)]))
    else:
        params = ()
    return ClassSpec(class_id, family, texture, (lo, hi), pose_range, bg, params)


def _shape_inside(family: str, params: Tuple[float, ...], u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    if family == "disc":
        return rho <= 1.0
    if family == "polygon":
        n = int(params[0])
        sector = 2 * np.pi / n
        edge = np.cos(np.pi / n) / np.cos((phi % sector) - np.pi / n)
        return rho <= edge
    if family == "ring":
        return (rho <= 1.0) & (rho >= params[0])
    if family == "cross":
        w = params[0]
        return ((np.abs(u) <= w) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= w) & (np.abs(u) <= 1.0))
    if family == "blob":
        amps, phases = params[:3], params[3:]
        r = 0.78 + sum(a * np.cos((k + 2) * phi + p) for k, (a, p) in enumerate(zip(amps, phases)))
        return rho <= r
    raise ValueError(f"unknown shape family {family!r}")


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask.astype(bool)
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def render(spec: ClassSpec, pose: Pose, image_side: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Rasterise one object; returns (image, object_mask)."""
    side = image_side
    coords = np.arange(side) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = side * (0.5 + pose.dx), side * (0.5 + pose.dy)
    radius = pose.scale * side / 2
    th = np.deg2rad(pose.theta)
    X, Y = xx - cx, yy - cy
    u = (np.cos(th) * X + np.sin(th) * Y) / radius
    v = (-np.sin(th) * X + np.cos(th) * Y) / radius

    mask = _largest_component(_shape_inside(spec.shape_family, spec.shape_params, u, v))

    tex = spec.texture
    s = u * np.cos(tex.stripe_angle) + v * np.sin(tex.stripe_angle)
    shade = 1.0 + tex.amplitude * np.sin(np.pi * tex.stripe_freq * s)
    obj = np.asarray(tex.color)[None, None, :] * shade[..., None]

    bg = spec.background
    image = np.broadcast_to(np.asarray(bg.color), (side, side, 3)).copy()
    image[mask] = obj[mask]
    image += bg.noise * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0), mask


def _draw_pose(spec: ClassSpec, rng: np.random.Generator) -> Pose:
    pr = spec.pose_range
    return Pose(
        dx=float(rng.uniform(*pr.dx)),
        dy=float(rng.uniform(*pr.dy)),
        theta=float(rng.uniform(*pr.theta)),
        scale=float(rng.uniform(*spec.scale_range)),
    )


def render_normal(spec: ClassSpec, sample_seed: int, image_side: int = 64) -> Sample:
    rng = np.random.default_rng([spec.class_id, sample_seed & 0xFFFFFFFF, sample_seed >> 32])
    pose = _draw_pose(spec, rng)
    image, mask = render(spec, pose, image_side, rng)
    return Sample(image=image, object_mask=mask, class_id=spec.class_id, pose=pose)


def _anomaly_region(kind, shape, center, radius, rng):
    side_y, side_x = shape
    yy, xx = np.meshgrid(np.arange(side_y) + 0.5, np.arange(side_x) + 0.5, indexing="ij")
    dy, dx = yy - center[0], xx - center[1]
    if kind == "scratch":
        ang = rng.uniform(0, np.pi)
        half_len = radius * rng.uniform(1.4, 2.0)
        along = dx * np.cos(ang) + dy * np.sin(ang)
        across = -dx * np.sin(ang) + dy * np.cos(ang)
        return (np.abs(across) <= 1.0) & (np.abs(along) <= half_len)
    rho = np.hypot(dx, dy)
    if kind == "blotch":
        phi = np.arctan2(dy, dx)
        amps = rng.uniform(0.0, 0.05, 3)
        phases = rng.uniform(0, 2 * np.pi, 3)
        r = radius * (1.0 + sum(a * np.cos((k + 2) * phi + p) for k, (a, p) in enumerate(zip(amps, phases))))
        return rho <= r
    return rho <= radius


def inject_anomaly(sample: Sample, anomaly_seed: int, kind: str) -> Sample:
    if sample.is_anomalous:
        raise ValueError("sample is already anomalous")
    if kind not in ANOMALY_KINDS:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    rng = np.random.default_rng([anomaly_seed & 0xFFFFFFFF, anomaly_seed >> 32, ANOMALY_KINDS.index(kind)])
    obj = sample.object_mask
    obj_area = float(obj.sum())
    radius = np.sqrt(rng.uniform(0.06, 0.16) * obj_area / np.pi)

    depth = ndimage.distance_transform_edt(obj)
    candidates = np.argwhere(depth >= max(1.5, 0.7 * radius))
    if len(candidates) == 0:
        raise AnomalyPlacementError(
            f"object of area {obj_area:.0f}px cannot host a {kind} of radius {radius:.1f}px"
        )
    cy, cx = candidates[rng.integers(len(candidates))] + 0.5

    image = sample.image
    for _ in range(20):
        region = _anomaly_region(kind, obj.shape, (cy, cx), radius, rng) & obj
        if 0 < region.sum() <= _MAX_ANOMALY_FRACTION * obj_area:
            break
        radius *= 0.85
    else:
        raise AnomalyPlacementError(f"could not size a {kind} inside the object")

    new = image.copy()
    if kind == "hole":
        bg = np.asarray(sample_background(image, obj))
        new[region] = np.clip(bg + 0.015 * rng.standard_normal((int(region.sum()), 3)), 0, 1)
    elif kind == "blotch":
        new[region] = image[region] * 0.35
    elif kind == "scratch":
        lum = float(image[region].mean())
        new[region] = 0.08 if lum > 0.5 else 0.95
    else:  # color_shift
        new[region] = np.roll(image[region], 1, axis=-1)
    gt = np.any(new != image, axis=-1)
    if not gt.any():
        raise AnomalyPlacementError(f"{kind} left the image unchanged")
    return replace(sample, image=new, is_anomalous=True, anomaly_gt=gt, anomaly_kind=kind)


def sample_background(image: np.ndarray, object_mask: np.ndarray) -> Tuple[float, float, float]:
    """Median background colour of a rendered image."""
    return tuple(float(c) for c in np.median(image[~object_mask], axis=0))


def build_benchmark(config: BenchmarkConfig) -> Benchmark:
    if config.image_side not in SUPPORTED_SIDES:
        raise ValueError(f"image_side must be one of {SUPPORTED_SIDES}, got {config.image_side}")
    for name in ("n_classes", "n_train_per_class", "n_test_normal", "n_test_anom"):
        if getattr(config, name) < 1:
            raise ValueError(f"{name} must be >= 1")
    seed, side = config.master_seed, config.image_side
    classes = [make_class_spec(seed, k) for k in range(config.n_classes)]
    train, test = {}, {}
    for spec in classes:
        k = spec.class_id
        train[k] = [
            render_normal(spec, derive_seed(seed, k, 0, i), side) for i in range(config.n_train_per_class)
        ]
        tests = [render_normal(spec, derive_seed(seed, k, 1, i), side) for i in range(config.n_test_normal)]
        for i in range(config.n_test_anom):
            kind = ANOMALY_KINDS[i % len(ANOMALY_KINDS)]
            for attempt in range(16):
                base = render_normal(spec, derive_seed(seed, k, 2, i, attempt), side)
                try:
                    tests.append(inject_anomaly(base, derive_seed(seed, k, 3, i, attempt), kind))
                    break
                except AnomalyPlacementError:
                    continue
            else:
                raise AnomalyPlacementError(f"class {k}: spec too small to host anomalies")
        test[k] = tests
    return Benchmark(classes, train, test, side, seed, config)


def oracle_object_mask(image: np.ndarray, spec: ClassSpec, threshold: float = 0.2) -> np.ndarray:
    """Segment an image of a known class by distance to its background colour.

    Works on generated images as well as rendered ones, which is what the
    spatial-control checks need.
    """
    dist = np.linalg.norm(image - np.asarray(spec.background.color)[None, None, :], axis=-1)
    fg = dist > threshold
    if not fg.any():
        return fg
    return _largest_component(fg)


def _pool(images: np.ndarray, grid: int) -> np.ndarray:
    n, h, w, c = images.shape
    f = h // grid
    return images.reshape(n, grid, f, grid, f, c).mean(axis=(2, 4)).reshape(n, -1)


def _pose_invariant(images: np.ndarray, grid: int) -> np.ndarray:
    # per-channel sorted block means: invariant to where the object sits and how it is rotated
    n, c = len(images), images.shape[-1]
    blocks = _pool(images, grid).reshape(n, grid * grid, c)
    return np.sort(blocks, axis=1).reshape(n, -1)


class NearestClassMean:
    """Nearest-class-mean classifier on block-averaged images (sorted per channel)."""

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.class_ids: List[int] = []
        self.means: Optional[np.ndarray] = None

    def fit(self, images_by_class: Dict[int, np.ndarray]) -> "NearestClassMean":
        self.class_ids = sorted(images_by_class)
        self.means = np.stack([_pose_invariant(np.asarray(images_by_class[k]), self.grid).mean(0) for k in self.class_ids])
        return self

    def predict(self, images: np.ndarray) -> np.ndarray:
        feats = _pose_invariant(np.asarray(images), self.grid)
        d = ((feats[:, None, :] - self.means[None]) ** 2).sum(-1)
        return np.asarray(self.class_ids)[np.argmin(d, axis=1)]


def stack_images(samples: List[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])
