"""Sequential-class protocol, baselines, ablation sweeps and reporting.

For each task the harness (1) compresses the new class into a memory, (2)
replays every earlier memory, (3) trains the detector on replay plus the new
class, and (4) evaluates on the test splits of all classes seen so far.
Raw training data goes through ``GuardedTrainStore``, which logs every read
and refuses reads of earlier classes once their task is over.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import checkpoint
from .backbone import PretrainConfig, pretrain_denoiser
from .codec import CodecDescriptor
from .data import Benchmark, BenchmarkConfig, Sample, build_benchmark, derive_seed, stack_images
from .detector import Detector, DetectorConfig, DetectorTrainConfig, encoder_checksum, score_images, train_detector
from .diffusion import Denoiser, NoiseSchedule, make_schedule
from .errors import AccessViolation, RcadError, StorageBudgetExceeded
from .masks import MaskNoiseSpec, OracleSegmenter, apply_mask_strategy, area_select_mask, corner_prompt_mask, default_area_range
from .memory import CompressConfig, compress_class, denoiser_fingerprint, memory_from_bytes, memory_to_bytes
from .metrics import ScoreMatrix, StorageTable, forgetting_measure, image_auroc, pixel_ap, storage_report
from .replay import MaskAugmentSpec, build_replay_buffer

log = logging.getLogger(__name__)

METHODS = ("replaycad", "naive_finetune")
FEATURE_MODES = ("both", "semantic_only", "spatial_only", "none")
MASK_SOURCES = ("oracle", "corner_prompt", "area_select")
MASK_DEGRADATIONS = ("clean", "noisy", "mbr")
DETECTOR_MODES = ("warm_start", "from_scratch")


@dataclass(frozen=True)
class RunConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    class_order: Optional[Tuple[int, ...]] = None  # explicit permutation; identity if None and no order_seed
    order_seed: Optional[int] = None
    method: str = "replaycad"
    feature_mode: str = "both"
    K: int = 8
    n: int = 32
    m: int = 64
    C: int = 64
    P: int = 4
    n_mask: int = 8
    per_class_replay: int = 128
    mask_source: str = "oracle"
    mask_degradation: str = "clean"
    mask_noise: MaskNoiseSpec = field(default_factory=MaskNoiseSpec)
    detector_mode: str = "warm_start"
    seed: int = 0
    schedule_T: int = 200
    replay_steps: Optional[int] = None  # sampler steps; None means the full chain
    augment: MaskAugmentSpec = field(default_factory=MaskAugmentSpec)
    compress_steps: int = 400
    compress_optimizer: str = "sgd"
    lr_v: float = 1e-2
    lr_w: float = 1e-3
    detector_steps: int = 500
    detector_lr: float = 1e-3
    min_improvement: float = 0.3  # probe-loss criterion for compression and detector training
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    pretrain_scope: str = "all_classes"  # or "first_task" (strict mode)
    memory_budget: float = 0.01  # max memory bytes / raw float32 training bytes; inf disables

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.method == "naive_finetune" and self.feature_mode != "none":
            raise ValueError("naive_finetune stores no features; use feature_mode='none'")
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"mask_source must be one of {MASK_SOURCES}")
        if self.mask_degradation not in MASK_DEGRADATIONS:
            raise ValueError(f"mask_degradation must be one of {MASK_DEGRADATIONS}")
        if self.detector_mode not in DETECTOR_MODES:
            raise ValueError(f"detector_mode must be one of {DETECTOR_MODES}")
        if self.pretrain_scope not in ("all_classes", "first_task"):
            raise ValueError("pretrain_scope must be 'all_classes' or 'first_task'")
        if self.class_order is not None and sorted(self.class_order) != list(range(self.benchmark.n_classes)):
            raise ValueError("class_order must be a permutation of the class ids")

    def order(self) -> List[int]:
        n = self.benchmark.n_classes
        if self.class_order is not None:
            return list(self.class_order)
        if self.order_seed is not None:
            return [int(i) for i in np.random.default_rng([self.order_seed, 0x0D0E]).permutation(n)]
        return list(range(n))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in d.items():
        if key not in hints:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        default = getattr(cls(), key) if _has_defaults(cls) else None
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = _from_dict(type(default), value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def _has_defaults(cls) -> bool:
    return all(f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING for f in dataclasses.fields(cls))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# access control
# ---------------------------------------------------------------------------


class GuardedTrainStore:
    """Raw training data behind a gate that records every read.

    The harness opens one class at a time; reading any other class outside
    the setup phase raises ``AccessViolation``.
    """

    def __init__(self, train: Dict[int, List[Sample]]):
        self._train = train
        self.log: List[Tuple[str, int, int]] = []  # (stage, task, class)
        self._open: Optional[int] = None
        self._setup = False

    def open_setup(self) -> None:
        self._setup = True

    def close_setup(self) -> None:
        self._setup = False

    def open_class(self, class_id: Optional[int]) -> None:
        self._open = class_id

    def read(self, class_id: int, stage: str, task: int) -> List[Sample]:
        self.log.append((stage, task, class_id))
        if not self._setup and class_id != self._open:
            raise AccessViolation(f"stage {stage!r} of task {task} tried to read raw data of class {class_id}")
        return self._train[class_id]

    def past_class_reads(self, order: List[int], stages=("replay", "detector")) -> List[Tuple[str, int, int]]:
        """Reads of a class learned before the reading task, in the given stages."""
        pos = {k: i for i, k in enumerate(order)}
        return [(s, t, k) for s, t, k in self.log if s in stages and t >= 0 and pos[k] < t]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RunReport:
    config: dict
    order: List[int]
    image_auroc: ScoreMatrix
    pixel_ap: ScoreMatrix
    storage: StorageTable
    manifest: dict
    timings: dict = field(default_factory=dict)
    access_log: List[Tuple[str, int, int]] = field(default_factory=list)
    tag: str = ""

    def avg(self, metric: str) -> float:
        return getattr(self, metric).average()

    def fm(self, metric: str) -> float:
        return forgetting_measure(getattr(self, metric))

    def summary(self) -> dict:
        return {m: {"avg": self.avg(m), "fm": self.fm(m)} for m in ("image_auroc", "pixel_ap")}


def _stage(name: str, task: int, class_id: int, timings: dict):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, exc_type, exc, tb):
            timings.setdefault(f"task{task}", {})[name] = round(time.perf_counter() - self.t0, 3)
            if exc is not None and isinstance(exc, RcadError) and not getattr(exc, "stage", None):
                exc.stage, exc.task, exc.class_id = name, task, class_id
                if exc.args:
                    exc.args = (f"[task {task}, class {class_id}, {name}] {exc.args[0]}",) + exc.args[1:]
            return False

    return _Ctx()


# ---------------------------------------------------------------------------
# setup: benchmark, codec, backbone
# ---------------------------------------------------------------------------


def default_codec() -> CodecDescriptor:
    return CodecDescriptor(kind="resize", factor=4, latent_channels=4)


def backbone_config(config: RunConfig) -> PretrainConfig:
    """The run's pretraining config with token shapes aligned to the memories it will serve."""
    pre = config.pretrain
    model = replace(pre.model, cond_dim=config.C, spatial_readout=(config.n, config.m) if pre.model.spatial_readout else None)
    return replace(pre, K=max(pre.K, config.K), n=config.n, m=config.m, P=config.P, model=model)


def pretrain_key(config: RunConfig, codec: CodecDescriptor, schedule: NoiseSchedule) -> str:
    return config_hash(
        {
            "benchmark": asdict(config.benchmark),
            "pretrain": asdict(backbone_config(config)),
            "codec": codec.describe(),
            "schedule": schedule.describe(),
            "scope": config.pretrain_scope,
            "first": config.order()[0] if config.pretrain_scope == "first_task" else None,
        }
    )


def get_backbone(
    config: RunConfig,
    bench: Benchmark,
    codec: CodecDescriptor,
    schedule: NoiseSchedule,
    cache_dir: Optional[Path] = None,
    store: Optional[GuardedTrainStore] = None,
) -> Denoiser:
    """Phase-A backbone, loaded from ``cache_dir`` when an identical one exists."""
    key = pretrain_key(config, codec, schedule)
    path = Path(cache_dir) / f"denoiser_{key}.ckpt" if cache_dir else None
    if path is not None and path.exists():
        return checkpoint.load(path)
    classes = sorted(bench.train) if config.pretrain_scope == "all_classes" else [config.order()[0]]
    data = {}
    for k in classes:
        samples = store.read(k, "pretrain", -1) if store is not None else bench.train[k]
        data[k] = (stack_images(samples), np.stack([s.object_mask for s in samples]))
    model = pretrain_denoiser(data, codec, schedule, backbone_config(config))
    if path is not None:
        checkpoint.save(model, path)
    return model


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


def acquire_masks(samples: List[Sample], config: RunConfig, seed: int) -> Tuple[np.ndarray, dict]:
    """Object masks for one class's training images, then the configured degradation."""
    if config.mask_source == "oracle":
        masks = np.stack([s.object_mask for s in samples])
    else:
        backend = OracleSegmenter.from_samples(samples)
        if config.mask_source == "corner_prompt":
            masks = np.stack([corner_prompt_mask(s.image, backend) for s in samples])
        else:
            rng_range = default_area_range(np.stack([s.object_mask for s in samples]))
            masks = np.stack([area_select_mask(s.image, backend, rng_range) for s in samples])
    return apply_mask_strategy(masks, config.mask_degradation, config.mask_noise, seed)


def compress_config(config: RunConfig, class_id: int) -> CompressConfig:
    return CompressConfig(
        K=config.K,
        n=config.n,
        m=config.m,
        C=config.C,
        P=config.P,
        steps=config.compress_steps,
        lr_v=config.lr_v,
        lr_w=config.lr_w,
        optimizer=config.compress_optimizer,
        seed=derive_seed(config.seed, class_id, 11),
        prompt_seed=config.pretrain.prompt_seed,
        mapper_seed=config.pretrain.mapper_seed,
        n_mask=config.n_mask,
        use_semantic=config.feature_mode in ("both", "semantic_only"),
        use_spatial=config.feature_mode in ("both", "spatial_only"),
        min_improvement=config.min_improvement,
    )


def evaluate(det: Detector, test: List[Sample]) -> Tuple[float, float]:
    images = stack_images(test)
    maps, scores = score_images(images, det)
    labels = [int(s.is_anomalous) for s in test]
    return image_auroc(scores, labels), pixel_ap(list(maps), [s.anomaly_gt for s in test])


def run_protocol(
    config: RunConfig,
    denoiser: Optional[Denoiser] = None,
    workdir: Optional[Path] = None,
    cache_dir: Optional[Path] = None,
    replay_cache: Optional[dict] = None,
    bench: Optional[Benchmark] = None,
) -> RunReport:
    """Run the full sequential protocol for one configuration.

    Memories are always serialized and read back before replay, so replay
    sees exactly what a file on disk would hold.  ``replay_cache`` may be
    shared between runs; replay is a pure function of its key.
    """
    torch.manual_seed(config.seed)
    bench = bench or build_benchmark(config.benchmark)
    order = config.order()
    n = len(order)
    codec = default_codec()
    schedule = make_schedule(config.schedule_T)
    store = GuardedTrainStore(bench.train)
    timings: dict = {}
    replay_cache = {} if replay_cache is None else replay_cache
    use_memory = config.method == "replaycad" and config.feature_mode != "none"

    t0 = time.perf_counter()
    if use_memory and denoiser is None:
        store.open_setup()
        denoiser = get_backbone(config, bench, codec, schedule, cache_dir, store)
        store.close_setup()
    timings["setup"] = round(time.perf_counter() - t0, 3)

    auroc = ScoreMatrix.empty(n, "image_auroc")
    ap = ScoreMatrix.empty(n, "pixel_ap")
    memory_files: List[bytes] = []
    manifest: dict = {"config_hash": config_hash(config.to_dict()), "order": order, "tasks": []}
    if use_memory:
        manifest["denoiser"] = denoiser_fingerprint(denoiser)
    det: Optional[Detector] = None
    raw_bytes = []

    for gamma, k in enumerate(order):
        task_info: dict = {"task": gamma, "class_id": k}
        store.open_class(k)
        current = store.read(k, "compress" if use_memory else "detector", gamma)
        raw_bytes.append(int(sum(s.image.astype(np.float32).nbytes for s in current)))

        if use_memory:
            with _stage("compress", gamma, k, timings):
                masks, mask_info = acquire_masks(current, config, derive_seed(config.seed, k, 5))
                mem = compress_class(stack_images(current), masks, denoiser, codec, schedule, compress_config(config, k), class_id=k)
                blob = memory_to_bytes(mem)
                if len(blob) > config.memory_budget * raw_bytes[-1]:
                    raise StorageBudgetExceeded(
                        f"class {k}: memory is {len(blob)} bytes, budget {config.memory_budget:.2%} of {raw_bytes[-1]}"
                    )
                memory_files.append(blob)
                if workdir is not None:
                    p = Path(workdir) / "memories" / f"class_{k}.rcm"
                    p.parent.mkdir(parents=True, exist_ok=True)
                    p.write_bytes(blob)
                task_info["memory_sha"] = hashlib.sha256(blob).hexdigest()[:16]
                task_info["mask_perturbed"] = mask_info["perturbed"]
                task_info["compress_probe"] = [round(mem.meta["probe_start"], 4), round(mem.meta["probe_end"], 4)]

        # from here on only the new class's raw data and stored memories exist
        train_images = [stack_images(store.read(k, "detector", gamma))]
        if use_memory and gamma > 0:
            with _stage("replay", gamma, k, timings):
                memories = [memory_from_bytes(b, codec) for b in memory_files[:gamma]]
                buf = build_replay_buffer(
                    memories,
                    config.per_class_replay,
                    denoiser,
                    codec,
                    schedule,
                    config.augment,
                    seed=derive_seed(config.seed, 23),
                    shuffle_seed=derive_seed(config.seed, gamma, 29),
                    steps=config.replay_steps,
                    cache=replay_cache,
                )
                train_images.append(buf.images())
                task_info["replay"] = {"per_class": buf.class_histogram(), "sets": [s["memory_hash"] for s in buf.manifest["sets"]]}
        store.open_class(None)

        with _stage("detector", gamma, k, timings):
            init = det if config.detector_mode == "warm_start" else None
            dcfg = DetectorTrainConfig(
                steps=config.detector_steps,
                lr=config.detector_lr,
                seed=derive_seed(config.seed, gamma, 31),
                min_improvement=config.min_improvement,
            )
            det = train_detector(np.concatenate(train_images), init, dcfg, config.detector)
            task_info["detector_probe"] = [round(det.train_log["probe_start"], 5), round(det.train_log["probe_end"], 5)]
            task_info["encoder_checksum"] = encoder_checksum(det)

        with _stage("evaluate", gamma, k, timings):
            for i in range(gamma + 1):
                a, p = evaluate(det, bench.test[order[i]])
                auroc.set(gamma, i, a)
                ap.set(gamma, i, p)
        manifest["tasks"].append(task_info)
        log.info("task %d (class %d): auroc row %s", gamma, k, np.round(auroc.a[gamma, : gamma + 1], 3))

    memories = [memory_from_bytes(b, codec) for b in memory_files]
    storage = storage_report(memories, raw_bytes[: len(memories)]) if memories else StorageTable([])
    return RunReport(config.to_dict(), order, auroc, ap, storage, manifest, timings, list(store.log))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

SWEEPS = ("K_sweep", "mask_noise", "class_order", "feature_mode")


def ablation_configs(base: RunConfig, sweep: str) -> List[Tuple[str, RunConfig]]:
    if sweep == "K_sweep":
        return [(f"K={k}", replace(base, K=k)) for k in (1, 2, 4, 8)]
    if sweep == "mask_noise":
        return [(d, replace(base, mask_degradation=d)) for d in MASK_DEGRADATIONS]
    if sweep == "class_order":
        out, seen, s = [], set(), 0
        while len(out) < 4:
            cfg = replace(base, class_order=None, order_seed=derive_seed(base.seed, 41, s))
            key = tuple(cfg.order())
            if key not in seen:
                seen.add(key)
                out.append((f"order={'-'.join(map(str, key))}", replace(cfg, class_order=key, order_seed=None)))
            s += 1
        return out
    if sweep == "feature_mode":
        return [
            ("T1", replace(base, feature_mode="none")),
            ("T2", replace(base, feature_mode="semantic_only")),
            ("T3", replace(base, feature_mode="spatial_only")),
            ("T4", replace(base, feature_mode="both")),
        ]
    raise ValueError(f"unknown sweep {sweep!r}; choose from {SWEEPS}")


def run_ablation_suite(base: RunConfig, sweep: str, **kwargs) -> List[RunReport]:
    reports = []
    for tag, cfg in ablation_configs(base, sweep):
        rep = run_protocol(cfg, **kwargs)
        rep.tag = tag
        reports.append(rep)
    return reports


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _matrix_csv(sm: ScoreMatrix, order: List[int]) -> str:
    lines = ["task," + ",".join(f"class_{k}" for k in order)]
    for g in range(sm.n):
        cells = ["" if np.isnan(v) else f"{v:.6f}" for v in sm.a[g]]
        lines.append(f"{g}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def summary_text(report: RunReport) -> str:
    s = report.summary()
    lines = [
        f"method: {report.config['method']}  features: {report.config['feature_mode']}  tag: {report.tag or '-'}",
        f"class order: {' '.join(map(str, report.order))}",
        "",
        f"{'metric':<12}{'Avg':>10}{'FM':>10}",
    ]
    for m in ("image_auroc", "pixel_ap"):
        lines.append(f"{m:<12}{100 * s[m]['avg']:>10.2f}{100 * s[m]['fm']:>10.2f}")
    if report.storage.rows:
        lines += ["", f"memory total: {report.storage.total_bytes} bytes ({100 * report.storage.ratio:.3f}% of raw float32 training data)"]
    return "\n".join(lines) + "\n"


def _heatmap(sm: ScoreMatrix, order: List[int], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3.4), dpi=100)
    im = ax.imshow(np.ma.masked_invalid(sm.a), vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(order)), [str(k) for k in order])
    ax.set_yticks(range(sm.n))
    ax.set_xlabel("class")
    ax.set_ylabel("after task")
    ax.set_title(sm.metric_name)
    for g in range(sm.n):
        for i in range(g + 1):
            ax.text(i, g, f"{100 * sm.a[g, i]:.0f}", ha="center", va="center", fontsize=7, color="w")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: RunReport, out_dir, figures: bool = True) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "image_auroc.csv": _matrix_csv(report.image_auroc, report.order),
        "pixel_ap.csv": _matrix_csv(report.pixel_ap, report.order),
        "summary.txt": summary_text(report),
        "summary.csv": "metric,avg,fm\n" + "".join(f"{m},{v['avg']:.6f},{v['fm']:.6f}\n" for m, v in report.summary().items()),
        "storage.csv": report.storage.to_csv(),
        "manifest.json": json.dumps({"config": report.config, "tag": report.tag, **report.manifest}, indent=1, sort_keys=True),
        "access_log.csv": "stage,task,class_id\n" + "".join(f"{s},{t},{k}\n" for s, t, k in report.access_log),
    }
    written = []
    for name, text in files.items():
        (out / name).write_text(text)
        written.append(out / name)
    # wall-clock numbers differ run to run, so they live apart from the report proper
    (out / "timings.json").write_text(json.dumps(report.timings, indent=1, sort_keys=True))
    if figures:
        for m in ("image_auroc", "pixel_ap"):
            _heatmap(getattr(report, m), report.order, out / f"{m}.png")
            written.append(out / f"{m}.png")
    return written


def load_report_summary(in_dir) -> dict:
    """Read back the Avg/FM table written by ``emit_report``."""
    rows = Path(in_dir, "summary.csv").read_text().strip().splitlines()[1:]
    return {m: {"avg": float(a), "fm": float(f)} for m, a, f in (r.split(",") for r in rows)}
