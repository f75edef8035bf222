"""Command-line entry point: ``rcad <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("rcad")


def _set_threads() -> None:
    import torch

    n = os.environ.get("RCAD_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def to_toml(d: dict, prefix: str = "") -> str:
    """Minimal TOML writer for nested dicts of scalars and lists (None is dropped)."""
    flat = [f"{k} = {_toml_value(v)}" for k, v in d.items() if v is not None and not isinstance(v, dict)]
    out = "\n".join(flat)
    for k, v in d.items():
        if isinstance(v, dict):
            name = f"{prefix}{k}"
            out += f"\n\n[{name}]\n" + to_toml(v, name + ".").rstrip("\n")
    return out.strip() + "\n"


def load_run_config(path):
    import tomli

    from .harness import RunConfig

    with open(path, "rb") as fh:
        return RunConfig.from_dict(tomli.load(fh))


def _images_and_masks(data_dir, classes=None):
    from .io import load_dataset

    data = load_dataset(data_dir, splits=("train",), classes=classes)
    return {k: (np.stack([s.image for s in v["train"]]), np.stack([s.object_mask for s in v["train"]])) for k, v in data.items()}


def cmd_gen_data(args):
    from .data import BenchmarkConfig, build_benchmark
    from .io import export_benchmark

    cfg = BenchmarkConfig(
        n_classes=args.n_classes,
        n_train_per_class=args.n_train,
        n_test_normal=args.n_test_normal,
        n_test_anom=args.n_test_anom,
        image_side=args.image_side,
        master_seed=args.seed,
    )
    export_benchmark(build_benchmark(cfg), args.out)
    print(f"wrote {cfg.n_classes} classes to {args.out}")


def cmd_pretrain(args):
    from . import checkpoint
    from .backbone import PretrainConfig, pretrain_denoiser
    from .diffusion import make_schedule
    from .harness import default_codec

    data = _images_and_masks(args.data)
    model = pretrain_denoiser(data, default_codec(), make_schedule(args.T), PretrainConfig(steps=args.steps, seed=args.seed, min_improvement=args.min_improvement))
    checkpoint.save(model, args.out)
    print(json.dumps(model.train_log))


def cmd_compress(args):
    from . import checkpoint
    from .diffusion import make_schedule
    from .harness import default_codec
    from .memory import CompressConfig, memory_footprint, save_memory, compress_class

    images, masks = _images_and_masks(args.input, classes=[args.class_id])[args.class_id]
    cfg = CompressConfig(
        K=args.K,
        steps=args.steps,
        seed=args.seed,
        prompt_seed=args.prompt_seed,
        optimizer=args.optimizer,
        n_mask=args.n_mask,
        use_semantic=not args.no_semantic,
        use_spatial=not args.no_spatial,
        min_improvement=args.min_improvement,
    )
    den = checkpoint.load(args.denoiser)
    mem = compress_class(images, masks, den, default_codec(), make_schedule(args.T), cfg, class_id=args.class_id)
    save_memory(mem, args.out)
    print(json.dumps(memory_footprint(mem)))


def cmd_replay(args):
    from . import checkpoint
    from .diffusion import make_schedule
    from .io import write_dataset
    from .memory import load_memory
    from .replay import replay_class
    from .harness import default_codec

    codec = default_codec()
    mem = load_memory(args.memory, codec)
    den = checkpoint.load(args.denoiser)
    rs = replay_class(mem, args.n, den, codec, make_schedule(args.T), seed=args.seed, steps=args.steps)
    write_dataset(args.out, {mem.class_id: {"train": rs.samples}}, {"replay": rs.manifest})
    print(f"wrote {len(rs.samples)} samples of class {mem.class_id} to {args.out}")


def cmd_train(args):
    from . import checkpoint
    from .detector import DetectorTrainConfig, train_detector
    from .io import load_dataset

    images = []
    for d in args.data.split(","):
        for split in load_dataset(d, splits=("train",)).values():
            images += [s.image for s in split["train"]]
    init = checkpoint.load(args.init) if args.init else None
    det = train_detector(np.stack(images), init, DetectorTrainConfig(steps=args.steps, seed=args.seed, min_improvement=args.min_improvement))
    checkpoint.save(det, args.out)
    print(json.dumps(det.train_log))


def cmd_eval(args):
    from . import checkpoint
    from .detector import score_images
    from .io import load_dataset
    from .metrics import image_auroc, pixel_ap

    det = checkpoint.load(args.ckpt)
    out = Path(args.out)
    map_dir = out.with_suffix("").parent / (out.stem + "_maps")
    map_dir.mkdir(parents=True, exist_ok=True)
    rows = ["sample_id,class_id,is_anomalous,image_score,path_to_map"]
    for k, splits in sorted(load_dataset(args.data, splits=("test",)).items()):
        test = splits["test"]
        maps, scores = score_images(np.stack([s.image for s in test]), det)
        for i, (s, m, sc) in enumerate(zip(test, maps, scores)):
            p = map_dir / f"class_{k}_{i:04d}.npy"
            np.save(p, m.astype(np.float32))
            rows.append(f"{k}/{i:04d},{k},{int(s.is_anomalous)},{sc:.8g},{p}")
        labels = [int(s.is_anomalous) for s in test]
        print(f"class {k}: image AUROC {image_auroc(scores, labels):.4f}  pixel AP {pixel_ap(list(maps), [s.anomaly_gt for s in test]):.4f}")
    out.write_text("\n".join(rows) + "\n")


def cmd_run(args):
    from .harness import RunConfig, emit_report, run_protocol, summary_text

    if args.print_config:
        print(to_toml(RunConfig().to_dict()), end="")
        return
    cfg = load_run_config(args.config) if args.config else RunConfig()
    rep = run_protocol(cfg, workdir=Path(args.out), cache_dir=Path(args.cache) if args.cache else None)
    emit_report(rep, args.out)
    print(summary_text(rep), end="")


def cmd_ablate(args):
    from .harness import RunConfig, emit_report, run_ablation_suite, summary_text

    suite = {"k": "K_sweep", "mask": "mask_noise", "order": "class_order", "features": "feature_mode"}[args.suite]
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cache = Path(args.cache) if args.cache else Path(args.out) / "cache"
    shared: dict = {}
    for rep in run_ablation_suite(cfg, suite, cache_dir=cache, replay_cache=shared):
        d = Path(args.out) / rep.tag.replace("=", "_")
        emit_report(rep, d)
        print(summary_text(rep))


def cmd_report(args):
    from .harness import load_report_summary

    root = Path(args.input)
    dirs = [root] if (root / "summary.csv").exists() else sorted(p.parent for p in root.glob("*/summary.csv"))
    if not dirs:
        raise SystemExit(f"no reports under {root}")
    lines = ["run,image_auroc_avg,image_auroc_fm,pixel_ap_avg,pixel_ap_fm"]
    for d in dirs:
        s = load_report_summary(d)
        lines.append(f"{d.name},{s['image_auroc']['avg']:.4f},{s['image_auroc']['fm']:.4f},{s['pixel_ap']['avg']:.4f},{s['pixel_ap']['fm']:.4f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(text)


def build_parser() -> argparse.ArgumentParser:
    from .harness import RunConfig

    p = argparse.ArgumentParser(prog="rcad", description="Generative replay for continual anomaly detection on a synthetic benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic benchmark to PNGs plus a manifest")
    g.add_argument("--n-classes", type=int, default=5)
    g.add_argument("--image-side", type=int, default=64, choices=(32, 64, 128))
    g.add_argument("--n-train", type=int, default=64)
    g.add_argument("--n-test-normal", type=int, default=16)
    g.add_argument("--n-test-anom", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="phase-A backbone training on a dataset directory")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=3000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--T", type=int, default=200)
    g.add_argument("--min-improvement", type=float, default=0.5, help="required relative drop of the probe loss")
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("compress", help="compress one class into a memory file")
    g.add_argument("--class", dest="class_id", type=int, required=True)
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--denoiser", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--K", type=int, default=8)
    g.add_argument("--steps", type=int, default=400)
    g.add_argument("--optimizer", default="sgd", choices=("sgd", "adam"))
    g.add_argument("--n-mask", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prompt-seed", type=int, default=0)
    g.add_argument("--T", type=int, default=200)
    g.add_argument("--min-improvement", type=float, default=0.3, help="required relative drop of the probe loss")
    feat = g.add_mutually_exclusive_group()
    feat.add_argument("--no-spatial", action="store_true")
    feat.add_argument("--no-semantic", action="store_true")
    g.set_defaults(func=cmd_compress)

    g = sub.add_parser("replay", help="generate samples from a memory file")
    g.add_argument("--memory", required=True)
    g.add_argument("--denoiser", required=True)
    g.add_argument("--n", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=None)
    g.add_argument("--T", type=int, default=200)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_replay)

    g = sub.add_parser("train", help="train or fine-tune the detector")
    g.add_argument("--data", required=True, help="comma-separated dataset directories")
    g.add_argument("--init", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-improvement", type=float, default=0.3, help="required relative drop of the probe loss")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="score a dataset's test split")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_eval)

    defaults = to_toml(RunConfig().to_dict())
    g = sub.add_parser(
        "run",
        help="run the full sequential protocol",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys and defaults (TOML):\n\n" + defaults,
    )
    g.add_argument("--config", default=None, help="TOML file with RunConfig fields")
    g.add_argument("--out", default="run_out")
    g.add_argument("--cache", default=None, help="directory for reusable backbone checkpoints")
    g.add_argument("--print-config", action="store_true", help="print the default config as TOML and exit")
    g.set_defaults(func=cmd_run)

    g = sub.add_parser("ablate", help="run an ablation sweep")
    g.add_argument("--suite", required=True, choices=("k", "mask", "order", "features"))
    g.add_argument("--config", default=None)
    g.add_argument("--out", default="ablate_out")
    g.add_argument("--cache", default=None)
    g.set_defaults(func=cmd_ablate)

    g = sub.add_parser("report", help="tabulate Avg/FM of one or more report directories")
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--csv", default=None)
    g.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
