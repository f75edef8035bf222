"""On-disk dataset format.

::

    DIR/manifest.json
    DIR/class_<k>/train/<i>.png     8-bit RGB
    DIR/class_<k>/test/<i>.png
    DIR/class_<k>/test_gt/<i>.png   8-bit 0/255 anomaly ground truth
    DIR/class_<k>/masks/<split>_<i>.png   8-bit 0/255 object masks

The manifest lists every file and is the only source of split membership.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .data import Benchmark, ClassSpec, Sample

MANIFEST = "manifest.json"
FORMAT = "rcad-dataset/1"


def _save_rgb(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8), "RGB").save(path)


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask).astype(np.uint8) * 255, "L").save(path)


def _load_rgb(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128


def write_dataset(out_dir, splits: Dict[int, Dict[str, List[Sample]]], meta: Optional[dict] = None) -> Path:
    """Write ``{class_id: {"train": [...], "test": [...]}}`` plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = {}
    for k in sorted(splits):
        root = out / f"class_{k}"
        entries = {}
        for split, samples in splits[k].items():
            (root / split).mkdir(parents=True, exist_ok=True)
            (root / "masks").mkdir(parents=True, exist_ok=True)
            if split == "test":
                (root / "test_gt").mkdir(parents=True, exist_ok=True)
            rows = []
            for i, s in enumerate(samples):
                name = f"{i:04d}.png"
                _save_rgb(root / split / name, s.image)
                _save_mask(root / "masks" / f"{split}_{name}", s.object_mask)
                row = {"image": f"class_{k}/{split}/{name}", "mask": f"class_{k}/masks/{split}_{name}", "is_anomalous": bool(s.is_anomalous)}
                if split == "test":
                    _save_mask(root / "test_gt" / name, s.anomaly_gt)
                    row["gt"] = f"class_{k}/test_gt/{name}"
                if s.anomaly_kind:
                    row["anomaly_kind"] = s.anomaly_kind
                rows.append(row)
            entries[split] = rows
        classes[str(k)] = entries
    manifest = {"format": FORMAT, "classes": classes, "meta": meta or {}}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def export_benchmark(bench: Benchmark, out_dir) -> Path:
    meta = {
        "master_seed": bench.master_seed,
        "image_side": bench.image_side,
        "counts": {str(k): {"train": len(bench.train[k]), "test": len(bench.test[k])} for k in bench.train},
        "specs": {str(s.class_id): s.to_dict() for s in bench.classes},
    }
    return write_dataset(out_dir, {k: {"train": bench.train[k], "test": bench.test[k]} for k in sorted(bench.train)}, meta)


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"{data_dir} has no {MANIFEST}; refusing to guess split membership")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    return manifest


def load_dataset(data_dir, splits=("train", "test"), classes=None) -> Dict[int, Dict[str, List[Sample]]]:
    root = Path(data_dir)
    manifest = read_manifest(root)
    out: Dict[int, Dict[str, List[Sample]]] = {}
    for key, entries in manifest["classes"].items():
        k = int(key)
        if classes is not None and k not in classes:
            continue
        out[k] = {}
        for split in splits:
            samples = []
            for row in entries.get(split, []):
                image = _load_rgb(root / row["image"])
                mask = _load_mask(root / row["mask"])
                gt = _load_mask(root / row["gt"]) if "gt" in row else np.zeros(mask.shape, bool)
                samples.append(
                    Sample(image=image, object_mask=mask, class_id=k, is_anomalous=row["is_anomalous"], anomaly_gt=gt, anomaly_kind=row.get("anomaly_kind"))
                )
            out[k][split] = samples
    return out


def class_specs(data_dir) -> Dict[int, ClassSpec]:
    specs = read_manifest(data_dir)["meta"].get("specs", {})
    return {int(k): ClassSpec.from_dict(v) for k, v in specs.items()}
