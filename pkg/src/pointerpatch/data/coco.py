"""COCO-format annotation files: reading into ``Sample`` and writing generated datasets."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .shapes import SHAPES, Sample


class CocoFormatError(ValueError):
    pass


def _require(record, keys, where):
    if not isinstance(record, dict):
        raise CocoFormatError(f"{where}: expected an object, got {type(record).__name__}")
    for k in keys:
        if k not in record:
            raise CocoFormatError(f"{where}: missing '{k}'")


def ingest_coco_annotations(path, image_dir=None, load_images: bool = True) -> List[Sample]:
    """Parse a COCO annotation file into samples with normalized cxcywh boxes.

    Category ids are remapped densely in ascending id order; the mapping is kept in
    each sample's ``meta["categories"]``. Images are read from ``image_dir``
    (default: the annotation file's directory, then its ``images/`` subfolder)
    when they exist; otherwise ``Sample.image`` is None.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"{path}: not valid JSON ({exc})") from exc
    _require(doc, ("images", "annotations", "categories"), str(path))
    for i, c in enumerate(doc["categories"]):
        _require(c, ("id",), f"categories[{i}]")
    cat_ids = sorted(int(c["id"]) for c in doc["categories"])
    remap = {cid: k for k, cid in enumerate(cat_ids)}
    names = {int(c["id"]): c.get("name", str(c["id"])) for c in doc["categories"]}
    images = {}
    for i, im in enumerate(doc["images"]):
        _require(im, ("id", "width", "height"), f"images[{i}]")
        images[im["id"]] = im
    per_image = {im_id: [] for im_id in images}
    for i, ann in enumerate(doc["annotations"]):
        _require(ann, ("image_id", "category_id", "bbox"), f"annotations[{i}]")
        if ann["image_id"] not in images:
            raise CocoFormatError(f"annotations[{i}]: unknown image_id {ann['image_id']}")
        if int(ann["category_id"]) not in remap:
            raise CocoFormatError(f"annotations[{i}]: unknown category_id {ann['category_id']}")
        bbox = ann["bbox"]
        if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
            raise CocoFormatError(f"annotations[{i}]: bbox must be [x, y, w, h]")
        per_image[ann["image_id"]].append(ann)

    roots = [Path(image_dir)] if image_dir is not None else [path.parent, path.parent / "images"]
    samples = []
    for im_id, im in images.items():
        W, H = float(im["width"]), float(im["height"])
        boxes, labels = [], []
        for ann in per_image[im_id]:
            x, y, w, h = (float(v) for v in ann["bbox"])
            boxes.append([(x + w / 2) / W, (y + h / 2) / H, w / W, h / H])
            labels.append(remap[int(ann["category_id"])])
        image = None
        if load_images and "file_name" in im:
            for root in roots:
                f = root / im["file_name"]
                if f.exists():
                    image = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255
                    break
        samples.append(Sample(image, np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
                              np.asarray(labels, dtype=np.int64),
                              meta={"image_id": im_id, "file_name": im.get("file_name"),
                                    "categories": [names[c] for c in cat_ids]}))
    return samples


def save_dataset(samples: Sequence[Sample], out_dir, class_names: Optional[Sequence[str]] = None):
    """Write ``images/*.png`` plus ``annotations.json`` (COCO format, pixel xywh boxes)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    class_names = list(class_names or SHAPES)
    doc = {"images": [], "annotations": [],
           "categories": [{"id": k + 1, "name": n} for k, n in enumerate(class_names)]}
    ann_id = 1
    for i, s in enumerate(samples):
        _, H, W = s.image.shape
        name = f"{i:06d}.png"
        pixels = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(pixels).save(out / "images" / name)
        doc["images"].append({"id": i + 1, "file_name": name, "width": W, "height": H})
        for box, label in zip(s.boxes, s.labels):
            cx, cy, w, h = (float(v) for v in box)
            doc["annotations"].append({
                "id": ann_id, "image_id": i + 1, "category_id": int(label) + 1,
                "bbox": [(cx - w / 2) * W, (cy - h / 2) * H, w * W, h * H],
                "area": w * W * h * H, "iscrowd": 0})
            ann_id += 1
    tmp = out / "annotations.json.tmp"
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, out / "annotations.json")
    return out / "annotations.json"
