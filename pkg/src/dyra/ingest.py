"""COCO-style annotation parsing and box-size statistics."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import S_AP_LARGE, S_AP_SMALL, BalanceState

log = logging.getLogger(__name__)

MAX_ANNOTATIONS = 10_000_000


class AnnotationParseError(ValueError):
    def __init__(self, message, offset=None):
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")
        self.offset = offset


@dataclass
class Annotation:
    id: int
    image_id: int
    bbox: tuple  # x, y, w, h in pixels, clamped to the image
    category_id: object = None

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]


@dataclass
class AnnotationSet:
    images: dict  # image_id -> (width, height)
    annotations: list
    warnings: list = field(default_factory=list)
    clamped: int = 0

    @property
    def n_warnings(self) -> int:
        return len(self.warnings)

    def areas(self) -> np.ndarray:
        return np.array([a.area for a in self.annotations], dtype=np.float64)

    def to_coco(self) -> dict:
        return {
            "images": [{"id": k, "width": w, "height": h} for k, (w, h) in sorted(self.images.items())],
            "annotations": [
                {"id": a.id, "image_id": a.image_id, "bbox": list(a.bbox), "category_id": a.category_id}
                for a in self.annotations
            ],
        }


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ValueError(f"not a finite number: {v!r}")
    return v


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def parse_document(doc, max_annotations=MAX_ANNOTATIONS) -> AnnotationSet:
    if not isinstance(doc, dict):
        raise AnnotationParseError("top level must be a JSON object")
    for key in ("images", "annotations"):
        if key not in doc:
            raise AnnotationParseError(f"missing top-level key {key!r}")
        if not isinstance(doc[key], list):
            raise AnnotationParseError(f"top-level key {key!r} must be an array")
    if len(doc["annotations"]) > max_annotations:
        raise AnnotationParseError(
            f"annotation count {len(doc['annotations'])} exceeds limit {max_annotations}")
    warnings = []
    images = {}
    for i, im in enumerate(doc["images"]):
        try:
            iid = im["id"]
            w, h = _num(im["width"]), _num(im["height"])
            if w <= 0 or h <= 0:
                raise ValueError("non-positive image size")
        except KeyError as exc:
            warnings.append(f"images[{i}]: missing key {exc}")
            continue
        except (TypeError, ValueError) as exc:
            warnings.append(f"images[{i}]: {exc}")
            continue
        images[iid] = (w, h)
    anns = []
    clamped = 0
    for i, a in enumerate(doc["annotations"]):
        try:
            iid = a["image_id"]
            if iid not in images:
                raise ValueError(f"unknown image_id {iid!r}")
            bbox = a["bbox"]
            if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
                raise ValueError("bbox must have four entries")
            x, y, w, h = (float(_num(v)) for v in bbox)
            if w <= 0 or h <= 0:
                raise ValueError("non-positive box size")
            W, H = images[iid]
            x0, y0 = max(0.0, x), max(0.0, y)
            x1, y1 = min(float(W), x + w), min(float(H), y + h)
            if x1 <= x0 or y1 <= y0:
                raise ValueError("zero area after clamping to the image")
            if (x0, y0, x1, y1) != (x, y, x + w, y + h):
                clamped += 1
            ann_id = a.get("id", i)
        except KeyError as exc:
            warnings.append(f"annotations[{i}]: missing key {exc}")
            continue
        except (TypeError, ValueError) as exc:
            warnings.append(f"annotations[{i}]: {exc}")
            continue
        anns.append(Annotation(ann_id, iid, (x0, y0, x1 - x0, y1 - y0), a.get("category_id")))
    anns.sort(key=lambda a: (a.image_id, a.id))
    for w in warnings:
        log.warning("skipped %s", w)
    return AnnotationSet(images, anns, warnings, clamped)


def parse_annotations(path, max_annotations=MAX_ANNOTATIONS) -> AnnotationSet:
    """Read a COCO-schema JSON file; malformed records are skipped and counted."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise AnnotationParseError(f"cannot read {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise AnnotationParseError("file is not UTF-8", exc.start) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"invalid JSON: {exc.msg}", _byte_offset(text, exc.pos)) from exc
    return parse_document(doc, max_annotations)


def log_bins(areas, n_bins=20):
    lo = max(1.0, float(np.min(areas)))
    hi = max(lo * 2.0, float(np.max(areas)))
    return np.geomspace(lo, hi * (1 + 1e-9), n_bins + 1)


def dataset_stats(aset: AnnotationSet, state: BalanceState, n_bins=20) -> dict:
    if not aset.annotations:
        raise ValueError("no usable annotations")
    areas = aset.areas()
    split = state.split_area()
    per_image = {}
    for a in aset.annotations:
        per_image.setdefault(a.image_id, []).append(a.area)
    edges = log_bins(areas, n_bins)
    counts, _ = np.histogram(areas, bins=edges)
    n = areas.size
    up = int(np.sum(areas < split))
    return {
        "n_images": len(aset.images),
        "n_images_with_boxes": len(per_image),
        "n_boxes": int(n),
        "n_warnings": aset.n_warnings,
        "n_clamped": aset.clamped,
        "gamma": state.gamma,
        "split_area": split,
        "fraction_up": up / n,
        "fraction_down": (n - up) / n,
        "fraction_small": float(np.mean(areas < S_AP_SMALL)),
        "fraction_large": float(np.mean(areas > S_AP_LARGE)),
        "mean_area": float(areas.mean()),
        "per_image_mean_area": {str(k): float(np.mean(v)) for k, v in sorted(per_image.items())},
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }


def histogram_csv(stats: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    e = stats["histogram"]["edges"]
    for lo, hi, c in zip(e[:-1], e[1:], stats["histogram"]["counts"]):
        w.writerow([repr(lo), repr(hi), c])
    return buf.getvalue()
