"""
Second stage of the two-stage inspection: read detector boxes, crop the disks
out of an aerial image, score every crop with a trained one-class network and
write a per-image inspection report with heatmaps.

Box files hold one detection per line: "class cx cy w h conf", all values but
the class normalized to [0, 1]. Class 1 is a disk; other classes are kept in
the report as non-croppable.
"""
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import preprocess_image, read_image
from .heatmap import Heatmap, default_sigma, export_heatmap, gaussian_upsample, huber_map, image_score
from .helpers import write_json
from .model import Network, forward, load_checkpoint, receptive_field
from .validation import validate_box_fields

logger = logging.getLogger(__name__)

DISK_CLASS = 1


@dataclass(frozen=True)
class BoundingBox:
    class_id: int
    cx: float
    cy: float
    bw: float
    bh: float
    confidence: float
    line_no: int = 0

    @property
    def croppable(self) -> bool:
        return self.class_id == DISK_CLASS

    def pixel_rect(self, width: int, height: int) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1), half-open, rounded to the nearest pixel edge and clamped to the image."""
        def edge(v: float, limit: int) -> int:
            return min(max(math.floor(v + 0.5), 0), limit)

        x0 = edge(self.cx * width - self.bw * width / 2, width)
        x1 = edge(self.cx * width + self.bw * width / 2, width)
        y0 = edge(self.cy * height - self.bh * height / 2, height)
        y1 = edge(self.cy * height + self.bh * height / 2, height)
        return x0, y0, x1, y1


def parse_boxes(text: str) -> list[BoundingBox]:
    boxes = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        ok, msg = validate_box_fields(fields)
        if not ok:
            raise ValueError(f"line {line_no}: {msg}")
        cx, cy, bw, bh, conf = (float(v) for v in fields[1:])
        boxes.append(BoundingBox(int(fields[0]), cx, cy, bw, bh, conf, line_no))
    return boxes


@dataclass
class DiskCrop:
    index: int
    box: BoundingBox
    rect: tuple[int, int, int, int]
    pixels: np.ndarray  # (c, h, w) in [0, 1]
    input: Optional[np.ndarray] = None  # (1, c, H, W) ready for the network


def crop_disks(image: np.ndarray, boxes: Sequence[BoundingBox], mean: Optional[np.ndarray] = None,
               std: Optional[np.ndarray] = None, target_shape: Optional[Sequence[int]] = None
               ) -> tuple[list[DiskCrop], list[dict]]:
    """Axis-aligned crops of the disk boxes, clamped to the image.

    With mean, std and target_shape the crops are also preprocessed for the model.
    Returns the crops and one warning entry per box that was skipped.
    """
    _, height, width = image.shape
    crops, skipped = [], []
    for k, box in enumerate(boxes):
        if not box.croppable:
            skipped.append({"index": k, "line": box.line_no, "class_id": box.class_id,
                            "reason": f"class {box.class_id} is not a disk"})
            continue
        x0, y0, x1, y1 = box.pixel_rect(width, height)
        if x1 <= x0 or y1 <= y0:
            logger.warning("box on line %d has zero area inside the %dx%d image", box.line_no, width, height)
            skipped.append({"index": k, "line": box.line_no, "class_id": box.class_id,
                            "reason": "zero area after clamping to the image"})
            continue
        pixels = image[:, y0:y1, x0:x1].copy()
        net_input = None
        if target_shape is not None:
            c = pixels.shape[0]
            net_input = preprocess_image(pixels, np.zeros(c) if mean is None else mean,
                                         np.ones(c) if std is None else std, target_shape)
        crops.append(DiskCrop(k, box, (x0, y0, x1, y1), pixels, net_input))
    return crops, skipped


@dataclass
class DiskVerdict:
    index: int
    box: dict
    rect: list[int]
    score: float
    anomalous: bool
    heatmap: Optional[str] = None


@dataclass
class InspectionReport:
    image_id: str
    threshold: float
    threshold_source: str
    disks: list[DiskVerdict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    generated_at: str = ""

    @property
    def summary(self) -> dict:
        anomalous = sum(1 for d in self.disks if d.anomalous)
        return {"disks": len(self.disks), "anomalous": anomalous, "normal": len(self.disks) - anomalous,
                "skipped": len(self.skipped)}

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "threshold": self.threshold,
            "threshold_source": self.threshold_source,
            "disks": [asdict(d) for d in self.disks],
            "skipped": self.skipped,
            "summary": self.summary,
            "generated_at": self.generated_at,
        }


def threshold_from_report(path: str, instance: int = 0) -> tuple[float, str]:
    """Optimal threshold of one instance in a saved evaluation report, and its provenance."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            report = json.load(f)
    except OSError as e:
        raise OSError(f"cannot read evaluation report {path}: {e}") from e
    instances = report.get("instances", [])
    if not 0 <= instance < len(instances):
        raise ValueError(f"{path}: no instance {instance} (report has {len(instances)})")
    value = float(instances[instance]["threshold"])
    if not math.isfinite(value):
        raise ValueError(f"{path}: instance {instance} has a non-finite threshold")
    return value, f"eval:{path}#{instance}"


def score_crops(net: Network, crops: Sequence[DiskCrop], sigma: Optional[float] = None,
                image_id: str = "") -> list[Heatmap]:
    rf = receptive_field(net.config)
    sigma = sigma if sigma is not None else default_sigma(rf)
    heatmaps = []
    for crop in crops:
        z, _ = forward(net, crop.input, "eval")
        heatmaps.append(gaussian_upsample(huber_map(z), rf, sigma, net.input_shape[1:],
                                          model_id=str(net.config.seed), sample_id=f"{image_id}#{crop.index}"))
    return heatmaps


def _require_file(path: str, what: str) -> None:
    if not path or not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def inspect(image_path: str, boxes_path: str, checkpoint_path: str, threshold: float, out_dir: str,
            threshold_source: str = "user") -> InspectionReport:
    """Score every disk box of one image; writes <id>_inspection.json and per-disk heatmaps."""
    for path, what in ((image_path, "image"), (boxes_path, "box file"), (checkpoint_path, "checkpoint")):
        _require_file(path, what)
    if not math.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    net, extra = load_checkpoint(checkpoint_path)
    if not isinstance(net, Network):
        raise ValueError(f"{checkpoint_path}: inspection needs a one-class network checkpoint (heatmaps)")
    mean = np.asarray(extra.get("channel_mean", [0.0] * net.input_shape[0]))
    std = np.asarray(extra.get("channel_std", [1.0] * net.input_shape[0]))

    image = read_image(image_path)
    with open(boxes_path, "r", encoding="utf-8") as f:
        boxes = parse_boxes(f.read())
    image_id = os.path.splitext(os.path.basename(image_path))[0]
    crops, skipped = crop_disks(image, boxes, mean, std, net.input_shape)
    heatmaps = score_crops(net, crops, extra.get("sigma"), image_id)

    heatmap_dir = os.path.join(out_dir, "heatmaps")
    if crops:
        os.makedirs(heatmap_dir, exist_ok=True)
    report = InspectionReport(image_id, float(threshold), threshold_source, skipped=skipped,
                              generated_at=time.strftime("%Y-%m-%dT%H:%M:%S"))
    for crop, hm in zip(crops, heatmaps):
        stem = f"{image_id}_disk{crop.index:03d}"
        raw = os.path.join(heatmap_dir, stem + ".hmf")
        export_heatmap(hm, raw, os.path.join(heatmap_dir, stem + ".png"), os.path.join(heatmap_dir, stem + ".json"))
        score = image_score(hm)
        report.disks.append(DiskVerdict(crop.index, asdict(crop.box), list(crop.rect), score,
                                        bool(score >= threshold), os.path.relpath(raw, out_dir)))
    write_json(os.path.join(out_dir, f"{image_id}_inspection.json"), report.to_dict())
    logger.info("%s: %d disks, %d anomalous", image_id, report.summary["disks"], report.summary["anomalous"])
    return report
