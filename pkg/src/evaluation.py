"""
ROC construction, trapezoidal AUC, optimal-threshold selection, pixel-level
(GTMAP) AUC and the aggregation of several model instances into one report.

A sample is classified anomalous iff its score >= threshold; tied scores move
together, so every unique score yields exactly one ROC vertex.
"""
import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import DatasetSplit, stack_batch, stack_maps
from .heatmap import GaussianUpsampler, Heatmap, default_sigma, huber_map
from .helpers import write_json
from .model import Autoencoder, Network, ae_scores, forward, receptive_field
from .validation import CRITERIA

logger = logging.getLogger(__name__)

EVAL_CHUNK = 64


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending, +inf first
    tpr: np.ndarray
    fpr: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0])


def roc_curve(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs both classes present (AUC is undefined otherwise)")
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    return RocCurve(thresholds, tp / pos.size, fp / neg.size, tp, fp, neg.size - fp, pos.size - tp)


def auc(roc: RocCurve) -> float:
    """Trapezoidal integral of TPR over FPR."""
    dx = roc.fpr[1:] - roc.fpr[:-1]
    return float(np.sum(dx * (roc.tpr[1:] + roc.tpr[:-1]) / 2.0))


def roc_auc(scores, labels) -> float:
    return auc(roc_curve(scores, labels))


def optimal_threshold(roc: RocCurve, criterion: str = "distance") -> tuple[float, float]:
    """Vertex closest to the top-left point (FPR 0, TPR 1), or maximal Youden J.

    Ties go to the lower FPR, then the higher threshold. Returns (threshold, accuracy).
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {', '.join(CRITERIA)}")
    if criterion == "distance":
        cost = np.sqrt(roc.fpr ** 2 + (1.0 - roc.tpr) ** 2)
    else:
        cost = -(roc.tpr - roc.fpr)
    # lexsort: last key is primary
    best = np.lexsort((-roc.thresholds, roc.fpr, cost))[0]
    accuracy = (roc.tp[best] + roc.tn[best]) / roc.total
    return float(roc.thresholds[best]), float(accuracy)


def gtmap_auc(heatmaps: Sequence[Union[Heatmap, np.ndarray]], maps: Sequence[np.ndarray]) -> float:
    """AUC over all pixels of all samples pooled into one population."""
    if len(heatmaps) != len(maps):
        raise ValueError(f"{len(heatmaps)} heatmaps but {len(maps)} maps")
    scores, labels = [], []
    for k, (hm, m) in enumerate(zip(heatmaps, maps)):
        values = np.asarray(hm.values if isinstance(hm, Heatmap) else hm, dtype=np.float64)
        m = np.asarray(m)
        if values.size != m.size or values.shape[-2:] != m.shape[-2:]:
            raise ValueError(f"sample {k}: heatmap {values.shape} and map {m.shape} differ")
        scores.append(values.reshape(-1))
        labels.append(m.reshape(-1))
    if not scores:
        raise ValueError("no heatmaps given")
    return roc_auc(np.concatenate(scores), np.concatenate(labels))


# --- scoring functions ---

@dataclass
class Scores:
    scores: np.ndarray
    heatmaps: Optional[np.ndarray] = None  # (n, 1, h, w)


Scorer = Callable[[Union[Network, Autoencoder]], Scores]


def fcdd_scorer(split: DatasetSplit, sigma: Optional[float] = None, keep_heatmaps: bool = True) -> Scorer:
    """Image score = mean of the upsampled heatmap, over the test split."""

    def score(net: Network) -> Scores:
        x, _, _ = stack_batch(split.test, split, net.input_shape)
        rf = receptive_field(net.config)
        up = GaussianUpsampler(rf, sigma if sigma is not None else default_sigma(rf),
                               net.output_shape[1:], net.input_shape[1:])
        heatmaps = []
        for i in range(0, x.shape[0], EVAL_CHUNK):
            z, _ = forward(net, x[i:i + EVAL_CHUNK], "eval")
            heatmaps.append(up(huber_map(z)))
        hm = np.concatenate(heatmaps, axis=0)
        return Scores(hm.mean(axis=(1, 2, 3)), hm if keep_heatmaps else None)

    return score


def ae_scorer(split: DatasetSplit) -> Scorer:
    """Image score = mean squared reconstruction error."""

    def score(ae: Autoencoder) -> Scores:
        x, _, _ = stack_batch(split.test, split, ae.config.input_shape)
        return Scores(np.concatenate([ae_scores(ae, x[i:i + EVAL_CHUNK]) for i in range(0, x.shape[0], EVAL_CHUNK)]))

    return score


# --- reports ---

@dataclass
class InstanceResult:
    instance: int
    auc: float
    threshold: float
    accuracy: float
    scores: list[float]
    gtmap_auc: Optional[float] = None


@dataclass
class EvalReport:
    instances: list[InstanceResult]
    aggregate: dict
    sample_ids: list[str]
    labels: list[int]
    metadata: dict = field(default_factory=dict)
    generated_at: str = ""

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "aggregate": self.aggregate,
            "instances": [{k: _jsonable(v) for k, v in asdict(r).items() if k != "scores"} for r in self.instances],
            "generated_at": self.generated_at,
        }


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else "-inf" if v < 0 else "nan"
    return v


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def evaluate_experiment(models: Sequence, split: DatasetSplit, scoring_fn: Scorer,
                        metadata: Optional[dict] = None, criterion: str = "distance") -> EvalReport:
    """Score the test split with every model instance and aggregate AUC and optimal accuracy.

    GTMAP AUC is added when the scorer returns heatmaps and every test sample has a map
    with both pixel classes present overall.
    """
    if not models:
        raise ValueError("evaluate_experiment needs at least one model")
    labels = np.array([s.label for s in split.test])
    ids = [s.id for s in split.test]
    maps = None
    results = []
    for k, model in enumerate(models):
        out = scoring_fn(model)
        roc = roc_curve(out.scores, labels)
        threshold, accuracy = optimal_threshold(roc, criterion)
        gt = None
        if out.heatmaps is not None:
            if maps is None:
                maps = stack_maps(split.test, out.heatmaps.shape[2:])
            if np.all(maps >= 0) and maps.any() and not maps.all():
                gt = gtmap_auc(list(out.heatmaps), list(maps))
        results.append(InstanceResult(k, auc(roc), threshold, accuracy, [float(s) for s in out.scores], gt))
        logger.info("instance %d: AUC %.4f, accuracy %.4f at threshold %.6g", k, results[-1].auc, accuracy, threshold)

    aggregate = {}
    for key in ("auc", "accuracy", "gtmap_auc"):
        values = [getattr(r, key) for r in results]
        if any(v is None for v in values):
            continue
        aggregate[f"{key}_mean"], aggregate[f"{key}_std"] = mean_std(values)
    aggregate["n_instances"] = len(results)
    return EvalReport(results, aggregate, ids, [int(v) for v in labels], dict(metadata or {}),
                      time.strftime("%Y-%m-%dT%H:%M:%S"))


def save_report(path: str, report: EvalReport) -> None:
    write_json(path, report.to_dict())


def dump_scores(path: str, report: EvalReport, instance: int = 0) -> None:
    """CSV id,score,label for one instance; scores at full float precision."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "score", "label"])
        for sid, score, label in zip(report.sample_ids, report.instances[instance].scores, report.labels):
            writer.writerow([sid, repr(score), label])


def read_scores(path: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return ([r["id"] for r in rows], np.array([float(r["score"]) for r in rows]),
            np.array([int(r["label"]) for r in rows]))


def sample_heatmaps(net: Network, split: DatasetSplit, sigma: Optional[float] = None,
                  limit: Optional[int] = None) -> list[Heatmap]:
    """Upsampled heatmaps of the first `limit` test samples, for export."""
    samples = split.test[:limit]
    if not samples:
        return []
    rf = receptive_field(net.config)
    sigma = sigma if sigma is not None else default_sigma(rf)
    out = fcdd_scorer(replace(split, test=samples), sigma)(net)
    return [Heatmap(out.heatmaps[k:k + 1], str(net.config.seed), s.id, sigma) for k, s in enumerate(samples)]
