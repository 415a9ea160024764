"""Segmentation metrics and the single-query evaluation loop.

Each evaluation case is one (view, ground-truth mask, text query)
tuple; the harness runs the query pipeline per case, scores the
predicted mask, and reports unweighted means. Empty-vs-empty cases are
defined as perfect so the metrics are total functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .formats import ensure_parent, read_mask
from .osh import EmbeddingTable, OSHConfig
from .query import open_vocab_query
from .scene import Camera, load_camera
from .trainer import TrainedModel


def _check_shapes(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValidationError(
            f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check_shapes(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check_shapes(pred, gt)
    return float((pred == gt).sum() / pred.size)


def precision(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check_shapes(pred, gt)
    predicted = pred.sum()
    if predicted == 0:
        return 1.0 if gt.sum() == 0 else 0.0
    return float(np.logical_and(pred, gt).sum() / predicted)


@dataclass
class EvalCase:
    camera: Camera
    gt_mask: np.ndarray
    text: str
    pseudo_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.gt_mask.shape != (self.camera.height, self.camera.width):
            raise ValidationError(
                f"case {self.text!r}: gt mask shape {self.gt_mask.shape} "
                f"does not match camera")


@dataclass
class Metrics:
    per_case: list  # [{"text", "iou", "pa", "precision"}, ...]
    miou: float
    mpa: float
    mp: float

    def to_report(self) -> dict:
        rnd = lambda x: round(float(x), 4)
        return {
            "cases": [{"text": c["text"], "iou": rnd(c["iou"]),
                       "pa": rnd(c["pa"]), "precision": rnd(c["precision"])}
                      for c in self.per_case],
            "mIoU": rnd(self.miou), "mPA": rnd(self.mpa), "mP": rnd(self.mp),
        }


def load_testset(path) -> list[EvalCase]:
    path = Path(path)
    d = json.loads(path.read_text())
    cases = []
    for i, c in enumerate(d["cases"]):
        try:
            cam = load_camera(path.parent / c["camera"])
            gt = read_mask(path.parent / c["gt_mask"])
            pseudo = (read_mask(path.parent / c["pseudo_mask"])
                      if c.get("pseudo_mask") else None)
            cases.append(EvalCase(camera=cam, gt_mask=gt, text=c["text"],
                                  pseudo_mask=pseudo))
        except (OSError, KeyError) as e:
            raise ValidationError(f"test case {i} is unresolvable: {e}") from e
    return cases


def evaluate(model: TrainedModel, cases: list[EvalCase],
             embeddings: EmbeddingTable, *, use_osh: bool = True,
             threshold: float = 0.6,
             osh_cfg: OSHConfig | None = None) -> Metrics:
    if not cases:
        raise ValidationError("no evaluation cases")
    per_case = []
    for case in cases:
        emb = embeddings.lookup(case.text)
        result = open_vocab_query(
            model, case.camera, emb, case.pseudo_mask,
            use_osh=use_osh and case.pseudo_mask is not None,
            threshold=threshold, osh_cfg=osh_cfg)
        per_case.append({
            "text": case.text,
            "iou": iou(result.mask, case.gt_mask),
            "pa": pixel_accuracy(result.mask, case.gt_mask),
            "precision": precision(result.mask, case.gt_mask),
        })
    return Metrics(
        per_case=per_case,
        miou=float(np.mean([c["iou"] for c in per_case])),
        mpa=float(np.mean([c["pa"] for c in per_case])),
        mp=float(np.mean([c["precision"] for c in per_case])),
    )


def write_report(metrics: Metrics, path) -> None:
    ensure_parent(path)
    Path(path).write_text(json.dumps(metrics.to_report(), indent=1,
                                     sort_keys=True))
