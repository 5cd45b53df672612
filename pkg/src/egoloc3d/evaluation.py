"""Recognition accuracy and heatmap localization metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .location_prior import CameraTrack, LocationDistribution, as_location, downsample_distribution, make_prior

DEFAULT_FACTORS = (4, 4, 2)


def recognition_metrics(preds: Sequence[int], labels: Sequence[int], n_classes: int):
    """Returns ``(mean_class_acc, top1_acc, per_class)``.

    ``per_class`` maps each class present in ``labels`` to its accuracy;
    absent classes are left out of the mean.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(preds) != len(labels):
        raise ValueError("preds and labels differ in length")
    if len(labels) == 0:
        raise ValueError("empty input")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    correct = preds == labels
    per_class = {}
    for c in range(n_classes):
        mask = labels == c
        if mask.any():
            per_class[c] = float(correct[mask].mean())
    return float(np.mean(list(per_class.values()))), float(correct.mean()), per_class


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def binarize(d: LocationDistribution, tau: float) -> np.ndarray:
    return d.probs > tau


def localization_metrics(pred, gt, factors=DEFAULT_FACTORS, tau: Optional[float] = None):
    """Precision, recall and F1 of the above-``tau`` cells after sum-pooling.

    ``tau`` defaults to the uniform density of the pooled grid.
    """
    pred, gt = as_location(pred), as_location(gt)
    if pred.dims != gt.dims:
        raise ValueError(f"shape mismatch: {pred.dims} vs {gt.dims}")
    pd = downsample_distribution(pred, *factors)
    gd = downsample_distribution(gt, *factors)
    if tau is None:
        tau = 1.0 / pd.probs.size
    a, b = binarize(pd, tau), binarize(gd, tau)
    inter = int(np.sum(a & b))
    P = inter / a.sum() if a.any() else 0.0
    R = inter / b.sum() if b.any() else 0.0
    return float(P), float(R), f1_score(P, R)


@dataclass
class EvalReport:
    mean_class_acc: float
    top1_acc: float
    loc_precision: float
    loc_recall: float
    loc_f1: float
    per_class: Dict[int, float]
    n_episodes: int
    n_classes: int
    rows: List[Tuple[int, int, int, int]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "mean_class_acc": self.mean_class_acc,
            "top1_acc": self.top1_acc,
            "loc_precision": self.loc_precision,
            "loc_recall": self.loc_recall,
            "loc_f1": self.loc_f1,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "n_episodes": self.n_episodes,
            "n_classes": self.n_classes,
        }

    def to_text(self) -> str:
        lines = [f"{k} = {v!r}" for k, v in self.to_dict().items() if k != "per_class"]
        lines += [f"class_{k}_acc = {v!r}" for k, v in sorted(self.per_class.items())]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def predictions_csv(self) -> str:
        out = ["episode,label,pred,top_voxel"]
        out += [f"{i},{y},{p},{v}" for i, y, p, v in self.rows]
        return "\n".join(out) + "\n"


def ground_truth_location(clip, grid, sigma: float = 1.0) -> LocationDistribution:
    """Evaluation target: the smoothed true position, else the clip's prior."""
    if getattr(clip, "true_position", None) is not None and grid is not None:
        return make_prior(CameraTrack([(0, tuple(clip.true_position))]), grid, sigma)
    return clip.prior


def evaluate(model, episodes, env=None, *, grid=None, factors=DEFAULT_FACTORS,
             tau: Optional[float] = None, sigma: float = 1.0, n_jobs: int = 1) -> EvalReport:
    """Run deterministic inference over ``episodes`` and score it.

    ``model`` is a fitted ``JointActionLocalizer``. Ground-truth heatmaps live on
    the parent ``grid`` and are pooled to the model's location grid first.
    Precision and recall are averaged over episodes; F1 is computed from those
    averages.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes to evaluate")
    obs = np.stack([ep.obs for ep in episodes])
    labels = np.array([ep.label for ep in episodes])
    preds, _, locs = model.predict_all(obs, env=env, n_jobs=n_jobs)
    pool = tuple(model.config_.pool)
    if any(f % p for f, p in zip(factors, pool)):
        raise ValueError(f"factors {tuple(factors)} are not multiples of the model pool {pool}")
    loc_factors = tuple(f // p for f, p in zip(factors, pool))
    mca, top1, per_class = recognition_metrics(preds, labels, model.n_classes_)
    pr = []
    rows = []
    for i, (ep, loc) in enumerate(zip(episodes, locs)):
        gt = ground_truth_location(ep, grid, sigma)
        if gt.dims != loc.dims:
            gt = downsample_distribution(gt, *pool)
        P, R, _ = localization_metrics(loc, gt, loc_factors, tau)
        pr.append((P, R))
        top = int(np.argmax(loc.probs))
        rows.append((i, int(ep.label), int(preds[i]), top))
    P, R = (float(v) for v in np.mean(pr, axis=0))
    return EvalReport(mca, top1, P, R, f1_score(P, R), per_class, len(episodes),
                      model.n_classes_, rows)
