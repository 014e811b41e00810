"""Image-level detection metrics

Thin wrappers around `sklearn.metrics` (AP, AUC, curves) plus thresholded
metrics (CA, F1, mAcc, FP, FN), split scoring and report writing.
"""
__all__ = [
    "UndefinedMetricError", "EvalReport", "ThresholdMetrics", "average_precision",
    "roc_auc", "threshold_metrics", "best_f1_threshold", "pr_curve", "roc_curve",
    "score_image", "score_split", "build_report", "evaluate_split", "write_report"]
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Tuple, Union

import numpy as np
import torch
from matplotlib import pyplot as plt
from sklearn import metrics
from tqdm.auto import tqdm

from .model import SegDecNet
from .utils import write_csv, write_manifest

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    if not len(scores):
        raise UndefinedMetricError("no samples")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    return scores, labels.astype(np.int64)


def average_precision(scores, labels) -> float:
    """
    Area under the step-interpolated precision-recall curve.
    Tied scores share the precision at the end of their group (pessimistic ranking).
    """
    scores, labels = _check(scores, labels)
    if not labels.any():
        raise UndefinedMetricError("average precision needs at least one positive")
    if labels.all():
        return 1.0
    return float(metrics.average_precision_score(labels, scores))


def roc_auc(scores, labels) -> float:
    """P(positive scores above negative), ties counted as 1/2"""
    scores, labels = _check(scores, labels)
    if labels.all() or not labels.any():
        raise UndefinedMetricError("ROC AUC needs both positives and negatives")
    return float(metrics.roc_auc_score(labels, scores))


class ThresholdMetrics(NamedTuple):
    CA: float
    F1: float
    mAcc: float
    FP: int
    FN: int


def threshold_metrics(scores, labels, threshold: float = 0.5) -> ThresholdMetrics:
    """
    Predict defective when `score >= threshold`.
    TPR is taken as 1 without positives, TNR as 1 without negatives,
    and F1 as 1 when there is nothing to detect and nothing detected.
    """
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    scores, labels = _check(scores, labels)
    preds = (scores >= threshold).astype(np.int64)
    tn, fp, fn, tp = metrics.confusion_matrix(labels, preds, labels=[0, 1]).ravel()
    tpr = tp / (tp+fn) if tp + fn else 1.0
    tnr = tn / (tn+fp) if tn + fp else 1.0
    denom = 2*tp + fp + fn
    return ThresholdMetrics(
        float((tp+tn) / len(labels)), float(2 * tp / denom) if denom else 1.0,
        float((tpr+tnr) / 2), int(fp), int(fn))


def best_f1_threshold(scores, labels) -> Tuple[float, float]:
    """`(F1, threshold)` maximising F1 over every distinct score (highest threshold on ties)"""
    scores, labels = _check(scores, labels)
    candidates = np.unique(scores)[::-1]
    order = np.sort(scores[labels == 1])
    n_pos = len(order)
    neg = np.sort(scores[labels == 0])
    tp = n_pos - np.searchsorted(order, candidates, side='left')
    fp = len(neg) - np.searchsorted(neg, candidates, side='left')
    denom = 2*tp + fp + (n_pos-tp)
    f1 = np.divide(2 * tp, denom, out=np.ones(len(candidates)), where=denom > 0)
    best = int(np.argmax(f1))
    return float(f1[best]), float(candidates[best])


def pr_curve(scores, labels):
    """raw `(precision, recall, thresholds)` points"""
    scores, labels = _check(scores, labels)
    if not labels.any():
        raise UndefinedMetricError("precision-recall curve needs at least one positive")
    return metrics.precision_recall_curve(labels, scores)


def roc_curve(scores, labels):
    """raw `(fpr, tpr, thresholds)` points"""
    scores, labels = _check(scores, labels)
    if labels.all() or not labels.any():
        raise UndefinedMetricError("ROC curve needs both positives and negatives")
    return metrics.roc_curve(labels, scores, drop_intermediate=False)


def _as_tensor(images) -> torch.Tensor:
    """(B, H, W, C) numpy or (B, C, H, W) tensor"""
    if isinstance(images, torch.Tensor):
        return images.float()
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32)
                                                 .transpose(0, 3, 1, 2)))


def score_image(model: SegDecNet, image) -> float:
    """defect probability sigmoid(C_p) of one (H, W, C) array or (C, H, W) tensor"""
    return model.score(_as_tensor(image[None])).item()


def score_split(model: SegDecNet, split, bs: int = 16, progress: bool = True) -> np.ndarray:
    res = []
    for start in tqdm(range(0, len(split), bs), desc="scoring", disable=not progress,
                      leave=False):
        images = np.stack([s.image for s in split.samples[start:start + bs]])
        res.append(model.score(_as_tensor(images)).numpy())
    return np.concatenate(res).astype(np.float64) if res else np.zeros(0)


@dataclass
class EvalReport:
    ids: list
    scores: list
    labels: list
    AP: float
    AUC: float
    threshold: float
    CA: float
    F1: float
    mAcc: float
    FP: int
    FN: int
    best_F1: float
    best_threshold: float
    policy: str = "fixed"

    def __len__(self):
        return len(self.ids)

    def rows(self):
        return list(zip(self.ids, self.labels, self.scores))

    def summary(self) -> dict:
        res = asdict(self)
        for key in ("ids", "scores", "labels"):
            res.pop(key)
        res.update(n=len(self), positives=int(sum(self.labels)))
        return res


def build_report(ids, scores, labels, threshold: Union[float, str] = 0.5) -> EvalReport:
    """all metrics of already computed `scores` (`threshold`: fixed value or "best_f1")"""
    scores, labels = _check(scores, labels)
    best_f1, best_thr = best_f1_threshold(scores, labels)
    if threshold == "best_f1":
        policy, thr = "best_f1", best_thr
    else:
        policy, thr = "fixed", float(threshold)
    return EvalReport(list(ids), scores.tolist(), labels.tolist(),
                      average_precision(scores, labels), roc_auc(scores, labels), thr,
                      *threshold_metrics(scores, labels, thr), best_f1, best_thr, policy)


Scorer = Union[SegDecNet, Callable]


def evaluate_split(model: Scorer, split, threshold: Union[float, str] = 0.5, bs: int = 16,
                   progress: bool = True) -> EvalReport:
    """
    Score every image of `split` and compute all metrics.
    Args:
      model: a `SegDecNet`, or any callable mapping a `Sample` to a score in [0, 1]
      threshold: fixed operating point, or "best_f1"
    """
    if not len(split):
        raise ValueError("empty split")
    if isinstance(model, SegDecNet):
        scores = score_split(model, split, bs=bs, progress=progress)
    else:
        scores = np.array([float(model(s)) for s in split.samples], dtype=np.float64)
    res = build_report([s.id for s in split.samples], scores,
                       [int(s.label) for s in split.samples], threshold)
    thr, policy = res.threshold, res.policy
    log.info("%s: AP=%.4f AUC=%.4f F1=%.4f FP=%d FN=%d @%.3g (%s)", split.name, res.AP,
             res.AUC, res.F1, res.FP, res.FN, thr, policy)
    return res


def _plot(xs, ys, xlabel, ylabel, title, fout: Path):
    fig, ax = plt.subplots(1, 1, figsize=(5, 5))
    ax.step(xs, ys, where='post')
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    plt.tight_layout()
    plt.savefig(fout, dpi=150)
    plt.close(fig)


def write_report(report: EvalReport, out, plots: bool = True) -> Path:
    """`scores.csv`, `summary.yaml`, `{pr,roc}_curve.csv` and (optionally) `.png`"""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "scores.csv", ("id", "label", "score"), report.rows())
    write_manifest(out, report.summary(), name="summary.yaml")
    precision, recall, thr = pr_curve(report.scores, report.labels)
    write_csv(out / "pr_curve.csv", ("precision", "recall", "threshold"),
              zip(precision, recall, list(thr) + [""]))
    fpr, tpr, thr = roc_curve(report.scores, report.labels)
    write_csv(out / "roc_curve.csv", ("fpr", "tpr", "threshold"), zip(fpr, tpr, thr))
    if plots:
        _plot(recall[::-1], precision[::-1], "recall", "precision", f"AP={report.AP:.4f}",
              out / "pr_curve.png")
        _plot(fpr, tpr, "false positive rate", "true positive rate", f"AUC={report.AUC:.4f}",
              out / "roc_curve.png")
    log.info("report:%s", out)
    return out
