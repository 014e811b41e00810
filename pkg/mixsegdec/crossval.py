"""Stratified k-fold cross-validation (KolektorSDD protocol)

Usage:
  crossval [options]

Options:
  --dataset FORMAT  : dagm, ksdd, ksdd2, severstal or synth (default: ksdd)
  --root DIR  : Dataset root folder
  --subset NAME  : Subset to fold where the format has one
  --folds K  : Number of folds [default: 3:int]
  --N COUNT  : Pixel-labelled positives per training fold (default: all) [default: None:int]
  --preset NAME  : Hyperparameter preset (default: per dataset)
  --seed SEED  : Random seed (folds & training) [default: None:int]
  --out DIR  : Output directory (default: $MIXSEGDEC_OUT/crossval-<dataset>-N<N>-seed<seed>)
  --config FILE  : Run manifest to resume settings from
  --epochs N_EP  : [default: None:int]
  --lr ETA  : Learning rate [default: None:float]
  --bs SIZE  : Batch size [default: None:int]
  --delta DELTA  : Classification loss weight [default: None:float]
  --wpos W_POS  : Weight at positive region centres [default: None:float]
  --p P  : Distance weighting exponent [default: None:float]
  --dilate KERNEL  : Mask dilation kernel (odd) [default: None:int]
  --no-dynamic-balancing  : Constant loss balance
  --no-grad-stop  : Let classification gradients reach the segmentation layers
  --no-distance-transform  : Unweighted segmentation loss
  --threshold T  : Operating point in [0, 1], or best_f1 [default: 0.5]
  --size HxW  : Resize images before padding
"""
__all__ = ["CrossvalResult", "crossval", "default_builder", "run"]
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .datasets import DatasetSplit, assign_supervision, make_folds
from .evaluate import parse_threshold
from .metrics import EvalReport, evaluate_split, write_report
from .model import SegDecNet, build_model
from .train import Hyperparams, model_config, setup_run, train
from .utils import run_dir, write_csv, write_manifest

log = logging.getLogger(__name__)
#: averaged over folds
SUMMARY_KEYS = ("AP", "AUC", "CA", "F1", "mAcc", "FP", "FN", "best_F1")


def default_builder(split: DatasetSplit, hp: Hyperparams) -> SegDecNet:
    return build_model(model_config(split, hp))


@dataclass
class CrossvalResult:
    reports: List[EvalReport]

    @property
    def AP(self) -> float:
        return float(np.mean([r.AP for r in self.reports]))

    def mean(self) -> dict:
        return {k: float(np.mean([getattr(r, k) for r in self.reports])) for k in SUMMARY_KEYS}

    def rows(self):
        return [[i] + [getattr(r, k) for k in SUMMARY_KEYS] for i, r in enumerate(self.reports)]


def crossval(model_builder: Callable[[DatasetSplit, Hyperparams], SegDecNet],
             folds: Sequence[Tuple[DatasetSplit, DatasetSplit]], hp: Hyperparams,
             N: Optional[int] = None, threshold=0.5, out=None,
             progress: bool = True) -> CrossvalResult:
    """
    Train from a fresh model on each fold's training part and evaluate on its test part.
    Args:
      N: pixel-labelled positives per training fold (default: keep the fold's tiers)
    """
    if len(folds) < 2:
        raise ValueError(f"need at least 2 folds, got {len(folds)}")
    reports = []
    for i, (train_split, test_split) in enumerate(folds):
        if N is not None:
            train_split = assign_supervision(train_split, min(N, train_split.N_all),
                                             seed=hp.seed)
        fold_out = Path(out) / f"fold{i}" if out is not None else None
        model = model_builder(train_split, hp)
        train(model, train_split, hp, out=fold_out, progress=progress)
        report = evaluate_split(model, test_split, threshold, progress=progress)
        if fold_out is not None:
            write_report(report, fold_out / "eval")
        log.info("fold %d/%d: AP=%.4f", i + 1, len(folds), report.AP)
        reports.append(report)
    res = CrossvalResult(reports)
    log.info("mean AP over %d folds: %.4f", len(folds), res.AP)
    return res


def run(dataset=None, root=None, subset=None, folds=3, N=None, preset=None, seed=None,
        out=None, config=None, epochs=None, lr=None, bs=None, delta=None, wpos=None, p=None,
        dilate=None, no_dynamic_balancing=False, no_grad_stop=False,
        no_distance_transform=False, threshold="0.5", size=None):
    split, hp, manifest = setup_run(
        "crossval", dataset=dataset or 'ksdd', root=root, subset=subset, N=N, preset=preset,
        seed=seed, config=config, size=size, epochs=epochs, lr=lr, bs=bs, delta=delta,
        wpos=wpos, p=p, dilate=dilate, no_dynamic_balancing=no_dynamic_balancing,
        no_grad_stop=no_grad_stop, no_distance_transform=no_distance_transform)
    opts = manifest['options']
    out = run_dir(out, f"crossval-{opts['dataset']}-N{N if N is not None else 'all'}"
                  f"-seed{hp.seed}")
    manifest.update(folds=folds, threshold=threshold)
    write_manifest(out, manifest)
    result = crossval(default_builder, make_folds(split, folds, seed=hp.seed), hp, N=N,
                      threshold=parse_threshold(threshold), out=out)
    write_csv(out / "folds.csv", ("fold",) + SUMMARY_KEYS, result.rows())
    summary = dict(result.mean(), folds=folds)
    write_manifest(out, summary, name="summary.yaml")
    return summary
