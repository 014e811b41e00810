"""Evaluate a trained checkpoint on a dataset split

Usage:
  eval [options]

Options:
  --checkpoint FILE  : Trained model (`checkpoint.pt` of a train run)
  --dataset FORMAT  : dagm, ksdd, ksdd2, severstal or synth (default: from the train run)
  --root DIR  : Dataset root folder (default: from the train run)
  --subset NAME  : Split to score (default: test; dagm, ksdd2 and synth only)
  --threshold T  : Operating point in [0, 1], or best_f1 [default: 0.5]
  --size HxW  : Resize images before padding (default: from the train run)
  --bs SIZE  : Scoring batch size [default: 16:int]
  --out DIR  : Output directory (default: <checkpoint folder>/eval-<subset>)
  --no-plots  : Skip PR/ROC figures
"""
__all__ = ["run"]
import logging
from pathlib import Path

from .datasets import has_test_subset
from .metrics import evaluate_split, write_report
from .model import load_checkpoint
from .train import load_split
from .utils import MANIFEST, UsageError, read_manifest, run_dir, write_manifest

log = logging.getLogger(__name__)


def parse_threshold(threshold):
    if threshold is None:
        return 0.5
    if threshold == "best_f1":
        return threshold
    try:
        return float(threshold)
    except ValueError:
        raise UsageError(f"--threshold must be a number or best_f1, got '{threshold}'") from None


def run(checkpoint=None, dataset=None, root=None, subset=None, threshold="0.5", size=None, bs=16,
        out=None, no_plots=False):
    if checkpoint is None:
        raise UsageError("--checkpoint is required")
    checkpoint = Path(checkpoint)
    model = load_checkpoint(checkpoint)
    trained = {}
    if (checkpoint.parent / MANIFEST).is_file():
        trained = read_manifest(checkpoint.parent).get('options', {})
    dataset = dataset or trained.get('dataset')
    if dataset is None:
        raise UsageError("--dataset is required (no train manifest next to the checkpoint)")
    if subset is None:
        if not has_test_subset(dataset):
            raise UsageError(f"{dataset} has no held-out test subset; use crossval instead")
        subset = "test"
    split = load_split(dataset, root or trained.get('root'), subset,
                       seed=trained.get('seed', 0), size=size or trained.get('size'))
    report = evaluate_split(model, split, parse_threshold(threshold), bs=bs)
    out = run_dir(out or checkpoint.parent / f"eval-{subset}")
    write_manifest(out, {
        'command': 'eval', 'checkpoint': str(checkpoint),
        'options': {'dataset': dataset, 'root': str(root or trained.get('root')),
                    'subset': subset, 'threshold': threshold, 'size': size}})
    write_report(report, out, plots=not no_plots)
    return report.summary()
