"""Re-render evaluation reports of finished runs

Usage:
  report [options] <run>

Arguments:
  <run>  : Run directory (searched recursively for `scores.csv`)

Options:
  --threshold T  : Operating point in [0, 1], or best_f1 (default: as evaluated)
  --no-plots  : Skip PR/ROC figures
"""
__all__ = ["rebuild", "run"]
import logging
from pathlib import Path

from .evaluate import parse_threshold
from .metrics import build_report, write_report
from .utils import read_csv, read_manifest, write_csv

log = logging.getLogger(__name__)
COLUMNS = ("run", "AP", "AUC", "CA", "F1", "mAcc", "FP", "FN", "threshold", "best_F1")


def rebuild(folder, threshold=None, plots: bool = True):
    """recompute all metrics of `folder/scores.csv`"""
    folder = Path(folder)
    rows = read_csv(folder / "scores.csv")
    if threshold is None:
        summary = folder / "summary.yaml"
        previous = read_manifest(summary) if summary.is_file() else {}
        threshold = "best_f1" if previous.get('policy') == "best_f1" else previous.get(
            'threshold', 0.5)
    report = build_report([r['id'] for r in rows], [float(r['score']) for r in rows],
                          [int(r['label']) for r in rows], threshold)
    write_report(report, folder, plots=plots)
    return report


def run(run, threshold=None, no_plots=False):
    root = Path(run)
    folders = sorted({f.parent for f in root.rglob("scores.csv")})
    if not folders:
        raise FileNotFoundError(f"no scores.csv under {root}")
    threshold = None if threshold is None else parse_threshold(threshold)
    table = []
    for folder in folders:
        report = rebuild(folder, threshold, plots=not no_plots)
        table.append([folder.relative_to(root).as_posix(), report.AP, report.AUC, report.CA,
                      report.F1, report.mAcc, report.FP, report.FN, report.threshold,
                      report.best_F1])
    log.info("%d reports under %s", len(table), root)
    return write_csv(root / "reports.csv", COLUMNS, table)
