"""Component ablation over supervision modes

Usage:
  ablate [options]

Options:
  --dataset FORMAT  : dagm, ksdd, ksdd2, severstal or synth (default: synth)
  --root DIR  : Dataset root folder
  --modes LIST  : Comma-separated subset of FS,MS,WS [default: FS,MS,WS]
  --folds K  : Folds for formats without a test subset [default: 3:int]
  --preset NAME  : Hyperparameter preset (default: per dataset)
  --seed SEED  : Random seed [default: None:int]
  --out DIR  : Output directory (default: $MIXSEGDEC_OUT/ablate-<dataset>-seed<seed>)
  --config FILE  : Run manifest to resume settings from
  --epochs N_EP  : [default: None:int]
  --lr ETA  : Learning rate [default: None:float]
  --bs SIZE  : Batch size [default: None:int]
  --delta DELTA  : Classification loss weight [default: None:float]
  --wpos W_POS  : Weight at positive region centres [default: None:float]
  --p P  : Distance weighting exponent [default: None:float]
  --dilate KERNEL  : Mask dilation kernel (odd) [default: None:int]
  --threshold T  : Operating point in [0, 1], or best_f1 [default: 0.5]
  --size HxW  : Resize images before padding
  --max-positives COUNT  : Seeded subsample of positives [default: None:int]
  --max-negatives COUNT  : Seeded subsample of negatives [default: None:int]
"""
__all__ = ["ABLATION_GRID", "WEAK_GRID", "MODES", "AblationRow", "run_ablation", "run"]
import logging
from dataclasses import replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .crossval import default_builder
from .datasets import DatasetSplit, assign_supervision, has_test_subset, make_folds
from .evaluate import parse_threshold
from .metrics import evaluate_split, write_report
from .train import Hyperparams, load_split, setup_run, train
from .utils import UsageError, run_dir, write_csv, write_manifest

log = logging.getLogger(__name__)
#: (dynamic_balancing, stop_gradient_flow, distance_transform), added one at a time
ABLATION_GRID = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True))
#: weak supervision has no pixel labels, so no distance transform
WEAK_GRID = ((False, True, None), (True, True, None))
MODES = ('FS', 'MS', 'WS')
#: fraction of pixel-labelled positives in mixed supervision
MIXED_FRACTION = 0.25
COLUMNS = ("mode", "N", "dynamic_balancing", "gradient_flow_adjustment", "distance_transform",
           "AP", "FP+FN")


class AblationRow(NamedTuple):
    mode: str
    N: int
    dynamic_balancing: bool
    stop_gradient_flow: bool
    distance_transform: Optional[bool] # None: not applicable
    AP: float
    FP_FN: int


def mode_N(mode: str, n_all: int) -> int:
    if mode == 'FS':
        return n_all
    if mode == 'MS':
        return min(n_all, max(1, int(round(MIXED_FRACTION * n_all))))
    if mode == 'WS':
        return 0
    raise ValueError(f"unknown supervision mode '{mode}'; choices: {MODES}")


def mode_grid(mode: str, grid=None) -> List[tuple]:
    """`grid` as run in `mode` (weak rows drop the distance toggle, duplicates removed)"""
    if mode != 'WS':
        return [tuple(i) for i in (grid or ABLATION_GRID)]
    if grid is None:
        return list(WEAK_GRID)
    res = []
    for dyn, grad, _ in grid:
        if (dyn, grad, None) not in res:
            res.append((dyn, grad, None))
    return res


def run_ablation(dataset: Sequence[Tuple[DatasetSplit, DatasetSplit]], base_hp: Hyperparams,
                 grid=None, modes: Sequence[str] = MODES, model_builder=default_builder,
                 threshold=0.5, out=None, progress: bool = True) -> List[AblationRow]:
    """
    One train+evaluate run per toggle triple per supervision mode.
    Args:
      dataset: (train, test) pairs; metrics are pooled over pairs (mean AP, summed FP+FN)
      grid: (dynamic_balancing, stop_gradient_flow, distance_transform) triples
      modes: FS (all positives pixel-labelled), MS (about a quarter), WS (none)
    """
    if not dataset:
        raise ValueError("no (train, test) pairs")
    rows = []
    for mode in modes:
        for dyn, grad, dist in mode_grid(mode, grid):
            hp = replace(base_hp, dynamic_balancing=dyn, stop_gradient_flow=grad,
                         distance_transform=bool(dist))
            aps, errors = [], 0
            for i, (train_split, test_split) in enumerate(dataset):
                N = mode_N(mode, train_split.N_all)
                train_split = assign_supervision(train_split, N, seed=hp.seed)
                flags = "".join(c for c, on in zip("DGT", (dyn, grad, dist)) if on) or "none"
                run_out = Path(out) / f"{mode}-{flags}" / f"pair{i}" if out is not None else None
                model = model_builder(train_split, hp)
                train(model, train_split, hp, out=run_out, progress=progress)
                report = evaluate_split(model, test_split, threshold, progress=progress)
                if run_out is not None:
                    write_report(report, run_out / "eval", plots=False)
                aps.append(report.AP)
                errors += report.FP + report.FN
            row = AblationRow(mode, mode_N(mode, dataset[0][0].N_all), dyn, grad, dist,
                              float(np.mean(aps)), errors)
            log.info("%s dyn=%s grad=%s dist=%s: AP=%.4f FP+FN=%d", mode, dyn, grad, dist,
                     row.AP, row.FP_FN)
            rows.append(row)
    return rows


def write_table(rows: Sequence[AblationRow], fout) -> Path:
    return write_csv(fout, COLUMNS,
                     [[r.mode, r.N, r.dynamic_balancing, r.stop_gradient_flow,
                       "N/A" if r.distance_transform is None else r.distance_transform, r.AP,
                       r.FP_FN] for r in rows])


def train_test_pairs(split: DatasetSplit, options: dict, folds: int, seed: int):
    """the format's own test subset, else stratified folds of `split`"""
    if not has_test_subset(options['dataset']):
        return make_folds(split, folds, seed=seed)
    test = load_split(options['dataset'], options['root'], "test", seed=seed,
                      size=options['size'], progress=False)
    return [(split, test)]


def run(dataset=None, root=None, modes="FS,MS,WS", folds=3, preset=None, seed=None, out=None,
        config=None, epochs=None, lr=None, bs=None, delta=None, wpos=None, p=None, dilate=None,
        threshold="0.5", size=None, max_positives=None, max_negatives=None):
    modes = [m.strip().upper() for m in modes.split(",") if m.strip()]
    unknown = set(modes) - set(MODES)
    if unknown or not modes:
        raise UsageError(f"--modes must be a subset of {','.join(MODES)}, got {modes}")
    split, hp, manifest = setup_run(
        "ablate", dataset=dataset, root=root, preset=preset, seed=seed, config=config,
        size=size, max_positives=max_positives, max_negatives=max_negatives, epochs=epochs,
        lr=lr, bs=bs, delta=delta, wpos=wpos, p=p, dilate=dilate)
    opts = manifest['options']
    out = run_dir(out, f"ablate-{opts['dataset']}-seed{hp.seed}")
    manifest.update(modes=modes, folds=folds, threshold=threshold)
    write_manifest(out, manifest)
    rows = run_ablation(train_test_pairs(split, opts, folds, hp.seed), hp, modes=modes,
                        threshold=parse_threshold(threshold), out=out)
    return write_table(rows, out / "ablation.csv")
