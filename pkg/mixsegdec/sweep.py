"""Supervision sweep: test AP against the number of pixel-labelled positives

Usage:
  sweep [options]

Options:
  --dataset FORMAT  : dagm, ksdd, ksdd2, severstal or synth (default: synth)
  --root DIR  : Dataset root folder
  --N-values LIST  : Comma-separated counts, percentages or "all" (default: 0,25%%,all)
  --seeds LIST  : Comma-separated seeds [default: 0,1,2]
  --folds K  : Folds for formats without a test subset [default: 3:int]
  --preset NAME  : Hyperparameter preset (default: per dataset)
  --out DIR  : Output directory (default: $MIXSEGDEC_OUT/sweep-<dataset>)
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
  --size HxW  : Resize images before padding
  --max-positives COUNT  : Seeded subsample of positives [default: None:int]
  --max-negatives COUNT  : Seeded subsample of negatives [default: None:int]
"""
__all__ = ["SweepResult", "parse_n_values", "supervision_sweep", "run"]
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .ablate import train_test_pairs
from .crossval import default_builder
from .datasets import DatasetSplit, assign_supervision
from .metrics import evaluate_split
from .train import Hyperparams, setup_run, train, weak_hyperparams
from .utils import UsageError, run_dir, write_csv, write_manifest

log = logging.getLogger(__name__)
DEFAULT_N_VALUES = "0,25%,all"


def parse_n_values(text: str, n_all: int) -> List[int]:
    """N values like "0,25%,all" as sorted unique counts in [0, n_all]"""
    res = set()
    for token in str(text).split(","):
        token = token.strip().lower()
        if not token:
            continue
        try:
            if token == "all":
                value = n_all
            elif token.endswith("%"):
                value = int(round(float(token[:-1]) / 100 * n_all))
            else:
                value = int(token)
        except ValueError:
            raise UsageError(f"bad N value '{token}'") from None
        if not 0 <= value <= n_all:
            raise UsageError(f"N={value} outside [0, {n_all}]")
        res.add(value)
    if not res:
        raise UsageError("no N values")
    return sorted(res)


@dataclass
class SweepResult:
    rows: List[Tuple[int, int, float]] # (N, seed, AP)

    def median(self) -> Dict[int, float]:
        by_n = {}
        for N, _, ap in self.rows:
            by_n.setdefault(N, []).append(ap)
        return {N: float(np.median(aps)) for N, aps in sorted(by_n.items())}


def supervision_sweep(train_split: DatasetSplit, test_split: DatasetSplit, hp: Hyperparams,
                      n_values: Sequence[int], seeds: Sequence[int],
                      model_builder=default_builder, out=None,
                      progress: bool = True) -> SweepResult:
    """train and evaluate once per (N, seed); the seed drives labelling, init and sampling"""
    rows = []
    for N in n_values:
        for seed in seeds:
            split = assign_supervision(train_split, min(N, train_split.N_all), seed=seed)
            run_hp = weak_hyperparams(replace(hp, seed=seed), split.N)
            model = model_builder(split, run_hp)
            run_out = Path(out) / f"N{N}-seed{seed}" if out is not None else None
            train(model, split, run_hp, out=run_out, progress=progress)
            ap = evaluate_split(model, test_split, progress=progress).AP
            log.info("N=%d seed=%d: AP=%.4f", N, seed, ap)
            rows.append((split.N, seed, ap))
    return SweepResult(rows)


def run(dataset=None, root=None, N_values=None, seeds="0,1,2", folds=3, preset=None,
        out=None, config=None, epochs=None, lr=None, bs=None, delta=None, wpos=None, p=None,
        dilate=None, no_dynamic_balancing=False, no_grad_stop=False,
        no_distance_transform=False, size=None, max_positives=None, max_negatives=None):
    try:
        seeds = [int(i) for i in str(seeds).split(",") if i.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got '{seeds}'") from None
    if not seeds:
        raise UsageError("no seeds")
    split, hp, manifest = setup_run(
        "sweep", dataset=dataset, root=root, preset=preset, seed=seeds[0], config=config,
        size=size, max_positives=max_positives, max_negatives=max_negatives, epochs=epochs,
        lr=lr, bs=bs, delta=delta, wpos=wpos, p=p, dilate=dilate,
        no_dynamic_balancing=no_dynamic_balancing, no_grad_stop=no_grad_stop,
        no_distance_transform=no_distance_transform)
    opts = manifest['options']
    n_values = parse_n_values(N_values or DEFAULT_N_VALUES, split.N_all)
    out = run_dir(out, f"sweep-{opts['dataset']}")
    manifest.update(N_values=n_values, seeds=seeds, folds=folds)
    write_manifest(out, manifest)
    rows = []
    for i, (train_split, test_split) in enumerate(train_test_pairs(split, opts, folds, hp.seed)):
        result = supervision_sweep(train_split, test_split, hp, n_values, seeds,
                                   out=out / f"pair{i}")
        rows.extend((i, ) + row for row in result.rows)
    write_csv(out / "sweep.csv", ("pair", "N", "seed", "AP"), rows)
    medians = SweepResult([row[1:] for row in rows]).median()
    write_csv(out / "sweep_median.csv", ("N", "median_AP"), medians.items())
    return medians
