"""Train a segmentation-decision network

Usage:
  train [options]

Options:
  --dataset FORMAT  : dagm, ksdd, ksdd2, severstal or synth (default: synth)
  --root DIR  : Dataset root folder
  --subset NAME  : Training subset where the format has one (default: train)
  --N COUNT  : Pixel-labelled positives (default: all) [default: None:int]
  --preset NAME  : Hyperparameter preset (default: per dataset)
  --seed SEED  : Random seed [default: None:int]
  --out DIR  : Output directory (default: $MIXSEGDEC_OUT/train-<dataset>-N<N>-seed<seed>)
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
  --size HxW  : Resize images before padding (e.g. 256x256)
  --max-positives COUNT  : Seeded subsample of positives [default: None:int]
  --max-negatives COUNT  : Seeded subsample of negatives [default: None:int]
  --val-every EPOCHS  : Evaluate test AP every few epochs (0: never) [default: 0:int]
  --ckpt-every EPOCHS  : Extra checkpoint every few epochs (0: never) [default: 0:int]
"""
__all__ = [
    "DivergenceError", "Hyperparams", "PRESETS", "SEVERSTAL_EPOCHS", "TrainHistory",
    "preset_hyperparams", "weak_hyperparams", "resolve_hyperparams", "make_batch", "train_step",
    "train", "model_config", "setup_run", "run"]
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import ClassVar, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
from tqdm.auto import trange

from .datasets import (
    DatasetSplit,
    Sample,
    assign_supervision,
    balanced_epoch_indices,
    has_test_subset,
    load_dataset,
)
from .losses import (
    LossConfig,
    classification_loss,
    gamma_indicator,
    lambda_schedule,
    prepare_targets,
    segmentation_loss,
    total_loss,
)
from .metrics import average_precision, score_split
from .model import ConfigError, ModelConfig, SegDecNet, build_model, save_checkpoint
from .utils import (
    UsageError,
    read_csv,
    read_manifest,
    run_dir,
    seed_everything,
    write_csv,
    write_manifest,
)

log = logging.getLogger(__name__)
#: Severstal epochs by number of positive training images
SEVERSTAL_EPOCHS = {300: 90, 750: 80, 1500: 60, 3000: 40}


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    n_ep: int = 50
    lr: float = 0.05
    bs: int = 1
    delta: float = 1.0
    w_pos: float = 1.0
    p: float = 1.0
    dilation_kernel: int = 7
    dynamic_balancing: bool = True
    stop_gradient_flow: bool = True
    distance_transform: bool = True
    seed: int = 0
    lambda_fallback: float = 0.5

    def __post_init__(self):
        if self.n_ep < 1:
            raise ValueError(f"n_ep must be >= 1, got {self.n_ep}")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.bs < 1:
            raise ValueError(f"batch size must be >= 1, got {self.bs}")
        self.loss_config() # validates the remaining fields

    def loss_config(self) -> LossConfig:
        return LossConfig(delta=self.delta, w_pos=self.w_pos, p=self.p,
                          dilation_kernel=self.dilation_kernel,
                          dynamic_balancing=self.dynamic_balancing,
                          distance_transform_enabled=self.distance_transform,
                          lambda_fallback=self.lambda_fallback)

    @property
    def toggles(self):
        return self.dynamic_balancing, self.stop_gradient_flow, self.distance_transform

    @classmethod
    def from_dict(cls, dct):
        known = {f.name for f in fields(cls)}
        unknown = set(dct) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**dct)


PRESETS: Dict[str, dict] = {
    'dagm': {'n_ep': 70, 'lr': 0.05, 'bs': 1, 'delta': 1.0, 'w_pos': 10.0, 'p': 1.0,
             'dilation_kernel': 7},
    'ksdd': {'n_ep': 50, 'lr': 1.0, 'bs': 1, 'delta': 0.01, 'w_pos': 1.0, 'p': 2.0,
             'dilation_kernel': 7},
    'ksdd_weak': {'n_ep': 50, 'lr': 0.01, 'bs': 1, 'delta': 1.0, 'w_pos': 1.0, 'p': 2.0,
                  'dilation_kernel': 7, 'dynamic_balancing': False},
    'ksdd2': {'n_ep': 50, 'lr': 0.01, 'bs': 1, 'delta': 1.0, 'w_pos': 3.0, 'p': 2.0,
              'dilation_kernel': 15},
    'severstal': {'lr': 0.1, 'bs': 10, 'delta': 0.1, 'w_pos': 1.0, 'p': 2.0,
                  'dilation_kernel': 7},
    'synth': {'n_ep': 20, 'lr': 0.05, 'bs': 1, 'delta': 1.0, 'w_pos': 10.0, 'p': 1.0,
              'dilation_kernel': 7}}
#: preset used when none is given, per dataset format
DEFAULT_PRESET = {'dagm': 'dagm', 'ksdd': 'ksdd', 'ksdd2': 'ksdd2', 'severstal': 'severstal',
                  'synth': 'synth'}


def preset_hyperparams(key: str, n_all: Optional[int] = None, seed: int = 0,
                       n_ep: Optional[int] = None) -> Hyperparams:
    """
    Published per-dataset settings.
    Args:
      key: one of `PRESETS` (case-insensitive)
      n_all: number of positive training images ("severstal" epochs follow the nearest
        `SEVERSTAL_EPOCHS` entry unless `n_ep` is given)
      n_ep: explicit epochs, overriding the preset
    """
    key = key.lower()
    if key not in PRESETS:
        raise ValueError(f"unknown preset '{key}'; choices: {sorted(PRESETS)}")
    values = dict(PRESETS[key], seed=seed)
    if n_ep is not None:
        values['n_ep'] = n_ep
    elif key == 'severstal':
        if n_all is None or n_all < 1:
            raise ValueError(f"severstal preset needs N_all >= 1 or explicit epochs, got {n_all}")
        nearest = min(SEVERSTAL_EPOCHS, key=lambda k: (abs(k - n_all), k))
        if nearest != n_all:
            log.warning("severstal: no published epochs for N_all=%d, using those of N_all=%d",
                        n_all, nearest)
        values['n_ep'] = SEVERSTAL_EPOCHS[nearest]
    return Hyperparams(**values)


def weak_hyperparams(hp: Hyperparams, N: int) -> Hyperparams:
    """no dynamic balancing without pixel labels (`N == 0`)"""
    if N == 0 and hp.dynamic_balancing:
        log.info("N=0: dynamic balancing disabled")
        return replace(hp, dynamic_balancing=False)
    return hp


#: command-line flag -> Hyperparams field
FLAGS = {
    'epochs': 'n_ep', 'lr': 'lr', 'bs': 'bs', 'delta': 'delta', 'wpos': 'w_pos', 'p': 'p',
    'dilate': 'dilation_kernel', 'seed': 'seed'}
TOGGLES = {
    'no_dynamic_balancing': 'dynamic_balancing', 'no_grad_stop': 'stop_gradient_flow',
    'no_distance_transform': 'distance_transform'}


def resolve_hyperparams(preset: Optional[str] = None, n_all: Optional[int] = None,
                        base: Optional[dict] = None, **flags) -> Hyperparams:
    """preset, then `base` (e.g. from a manifest), then non-None `flags` (see `FLAGS`)"""
    values = asdict(preset_hyperparams(preset, n_all, n_ep=flags.get('epochs'))) if preset else {}
    values.update(base or {})
    for flag, value in flags.items():
        if flag in FLAGS:
            if value is not None:
                values[FLAGS[flag]] = value
        elif flag in TOGGLES:
            if value:
                values[TOGGLES[flag]] = False
        else:
            raise TypeError(f"unknown flag '{flag}'")
    return Hyperparams.from_dict(values)


@dataclass
class TrainHistory:
    COLUMNS: ClassVar = ("epoch", "lambda", "L_seg", "L_cls", "L_total", "val_AP")
    records: List[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, epoch: int, lam: float, l_seg: float, l_cls: float, l_total: float,
               val_ap: Optional[float] = None):
        self.records.append(
            dict(zip(self.COLUMNS, (epoch, lam, l_seg, l_cls, l_total, val_ap))))

    def column(self, name) -> list:
        return [rec[name] for rec in self.records]

    def write_csv(self, fout) -> Path:
        return write_csv(fout, self.COLUMNS,
                         [["" if rec[c] is None else rec[c] for c in self.COLUMNS]
                          for rec in self.records])

    @classmethod
    def read_csv(cls, fin) -> "TrainHistory":
        res = cls()
        for row in read_csv(fin):
            res.append(int(row['epoch']), *(float(row[c]) for c in cls.COLUMNS[1:5]),
                       float(row['val_AP']) if row['val_AP'] else None)
        return res


class Batch(NamedTuple):
    images: torch.Tensor  # (B, C, H, W)
    labels: torch.Tensor  # (B,)
    gammas: torch.Tensor  # (B,)
    targets: torch.Tensor # (B, 1, H/8, W/8)
    weights: torch.Tensor # (B, 1, H/8, W/8)


def make_batch(samples: Sequence[Sample], loss_config: LossConfig,
               cache: Optional[dict] = None) -> Batch:
    """
    Stack samples into tensors. Segmentation targets are prepared once per sample id
    and kept in `cache`; weak positives contribute zero targets and weights.
    """
    if not samples:
        raise ValueError("empty batch")
    cache = {} if cache is None else cache
    shape = samples[0].image.shape[:2]
    stride_shape = (shape[0] // 8, shape[1] // 8)
    targets, weights = [], []
    for s in samples:
        if s.id not in cache:
            cache[s.id] = prepare_targets(s.target_mask, shape, loss_config, s.tier)
        prepared = cache[s.id]
        if prepared is None:
            prepared = (np.zeros(stride_shape, np.float32), np.zeros(stride_shape, np.float32))
        targets.append(prepared[0])
        weights.append(prepared[1])
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    return Batch(
        torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)),
        torch.tensor([s.label for s in samples], dtype=torch.float32),
        torch.tensor([gamma_indicator(s.tier) for s in samples], dtype=torch.float32),
        torch.from_numpy(np.stack(targets)[:, None]),
        torch.from_numpy(np.stack(weights)[:, None]))


class StepLosses(NamedTuple):
    L_seg: float
    L_cls: float
    L_total: float


def train_step(model: SegDecNet, batch: Batch, lam: float, hp: Hyperparams,
               optimizer: Optional[torch.optim.Optimizer] = None) -> StepLosses:
    """
    One plain SGD update on the batch mean of
    `lam * gamma * L_seg + (1 - lam) * delta * L_cls`.
    Returns batch means; `L_seg` already includes the per-sample gamma gate.
    """
    if optimizer is None:
        optimizer = torch.optim.SGD(model.parameters(), lr=hp.lr, momentum=0, weight_decay=0)
    model.train()
    out = model(batch.images)
    l_seg = segmentation_loss(out.seg_logits, batch.targets, batch.weights, reduction="sample")
    l_cls = classification_loss(out.cls_logit, batch.labels, reduction="sample")
    loss = total_loss(l_seg, l_cls, lam, batch.gammas, hp.delta).mean()
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    for name, prm in model.named_parameters():
        if prm.grad is not None and not torch.isfinite(prm.grad).all():
            raise DivergenceError(f"non-finite gradient in {name}")
    optimizer.step()
    return StepLosses((batch.gammas * l_seg).mean().item(), l_cls.mean().item(), loss.item())


def model_config(split: DatasetSplit, hp: Hyperparams, **kwargs) -> ModelConfig:
    height, width, channels = split.image_shape
    return ModelConfig(input_channels=channels, input_height=height, input_width=width,
                       stop_gradient_flow=hp.stop_gradient_flow, seed=hp.seed, **kwargs)


def train(model: SegDecNet, split: DatasetSplit, hp: Hyperparams,
          val_split: Optional[DatasetSplit] = None, val_every: int = 0, out=None,
          ckpt_every: int = 0, progress: bool = True):
    """
    Train `model` in place for `hp.n_ep` epochs on class-balanced epochs of `split`.
    Args:
      val_split: scored every `val_every` epochs (and at the end) into the history
      out: folder for `history.csv`, `checkpoint.pt` and optional extra checkpoints
    Returns:
      `(model, TrainHistory)`
    """
    if not len(split):
        raise ValueError("empty training split")
    height, width, channels = split.image_shape
    cfg = model.config
    if (cfg.input_channels, cfg.input_height, cfg.input_width) != (channels, height, width):
        raise ConfigError(f"model expects {cfg.input_channels}x{cfg.input_height}x"
                          f"{cfg.input_width} images, split has {channels}x{height}x{width}")
    if cfg.stop_gradient_flow != hp.stop_gradient_flow:
        raise ConfigError("model and hyperparameters disagree on stop_gradient_flow")
    out = Path(out) if out is not None else None
    seed_everything(hp.seed)
    loss_config = hp.loss_config()
    optimizer = torch.optim.SGD(model.parameters(), lr=hp.lr, momentum=0, weight_decay=0)
    history = TrainHistory()
    cache = {}
    best_ap = -1.0
    log.info("training %s: %d positives (N=%d), %d negatives, %d epochs", split.name,
             split.N_all, split.N, len(split.negatives), hp.n_ep)
    for epoch in trange(hp.n_ep, desc="train", unit="epoch", disable=not progress,
                        leave=False):
        lam = lambda_schedule(epoch, hp.n_ep, hp.dynamic_balancing, hp.lambda_fallback)
        order = balanced_epoch_indices(split, epoch, hp.seed)
        sums, count = np.zeros(3), 0
        for step, start in enumerate(range(0, len(order), hp.bs)):
            batch = make_batch([split.samples[i] for i in order[start:start + hp.bs]],
                               loss_config, cache)
            try:
                losses = train_step(model, batch, lam, hp, optimizer)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, step {step}: {exc}") from exc
            size = len(batch.labels)
            sums += np.multiply(losses, size)
            count += size
        val_ap = None
        last = epoch == hp.n_ep - 1
        if val_split is not None and ((val_every and (epoch+1) % val_every == 0) or last):
            val_ap = average_precision(score_split(model, val_split, progress=False),
                                       [s.label for s in val_split.samples])
            if out is not None and val_ap > best_ap:
                best_ap = val_ap
                save_checkpoint(model, out / "checkpoint_best.pt", epoch=epoch, val_AP=val_ap)
        history.append(epoch, lam, *(sums / count).tolist(), val_ap)
        log.info("epoch %d: lambda=%.3f L_seg=%.4g L_cls=%.4g L_total=%.4g%s", epoch, lam,
                 *(sums / count), "" if val_ap is None else f" val_AP={val_ap:.4f}")
        if out is not None and ckpt_every and (epoch+1) % ckpt_every == 0 and not last:
            save_checkpoint(model, out / f"checkpoint_epoch{epoch:03d}.pt", epoch=epoch)
    if out is not None:
        save_checkpoint(model, out / "checkpoint.pt", epoch=hp.n_ep - 1)
        history.write_csv(out / "history.csv")
        log.info("checkpoint & history:%s", out)
    return model, history


def _parse_size(size):
    if size is None or isinstance(size, (tuple, list)):
        return size
    try:
        height, width = map(int, str(size).lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got '{size}'") from None
    return height, width


def load_split(dataset: str, root, subset=None, N: Optional[int] = None, seed: int = 0,
               size=None, max_positives=None, max_negatives=None,
               progress: bool = True) -> DatasetSplit:
    """load and assign supervision (`N=None`: all positives pixel-labelled)"""
    if root is None:
        raise UsageError("--root is required")
    split = load_dataset(dataset, root, subset=subset, size=_parse_size(size),
                         max_positives=max_positives, max_negatives=max_negatives, seed=seed,
                         progress=progress)
    return assign_supervision(split, split.N_all if N is None else N, seed=seed)


def setup_run(command: str, dataset=None, root=None, subset=None, N=None, preset=None, seed=None,
              config=None, size=None, max_positives=None, max_negatives=None, **flags):
    """
    Resolve a command's options into `(split, hp, manifest)`:
    explicit flags override `config` manifest values, which override the preset.
    """
    base = read_manifest(config) if config else {}
    opts = base.get('options', {})
    dataset = (dataset or opts.get('dataset') or 'synth').lower()
    root = root or opts.get('root')
    subset = subset or opts.get('subset')
    if subset is None and has_test_subset(dataset):
        subset = 'train'
    N = N if N is not None else opts.get('N')
    seed = seed if seed is not None else opts.get('seed', 0)
    size = size or opts.get('size')
    max_positives = max_positives if max_positives is not None else opts.get('max_positives')
    max_negatives = max_negatives if max_negatives is not None else opts.get('max_negatives')

    split = load_split(dataset, root, subset, N, seed, size, max_positives, max_negatives)
    if preset is None and not base:
        preset = DEFAULT_PRESET.get(dataset)
        if dataset == 'ksdd' and split.N == 0:
            preset = 'ksdd_weak'
    hp = resolve_hyperparams(preset, n_all=split.N_all,
                             base=None if preset else base.get('hyperparams'),
                             seed=seed, **flags)
    hp = weak_hyperparams(hp, split.N)
    manifest = {
        'command': command, 'preset': preset or base.get('preset'),
        'options': {
            'dataset': dataset, 'root': str(root), 'subset': subset, 'N': split.N,
            'seed': seed, 'size': list(_parse_size(size)) if size else None,
            'max_positives': max_positives, 'max_negatives': max_negatives},
        'counts': split.counts(), 'hyperparams': asdict(hp)}
    return split, hp, manifest


def run(dataset=None, root=None, subset=None, N=None, preset=None, seed=None, out=None,
        config=None, epochs=None, lr=None, bs=None, delta=None, wpos=None, p=None, dilate=None,
        no_dynamic_balancing=False, no_grad_stop=False, no_distance_transform=False, size=None,
        max_positives=None, max_negatives=None, val_every=0, ckpt_every=0):
    split, hp, manifest = setup_run(
        "train", dataset=dataset, root=root, subset=subset, N=N, preset=preset, seed=seed,
        config=config, size=size, max_positives=max_positives, max_negatives=max_negatives,
        epochs=epochs, lr=lr, bs=bs, delta=delta, wpos=wpos, p=p, dilate=dilate,
        no_dynamic_balancing=no_dynamic_balancing, no_grad_stop=no_grad_stop,
        no_distance_transform=no_distance_transform)
    opts = manifest['options']
    out = run_dir(out, f"train-{opts['dataset']}-N{split.N}-seed{hp.seed}")
    val_split = None
    if val_every:
        if not has_test_subset(opts['dataset']):
            raise UsageError(f"{opts['dataset']} has no test subset; use crossval instead")
        val_split = load_split(opts['dataset'], opts['root'], "test", seed=hp.seed,
                               size=opts['size'], progress=False)
    model = build_model(model_config(split, hp))
    manifest['model'] = asdict(model.config)
    manifest.update(val_every=val_every, ckpt_every=ckpt_every)
    write_manifest(out, manifest)
    train(model, split, hp, val_split=val_split, val_every=val_every, out=out,
          ckpt_every=ckpt_every)
    return out
