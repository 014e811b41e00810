"""Dataset adapters

Loads DAGM, KolektorSDD, KolektorSDD2, Severstal Steel and the synthetic benchmark
into a `DatasetSplit`, and provides the supervision assignment, the undersampling
epoch scheduler and stratified folds.
"""
__all__ = [
    "DatasetError", "FormatError", "Sample", "DatasetSplit", "FORMATS", "load_dataset",
    "has_test_subset", "decode_rle", "encode_rle", "parse_rle", "ellipse_to_mask",
    "pad_to_multiple", "assign_supervision", "balanced_epoch_indices", "make_folds"]
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml
from PIL import Image
from sklearn.model_selection import StratifiedKFold
from tqdm.contrib.concurrent import thread_map

from .losses import SupervisionTier
from .model import DIVISOR
from .utils import cpu_count

log = logging.getLogger(__name__)
Resampling = getattr(Image, "Resampling", Image) # Pillow<9.1
IMAGE_EXT = ('.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')
#: per-format defaults; `size` is (height, width) before padding
FORMATS = {
    'dagm': {'channels': 1, 'size': None, 'subsets': ('train', 'test')},
    'ksdd': {'channels': 1, 'size': (1408, 512), 'subsets': ()},
    'ksdd2': {'channels': 3, 'size': (640, 232), 'subsets': ('train', 'test')},
    # only the labelled Kaggle `train_images`
    'severstal': {'channels': 1, 'size': None, 'subsets': ('train',)},
    'synth': {'channels': 1, 'size': None, 'subsets': ('train', 'test')}}
SEVERSTAL_CLASS = 3


class DatasetError(ValueError):
    pass


class FormatError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    image: np.ndarray # H x W x C float32 in [0, 1]
    label: int        # 1: defective
    mask: Optional[np.ndarray] = None
    tier: SupervisionTier = SupervisionTier.NEGATIVE
    pad: Tuple[int, int] = (0, 0) # (bottom, right)

    def __post_init__(self):
        if self.tier is SupervisionTier.POSITIVE_PIXEL_LABELED and self.mask is None:
            raise DatasetError(f"{self.id}: pixel-labelled sample without a mask")

    @property
    def target_mask(self) -> np.ndarray:
        """ground truth, all-zero for negatives"""
        if self.label == 0 or self.mask is None:
            return np.zeros(self.image.shape[:2], dtype=np.uint8)
        return self.mask


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    samples: Tuple[Sample, ...]
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def positives(self) -> List[int]:
        return [i for i, s in enumerate(self.samples) if s.label]

    @property
    def negatives(self) -> List[int]:
        return [i for i, s in enumerate(self.samples) if not s.label]

    @property
    def N(self) -> int:
        return sum(s.tier is SupervisionTier.POSITIVE_PIXEL_LABELED for s in self.samples)

    @property
    def N_all(self) -> int:
        return len(self.positives)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) != 1:
            raise DatasetError(f"{self.name}: images have different shapes {sorted(shapes)}")
        return shapes.pop()

    def subset(self, indices: Sequence[int], name=None) -> "DatasetSplit":
        return replace(self, samples=tuple(self.samples[i] for i in indices),
                       name=self.name if name is None else name)

    def counts(self):
        return {'positives': self.N_all, 'negatives': len(self.negatives), 'N': self.N}


# ----------------------------------------------------------------------
def parse_rle(text: str) -> List[Tuple[int, int]]:
    """space-separated "start length ..." into pairs"""
    tokens = (text or "").split()
    if len(tokens) % 2:
        raise FormatError(f"odd number of RLE tokens ({len(tokens)})")
    try:
        values = list(map(int, tokens))
    except ValueError as exc:
        raise FormatError(f"non-integer RLE token: {exc}") from exc
    return list(zip(values[0::2], values[1::2]))


def decode_rle(runs: Sequence[Tuple[int, int]], height: int, width: int) -> np.ndarray:
    """1-indexed (start, length) runs over column-major pixel order"""
    flat = np.zeros(height * width, dtype=np.uint8)
    for start, length in runs:
        if start < 1 or length < 0 or start - 1 + length > flat.size:
            raise FormatError(
                f"run ({start}, {length}) exceeds {height}x{width}={flat.size} pixels")
        flat[start - 1:start - 1 + length] = 1
    return flat.reshape(width, height).T.copy()


def encode_rle(mask: np.ndarray) -> List[Tuple[int, int]]:
    flat = np.concatenate([[0], (np.asarray(mask).T.ravel() > 0).astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[0::2], edges[1::2]
    return [(int(s) + 1, int(e - s)) for s, e in zip(starts, ends)]


def ellipse_to_mask(center_x: float, center_y: float, semi_major: float, semi_minor: float,
                    rotation: float, height: int, width: int) -> np.ndarray:
    """pixel (r, c) is set iff its centre (x=c, y=r) lies inside or on the rotated ellipse"""
    if semi_major <= 0 or semi_minor <= 0:
        raise ValueError(f"semi-axes must be positive, got ({semi_major}, {semi_minor})")
    rows, cols = np.mgrid[:height, :width]
    dx, dy = cols - center_x, rows - center_y
    cos, sin = np.cos(rotation), np.sin(rotation)
    u = (dx*cos + dy*sin) / semi_major
    v = (-dx*sin + dy*cos) / semi_minor
    return (u**2 + v**2 <= 1 + 1e-9).astype(np.uint8)


def pad_to_multiple(arr: np.ndarray,
                    multiple: int = DIVISOR) -> Tuple[np.ndarray, Tuple[int, int]]:
    """zero-pad the bottom/right of the first two axes"""
    h, w = arr.shape[:2]
    pad = (-h % multiple, -w % multiple)
    if pad == (0, 0):
        return arr, pad
    widths = [(0, pad[0]), (0, pad[1])] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, widths), pad


# ----------------------------------------------------------------------
def _read_image(path: Path, channels: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable image:{path}: {exc}") from exc
    return arr[..., None] if arr.ndim == 2 else arr


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable mask:{path}: {exc}") from exc
    return (arr > 0).astype(np.uint8)


def _resize(image: np.ndarray, mask: Optional[np.ndarray], size: Tuple[int, int]):
    """antialiased image resampling; masks stay positive wherever any source pixel was"""
    h, w = size
    if image.shape[:2] == (h, w):
        return image, mask
    chans = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(image[..., c])).resize((w, h),
                                                                         Resampling.BILINEAR))
        for c in range(image.shape[2])]
    image = np.clip(np.stack(chans, axis=-1), 0, 1).astype(np.float32)
    if mask is not None:
        box = Image.fromarray(mask.astype(np.float32)).resize((w, h), Resampling.BOX)
        mask = (np.asarray(box) > 0).astype(np.uint8)
    return image, mask


def _image_files(folder: Path):
    return sorted(f for f in folder.iterdir()
                  if f.is_file() and f.suffix.lower() in IMAGE_EXT)


def _subset_dir(root: Path, subset: Optional[str]) -> Path:
    if subset is None:
        return root
    for name in (subset, subset.capitalize(), subset.upper()):
        if (root / name).is_dir():
            return root / name
    raise DatasetError(f"subset '{subset}' not found under {root}")


def _records_dagm(root: Path, subset):
    """(id, image path, mask-or-callable) for a DAGM class folder"""
    folder = _subset_dir(root, subset)
    flabels = folder / "Label" / "Labels.txt"
    if not flabels.is_file():
        raise DatasetError(f"missing annotation file:{flabels}")
    ellipses = {}
    for lineno, line in enumerate(flabels.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        tokens = line.split()
        if len(tokens) != 6:
            raise DatasetError(f"{flabels}:{lineno}: expected 6 fields, got {len(tokens)}")
        try:
            ellipses[tokens[0]] = tuple(map(float, tokens[1:]))
        except ValueError as exc:
            raise DatasetError(f"{flabels}:{lineno}: {exc}") from exc
    files = _image_files(folder)
    missing = set(ellipses) - {f.name for f in files}
    if missing:
        raise DatasetError(f"{flabels}: labelled images not found: {sorted(missing)}")
    for fimg in files:
        ell = ellipses.get(fimg.name)
        if ell is None:
            yield fimg.stem, fimg, None
        else:
            a, b, rot, cx, cy = ell
            yield fimg.stem, fimg, lambda shape, e=(cx, cy, a, b, rot): ellipse_to_mask(*e, *shape)


def _records_ksdd(root: Path, subset):
    items = sorted(d for d in root.iterdir() if d.is_dir())
    if not items:
        raise DatasetError(f"no item directories found under {root}")
    for item in items:
        for fimg in _image_files(item):
            if fimg.stem.endswith("_label"):
                continue
            fmask = next(iter(sorted(item.glob(f"{fimg.stem}_label.*"))), None)
            if fmask is None:
                raise DatasetError(f"missing mask for image:{fimg}")
            yield f"{item.name}/{fimg.stem}", fimg, fmask


def _records_ksdd2(root: Path, subset):
    folder = _subset_dir(root, subset)
    for fimg in _image_files(folder):
        if fimg.stem.endswith("_GT"):
            continue
        fmask = next(iter(sorted(folder.glob(f"{fimg.stem}_GT.*"))), None)
        if fmask is None:
            raise DatasetError(f"missing mask for image:{fimg}")
        yield fimg.stem, fimg, fmask


def _records_severstal(root: Path, subset, csv_name="train.csv", images="train_images"):
    fcsv, folder = root / csv_name, root / images
    if not fcsv.is_file():
        raise DatasetError(f"missing annotation file:{fcsv}")
    if not folder.is_dir():
        raise DatasetError(f"missing image directory:{folder}")
    rles, other = {}, set()
    with open(fcsv, newline="") as fd:
        reader = csv.reader(fd)
        header = next(reader, None)
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                if len(row) == 2: # legacy "ImageId_ClassId,EncodedPixels"
                    image_id, cls = row[0].rsplit("_", 1)
                    rle = row[1]
                else:
                    image_id, cls, rle = row[:3]
                cls = int(cls)
            except ValueError as exc:
                raise DatasetError(f"{fcsv}:{lineno}: malformed row {row!r}") from exc
            if not rle.strip():
                continue
            if cls == SEVERSTAL_CLASS:
                rles[image_id] = rle
            else:
                other.add(image_id)
    log.debug("%s header:%r", fcsv, header)
    for fimg in _image_files(folder):
        if fimg.name in rles:

            def mask(shape, rle=rles[fimg.name], fimg=fimg):
                try:
                    return decode_rle(parse_rle(rle), *shape)
                except FormatError as exc:
                    raise FormatError(f"{fcsv}: {fimg.name}: {exc}") from exc

            yield fimg.stem, fimg, mask
        elif fimg.name not in other:
            yield fimg.stem, fimg, None


def _records_synth(root: Path, subset):
    fman = root / "manifest.yaml"
    if not fman.is_file():
        raise DatasetError(f"missing manifest:{fman}")
    manifest = yaml.safe_load(fman.read_text())
    subset = subset or "train"
    if subset not in manifest.get('subsets', {}):
        raise DatasetError(f"{fman}: no subset '{subset}'")
    for rec in manifest['subsets'][subset]['samples']:
        fimg = root / subset / "images" / f"{rec['id']}.png"
        fmask = root / subset / "masks" / f"{rec['id']}.png" if rec['label'] else None
        yield rec['id'], fimg, fmask


READERS = {
    'dagm': _records_dagm, 'ksdd': _records_ksdd, 'ksdd2': _records_ksdd2,
    'severstal': _records_severstal, 'synth': _records_synth}


def has_test_subset(fmt: str) -> bool:
    return "test" in FORMATS.get(fmt.lower(), {}).get("subsets", ())


def _choose(indices, limit, rng):
    if limit is None or limit >= len(indices):
        return indices
    return sorted(rng.choice(indices, size=limit, replace=False).tolist())


def load_dataset(fmt: str, root, subset: Optional[str] = None, channels: Optional[int] = None,
                 size: Optional[Tuple[int, int]] = None, pad: bool = True,
                 max_positives: Optional[int] = None, max_negatives: Optional[int] = None,
                 seed: int = 0, workers: Optional[int] = None, progress: bool = True,
                 **options) -> DatasetSplit:
    """
    Load a dataset into memory.
    Args:
      fmt: one of `FORMATS` (case-insensitive)
      root: dataset folder (layout depends on `fmt`)
      subset: train/test where the format has one
      channels: 1 or 3 (default per format)
      size: (height, width) resize before padding (default per format)
      pad: zero-pad to multiples of 64
      max_positives, max_negatives: seeded subsampling
    """
    fmt = fmt.lower()
    if fmt not in READERS:
        raise ValueError(f"unknown dataset format '{fmt}'; choices: {sorted(READERS)}")
    if subset is not None and subset.lower() not in FORMATS[fmt]['subsets']:
        raise DatasetError(f"{fmt} has no '{subset}' subset"
                           f" (choices: {list(FORMATS[fmt]['subsets'])}); use folds instead")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found:{root}")
    channels = channels or FORMATS[fmt]['channels']
    size = size if size is not None else FORMATS[fmt]['size']
    records = sorted(READERS[fmt](root, subset, **options), key=lambda rec: rec[0])
    log.info("found %d %s images in %s", len(records), fmt, root)

    def load(rec):
        sid, fimg, src = rec
        image = _read_image(fimg, channels)
        if src is None:
            mask = None
        elif callable(src):
            mask = src(image.shape[:2])
        else:
            mask = _read_mask(src)
            if mask.shape != image.shape[:2]:
                raise DatasetError(f"mask shape {mask.shape} != image shape"
                                   f" {image.shape[:2]}:{src}")
        if mask is not None and not mask.any():
            mask = None # KSDD/KSDD2 negatives ship empty masks
        if size is not None:
            image, mask = _resize(image, mask, size)
        pads = (0, 0)
        if pad:
            image, pads = pad_to_multiple(image)
            if mask is not None:
                mask = pad_to_multiple(mask)[0]
        label = int(mask is not None)
        tier = SupervisionTier.POSITIVE_PIXEL_LABELED if label else SupervisionTier.NEGATIVE
        return Sample(sid, image, label, mask, tier, pads)

    samples = thread_map(load, records, max_workers=workers or cpu_count(),
                         desc=f"loading {fmt}", disable=not progress, leave=False)
    rng = np.random.default_rng(seed)
    pos = [i for i, s in enumerate(samples) if s.label]
    neg = [i for i, s in enumerate(samples) if not s.label]
    keep = sorted(_choose(pos, max_positives, rng) + _choose(neg, max_negatives, rng))
    split = DatasetSplit(tuple(samples[i] for i in keep), name=f"{fmt}:{subset or root.name}",
                         meta={'format': fmt, 'root': str(root), 'subset': subset})
    log.info("%s: %d positives, %d negatives", split.name, split.N_all, len(split.negatives))
    return split


# ----------------------------------------------------------------------
def assign_supervision(split: DatasetSplit, N: int, seed: int = 0) -> DatasetSplit:
    """keep pixel labels for `N` seeded positives, hide them for the rest"""
    if not 0 <= N <= split.N_all:
        raise ValueError(f"N={N} outside [0, N_all={split.N_all}]")
    with_mask = [i for i in split.positives if split.samples[i].mask is not None]
    if N > len(with_mask):
        raise ValueError(f"N={N} but only {len(with_mask)} positives have pixel labels")
    rng = np.random.default_rng(seed)
    chosen = set(rng.permutation(with_mask)[:N].tolist())
    samples = []
    for i, s in enumerate(split.samples):
        if not s.label:
            tier = SupervisionTier.NEGATIVE
        elif i in chosen:
            tier = SupervisionTier.POSITIVE_PIXEL_LABELED
        else:
            tier = SupervisionTier.POSITIVE_WEAK
        samples.append(s if s.tier is tier else replace(s, tier=tier))
    return replace(split, samples=tuple(samples))


def balanced_epoch_indices(split: DatasetSplit, epoch: int, seed: int = 0) -> List[int]:
    """
    All positives plus an equal number of negatives, taken as a rotating window over a
    seeded permutation of the negatives so that every negative is used about equally often.
    """
    pos, neg = split.positives, split.negatives
    if not pos:
        raise ValueError(f"{split.name}: no positive samples to balance against")
    if not neg:
        raise ValueError(f"{split.name}: no negative samples")
    order = np.random.default_rng(seed).permutation(neg)
    if len(pos) >= len(neg):
        chosen = order
    else:
        start = (epoch * len(pos)) % len(neg)
        chosen = np.take(order, np.arange(start, start + len(pos)), mode='wrap')
    indices = np.concatenate([pos, chosen])
    return np.random.default_rng([seed, epoch]).permutation(indices).tolist()


def make_folds(split: DatasetSplit, k: int, seed: int = 0):
    """`k` stratified (train, test) pairs whose test parts partition `split`"""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if k > split.N_all:
        raise ValueError(f"{k} folds but only {split.N_all} positives")
    if k > len(split.negatives):
        raise ValueError(f"{k} folds but only {len(split.negatives)} negatives")
    labels = np.array([s.label for s in split.samples])
    kfold = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [(split.subset(train, name=f"{split.name}:fold{i}:train"),
             split.subset(test, name=f"{split.name}:fold{i}:test"))
            for i, (train, test) in enumerate(kfold.split(np.zeros(len(labels)), labels))]
