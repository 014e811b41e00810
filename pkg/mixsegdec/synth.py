"""Generate a synthetic surface-defect benchmark

Usage:
  synth [options]

Options:
  --out DIR  : Output directory (default: $MIXSEGDEC_OUT/synth-<tier>-seed<seed>)
  --easy  : High-contrast defects (default tier)
  --hard  : Low-contrast defects
  --size PIXELS  : Image side length (multiple of 64) [default: 128:int]
  --train-pos COUNT  : Defective training images [default: 40:int]
  --train-neg COUNT  : Defect-free training images [default: 200:int]
  --test-pos COUNT  : Defective test images [default: 20:int]
  --test-neg COUNT  : Defect-free test images [default: 100:int]
  --seed SEED  : Random seed [default: 0:int]
"""
__all__ = [
    "DefectSpec", "SynthConfig", "DIFFICULTY", "generate_background", "inject_defect",
    "generate_benchmark", "run"]
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from tqdm.contrib.concurrent import thread_map

from .model import DIVISOR
from .utils import MANIFEST, cpu_count, run_dir, to_plain, write_manifest

log = logging.getLogger(__name__)
#: contrast range per difficulty tier
DIFFICULTY = {'easy': (0.5, 1.0), 'hard': (0.1, 0.3)}
KINDS = ('scratch', 'blob')
SUBSETS = ('train', 'test')
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class DefectSpec:
    kind: str = 'scratch'
    contrast: float = 0.5
    thickness: float = 1.0 # scratch
    radius: float = 4.0    # blob
    length: float = 20.0   # scratch
    orientation: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defect kind '{self.kind}'; choices: {KINDS}")
        if not 0 < self.contrast <= 1:
            raise ValueError(f"contrast must be in (0, 1], got {self.contrast}")
        for name in ("thickness", "radius", "length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 128
    train_pos: int = 40
    train_neg: int = 200
    test_pos: int = 20
    test_neg: int = 100
    difficulty: str = 'easy'
    seed: int = 0
    contrast: Optional[Tuple[float, float]] = None # overrides `difficulty`

    def __post_init__(self):
        if self.size <= 0 or self.size % DIVISOR:
            raise ValueError(f"size must be a positive multiple of {DIVISOR}, got {self.size}")
        for name in ("train_pos", "train_neg", "test_pos", "test_neg"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.contrast is None and self.difficulty not in DIFFICULTY:
            raise ValueError(f"unknown difficulty '{self.difficulty}'")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"contrast range ({lo}, {hi}) not within (0, 1]")

    @property
    def contrast_range(self) -> Tuple[float, float]:
        return tuple(self.contrast) if self.contrast is not None else DIFFICULTY[self.difficulty]

    def counts(self, subset):
        return getattr(self, f"{subset}_pos"), getattr(self, f"{subset}_neg")


def generate_background(seed: int, height: int, width: int) -> np.ndarray:
    """brushed-metal-like band-limited noise in [0, 1]"""
    rng = np.random.default_rng(seed)
    grain = gaussian_filter(rng.standard_normal((height, width)), sigma=1.0, mode='wrap')
    streaks = gaussian_filter(rng.standard_normal((height, width)), sigma=(0.7, 12.0),
                              mode='wrap')
    shading = gaussian_filter(rng.standard_normal((height, width)), sigma=height / 8,
                              mode='wrap')
    tex = sum(0.5 * x / (x.std() or 1) for x in (grain, streaks)) + shading / (shading.std() or 1)
    level = rng.uniform(0.4, 0.6)
    return np.clip(level + 0.04*tex, 0, 1).astype(np.float32)


def _segment_distance(xs, ys, x0, y0, x1, y1):
    ex, ey = x1 - x0, y1 - y0
    t = np.clip(((xs-x0) * ex + (ys-y0) * ey) / max(ex*ex + ey*ey, 1e-12), 0, 1)
    return np.hypot(xs - (x0 + t*ex), ys - (y0 + t*ey))


def inject_defect(image: np.ndarray, spec: DefectSpec, seed: int):
    """
    Draw one defect at a seeded random position.
    Returns `(image, mask)`: the modified copy and the binary mask of the pixels changed.
    """
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[:h, :w].astype(np.float64)
    cos, sin = np.cos(spec.orientation), np.sin(spec.orientation)
    if spec.kind == 'scratch':
        half = spec.thickness / 2 + 0.25
        dx, dy = spec.length / 2 * cos, spec.length / 2 * sin
        ext_x, ext_y = abs(dx) + half, abs(dy) + half
    else:
        half = None
        ext_x = ext_y = spec.radius
    if 2*ext_x > w - 1 or 2*ext_y > h - 1:
        raise ValueError(f"{spec.kind} of extent ({2 * ext_x:.1f}, {2 * ext_y:.1f})"
                         f" does not fit a {w}x{h} image")
    cx = rng.uniform(ext_x, w - 1 - ext_x)
    cy = rng.uniform(ext_y, h - 1 - ext_y)
    if spec.kind == 'scratch':
        dist = _segment_distance(xs, ys, cx - dx, cy - dy, cx + dx, cy + dy)
        mask = dist <= half
        profile = 1 - 0.5 * dist / half
    else:
        cx, cy = np.round(cx), np.round(cy) # centre pixel always covered
        aspect = rng.uniform(0.6, 1.0)
        u = ((xs-cx) * cos + (ys-cy) * sin) / spec.radius
        v = (-(xs-cx) * sin + (ys-cy) * cos) / (spec.radius * aspect)
        dist2 = u*u + v*v
        mask = dist2 <= 1
        profile = 1 - 0.5*dist2
    polarity = rng.choice((-1.0, 1.0))
    delta = polarity * spec.contrast * np.where(mask, profile, 0)
    if img.ndim == 3:
        delta = delta[..., None]
    out = np.clip(img + delta, 0, 1).astype(np.float32)
    return out, mask.astype(np.uint8)


def _random_spec(rng: np.random.Generator, config: SynthConfig) -> DefectSpec:
    size = config.size
    kind = KINDS[rng.integers(len(KINDS))]
    return DefectSpec(kind=kind, contrast=float(rng.uniform(*config.contrast_range)),
                      thickness=float(rng.uniform(1, 3)),
                      radius=float(rng.uniform(2, max(2.5, size * 0.08))),
                      length=float(rng.uniform(0.15 * size, 0.5 * size)),
                      orientation=float(rng.uniform(0, np.pi)))


def _save_png(arr: np.ndarray, fout: Path):
    Image.fromarray(np.round(np.squeeze(arr) * 255).astype(np.uint8)).save(fout)


def generate_benchmark(config: SynthConfig, out, progress: bool = True) -> dict:
    """write the SYNTH layout (`<subset>/images`, `<subset>/masks`, `manifest.yaml`)"""
    out = Path(out)
    manifest = {
        'format': 'synth', 'version': MANIFEST_VERSION, 'config': asdict(config),
        'subsets': {}}
    for sub_idx, subset in enumerate(SUBSETS):
        n_pos, n_neg = config.counts(subset)
        labels = np.random.default_rng([config.seed, sub_idx]).permutation([1] * n_pos +
                                                                          [0] * n_neg)
        try:
            (out / subset / "images").mkdir(parents=True, exist_ok=True)
            (out / subset / "masks").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create benchmark folders under {out}: {exc}") from exc

        def make(i, label, subset=subset, sub_idx=sub_idx):
            sid = f"{subset}-{i:05d}"
            seeds = np.random.SeedSequence([config.seed, sub_idx, i]).generate_state(3)
            image = generate_background(int(seeds[0]), config.size, config.size)
            rec = {'id': sid, 'label': int(label)}
            if label:
                spec = _random_spec(np.random.default_rng(seeds[1]), config)
                image, mask = inject_defect(image, spec, int(seeds[2]))
                rec['defect'] = {**asdict(spec), 'pixels': int(mask.sum())}
                _save_png(mask, out / subset / "masks" / f"{sid}.png")
            _save_png(image, out / subset / "images" / f"{sid}.png")
            return rec

        records = thread_map(make, range(len(labels)), labels.tolist(),
                             max_workers=cpu_count(), desc=f"synth {subset}",
                             disable=not progress, leave=False)
        manifest['subsets'][subset] = {
            'positives': n_pos, 'negatives': n_neg, 'samples': records}
        log.info("%s: %d positives, %d negatives", subset, n_pos, n_neg)
    write_manifest(out, manifest)
    log.info("benchmark written to %s", out)
    return to_plain(manifest)


def run(out=None, easy=False, hard=False, size=128, train_pos=40, train_neg=200, test_pos=20,
        test_neg=100, seed=0):
    if easy and hard:
        raise ValueError("--easy and --hard are mutually exclusive")
    difficulty = 'hard' if hard else 'easy'
    config = SynthConfig(size=size, train_pos=train_pos, train_neg=train_neg,
                         test_pos=test_pos, test_neg=test_neg, difficulty=difficulty, seed=seed)
    out = run_dir(out, f"synth-{difficulty}-seed{seed}")
    generate_benchmark(config, out)
    return out / MANIFEST
