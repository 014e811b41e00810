"""Mixed-supervision surface-defect detection"""
from pathlib import Path

try:
    from importlib.metadata import PackageNotFoundError, metadata
except ImportError: # py<3.8
    from importlib_metadata import PackageNotFoundError, metadata

# version detector. Precedence: installed dist, git, 'UNKNOWN'
try:
    from ._dist_ver import __version__
except ImportError:
    try:
        from setuptools_scm import get_version

        __version__ = get_version(root="..", relative_to=__file__)
    except (ImportError, LookupError):
        __version__ = "UNKNOWN"

try:
    __licence__ = metadata("mixsegdec")["License"]
except PackageNotFoundError:
    try:
        __licence__ = (Path(__file__).parent.parent / "LICENCE.md").read_text()
    except FileNotFoundError:
        __licence__ = "MPL-2.0"

from .datasets import *
from .losses import *
from .metrics import *
from .model import *
from .synth import (DIFFICULTY, DefectSpec, SynthConfig, generate_background,
                    generate_benchmark, inject_defect)
from .train import (DivergenceError, Hyperparams, PRESETS, TrainHistory, preset_hyperparams,
                    train_step)
from .crossval import CrossvalResult
from .ablate import AblationRow, run_ablation
from .sweep import SweepResult, supervision_sweep
