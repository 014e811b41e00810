import csv
import logging
import random
from enum import Enum
from os import getenv
from pathlib import Path

import numpy as np
import torch
import yaml

try:
    from os import cpu_count
except ImportError:
    try:
        from multiprocessing import cpu_count
    except ImportError:

        def cpu_count():
            return 4


log = logging.getLogger(__name__)
ENV_OUT = "MIXSEGDEC_OUT"
MANIFEST = "manifest.yaml"


class UsageError(ValueError):
    """bad or missing command-line option"""


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def out_root() -> Path:
    """default output root, overridable via `$MIXSEGDEC_OUT`"""
    return Path(getenv(ENV_OUT, "runs")).expanduser()


def run_dir(out=None, *parts) -> Path:
    """`out` if given, else a deterministic folder under `out_root()`"""
    res = Path(out) if out else out_root().joinpath(*map(str, parts))
    res.mkdir(parents=True, exist_ok=True)
    return res


def to_plain(value):
    """yaml-safe copy (tuples, paths, enums, numpy scalars)"""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Enum):
        return value.value
    return value


def write_manifest(folder, manifest: dict, name=MANIFEST) -> Path:
    fout = Path(folder) / name
    fout.write_text(yaml.safe_dump(to_plain(manifest), sort_keys=True, default_flow_style=False))
    log.info("manifest:%s", fout)
    return fout


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found:{path}")
    return yaml.safe_load(path.read_text()) or {}


def write_csv(fout, header, rows) -> Path:
    fout = Path(fout)
    fout.parent.mkdir(parents=True, exist_ok=True)
    with open(fout, "w", newline="") as fd:
        writer = csv.writer(fd, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    log.debug("wrote:%s", fout)
    return fout


def read_csv(fin):
    with open(fin, newline="") as fd:
        return list(csv.DictReader(fd))
