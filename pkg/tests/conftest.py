from os import getenv

import numpy as np
import pytest

from mixsegdec.datasets import DatasetSplit, Sample, load_dataset
from mixsegdec.losses import SupervisionTier
from mixsegdec.model import ModelConfig
from mixsegdec.synth import SynthConfig, generate_benchmark

BENCH = getenv("MIXSEGDEC_BENCH", "") not in ("", "0")
#: smallest input the network accepts (three + three poolings)
TOY = 64


def make_split(n_pos, n_neg, size=TOY, name="toy", mask_pixels=5):
    """in-memory split; positives get a small square mask in the top-left corner"""
    samples = []
    for i in range(n_pos + n_neg):
        label = int(i < n_pos)
        image = np.full((size, size, 1), 0.5, dtype=np.float32)
        mask = None
        if label:
            mask = np.zeros((size, size), dtype=np.uint8)
            mask[2:2 + mask_pixels, 2:2 + mask_pixels] = 1
            image[mask > 0] = 1.0
        samples.append(
            Sample(f"{name}-{i:03d}", image, label, mask,
                   SupervisionTier.POSITIVE_PIXEL_LABELED if label else SupervisionTier.NEGATIVE))
    return DatasetSplit(tuple(samples), name=name)


@pytest.fixture
def split_factory():
    return make_split


@pytest.fixture
def toy_config():
    return ModelConfig(input_channels=1, input_height=TOY, input_width=TOY)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_benchmark(
        SynthConfig(size=TOY, train_pos=4, train_neg=8, test_pos=3, test_neg=5, seed=1), root,
        progress=False)
    return root


@pytest.fixture(scope="session")
def synth_train(synth_root):
    return load_dataset("synth", synth_root, "train", progress=False)


@pytest.fixture(scope="session")
def synth_test(synth_root):
    return load_dataset("synth", synth_root, "test", progress=False)


@pytest.fixture(scope="session")
def bench():
    if not BENCH:
        pytest.skip("long synthetic benchmarks disabled (set MIXSEGDEC_BENCH=1)")


def _bench_root(tmp_path_factory, difficulty):
    root = tmp_path_factory.mktemp(f"bench-{difficulty}")
    generate_benchmark(SynthConfig(difficulty=difficulty, seed=0), root, progress=False)
    return root


@pytest.fixture(scope="session")
def bench_easy(bench, tmp_path_factory):
    root = _bench_root(tmp_path_factory, "easy")
    return (load_dataset("synth", root, "train", progress=False),
            load_dataset("synth", root, "test", progress=False))


@pytest.fixture(scope="session")
def bench_hard(bench, tmp_path_factory):
    root = _bench_root(tmp_path_factory, "hard")
    return (load_dataset("synth", root, "train", progress=False),
            load_dataset("synth", root, "test", progress=False))
