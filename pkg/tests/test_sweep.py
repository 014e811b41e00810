import pytest

from mixsegdec.sweep import SweepResult, parse_n_values, supervision_sweep
from mixsegdec.train import Hyperparams, TrainHistory
from mixsegdec.utils import UsageError


def test_parse_n_values():
    assert parse_n_values("0,25%,all", 40) == [0, 10, 40]
    assert parse_n_values("all, 5 ,5", 8) == [5, 8]
    for text in ("", "x", "9", "-1", "200%"):
        with pytest.raises(UsageError):
            parse_n_values(text, 8)


def test_median():
    res = SweepResult([(0, 0, 0.5), (0, 1, 0.7), (0, 2, 0.6), (4, 0, 0.9), (4, 1, 1.0)])
    assert res.median() == pytest.approx({0: 0.6, 4: 0.95})


@pytest.mark.timeout(600)
def test_sweep(tmp_path, split_factory):
    hp = Hyperparams(n_ep=1, lr=0.01, bs=2)
    res = supervision_sweep(split_factory(2, 2), split_factory(2, 2, name="test"), hp, [0, 2, 5],
                            [0, 1], out=tmp_path, progress=False)
    # N beyond the available positives is clamped
    assert [(N, seed) for N, seed, _ in res.rows] == [(0, 0), (0, 1), (2, 0), (2, 1), (2, 0),
                                                    (2, 1)]
    assert all(0 <= ap <= 1 for *_, ap in res.rows)
    assert (tmp_path / "N0-seed1" / "history.csv").is_file()
    assert sorted(res.median()) == [0, 2]


@pytest.mark.timeout(600)
def test_sweep_weak_point(tmp_path, split_factory):
    hp = Hyperparams(n_ep=1, lr=0.01, bs=2, dynamic_balancing=True)
    supervision_sweep(split_factory(2, 2), split_factory(2, 2, name="test"), hp, [0, 2], [0],
                      out=tmp_path, progress=False)
    # constant balance without pixel labels, dynamic (1 at epoch 0) otherwise
    for N, lam in ((0, 0.5), (2, 1.0)):
        history = TrainHistory.read_csv(tmp_path / f"N{N}-seed0" / "history.csv")
        assert history.column("lambda") == [lam]
