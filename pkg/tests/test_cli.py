import pytest
import yaml

from mixsegdec.cli import main
from mixsegdec.utils import read_csv, read_manifest

#: quick runs on the session toy benchmark (bs > 1 for batch norm at 64x64)
FAST = ["--epochs", "1", "--bs", "2"]


def test_help(capsys):
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert "--no-grad-stop" in out
    assert "None:int" not in out
    assert main(["synth", "--version"]) == 0
    assert main([]) == 2


def test_completion(capsys):
    assert main(["completion", "bash"]) == 0
    assert "mixsegdec" in capsys.readouterr().out


def test_dry_run(capsys):
    assert main(["train", "--dry-run", "--epochs", "3", "--no-grad-stop"]) == 0
    res = yaml.safe_load(capsys.readouterr().out)
    assert res['command'] == "train"
    assert res['options']['epochs'] == 3
    assert res['options']['no_grad_stop'] is True
    assert res['options']['lr'] is None


def test_usage_errors(tmp_path):
    assert main(["train", "--dataset", "mvtec"]) == 2
    assert main(["train", "--dataset", "synth"]) == 2 # no --root
    assert main(["eval"]) == 2
    assert main(["train", "--root", str(tmp_path), "--size", "big"]) == 2
    assert main(["sweep", "--root", str(tmp_path), "--seeds", "a,b"]) == 2
    assert main(["ablate", "--root", str(tmp_path), "--modes", "FS,XS"]) == 2


def test_failures(tmp_path):
    assert main(["synth", "--easy", "--hard", "--out", str(tmp_path)]) == 1
    assert main(["synth", "--size", "100", "--out", str(tmp_path)]) == 1
    assert main(["train", "--root", str(tmp_path / "missing")]) == 1
    assert main(["report", str(tmp_path)]) == 1


@pytest.mark.timeout(120)
def test_synth(tmp_path, capsys):
    out = tmp_path / "bench"
    assert main([
        "synth", "--hard", "--size", "64", "--train-pos", "2", "--train-neg", "3", "--test-pos",
        "1", "--test-neg", "2", "--seed", "5", "--out",
        str(out)]) == 0
    assert capsys.readouterr().out.strip() == str(out / "manifest.yaml")
    manifest = read_manifest(out)
    assert manifest['config']['difficulty'] == "hard"
    assert len(manifest['subsets']['test']['samples']) == 3


@pytest.mark.timeout(900)
def test_train_eval_report(tmp_path, synth_root):
    run = tmp_path / "train"
    assert main(["train", "--root", str(synth_root), "--out", str(run), "--N", "2"] + FAST) == 0
    manifest = read_manifest(run)
    assert manifest['preset'] == "synth"
    assert manifest['options']['N'] == 2
    assert manifest['hyperparams']['n_ep'] == 1
    assert manifest['counts'] == {'positives': 4, 'negatives': 8, 'N': 2}
    for name in ("checkpoint.pt", "history.csv"):
        assert (run / name).is_file()

    assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"), "--no-plots"]) == 0
    summary = read_manifest(run / "eval-test" / "summary.yaml")
    assert summary['n'] == 8
    assert 0 <= summary['AP'] <= 1
    assert len(read_csv(run / "eval-test" / "scores.csv")) == 8

    assert main([
        "eval", "--checkpoint",
        str(run / "checkpoint.pt"), "--threshold", "best_f1", "--out",
        str(tmp_path / "best")]) == 0
    assert read_manifest(tmp_path / "best" / "summary.yaml")['policy'] == "best_f1"
    assert (tmp_path / "best" / "pr_curve.png").is_file()
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"), "--threshold", "x"]) == 2
    for fmt in ("ksdd", "severstal"): # no held-out subset
        assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"), "--dataset", fmt]) == 2

    assert main(["report", str(tmp_path), "--no-plots"]) == 0
    table = read_csv(tmp_path / "reports.csv")
    assert sorted(row['run'] for row in table) == ["best", "train/eval-test"]
    best = next(row for row in table if row['run'] == "best")
    assert float(best['F1']) == pytest.approx(float(best['best_F1']))


@pytest.mark.timeout(900)
def test_reproducible(tmp_path, synth_root):
    argv = ["train", "--root", str(synth_root), "--seed", "3"] + FAST
    for name in ("a", "b"):
        assert main(argv + ["--out", str(tmp_path / name)]) == 0
    assert main(["train", "--config", str(tmp_path / "a" / "manifest.yaml"), "--out",
                 str(tmp_path / "c")]) == 0
    for name in ("manifest.yaml", "history.csv"):
        ref = (tmp_path / "a" / name).read_bytes()
        assert (tmp_path / "b" / name).read_bytes() == ref, name
        assert (tmp_path / "c" / name).read_bytes() == ref, name


@pytest.mark.timeout(900)
def test_crossval(tmp_path, synth_root):
    out = tmp_path / "cv"
    assert main(["crossval", "--dataset", "synth", "--root", str(synth_root), "--folds", "2",
                 "--out", str(out)] + FAST) == 0
    assert [row['fold'] for row in read_csv(out / "folds.csv")] == ["0", "1"]
    summary = read_manifest(out / "summary.yaml")
    assert summary['folds'] == 2
    assert 0 <= summary['AP'] <= 1


@pytest.mark.timeout(900)
def test_ablate(tmp_path, synth_root):
    out = tmp_path / "ablate"
    assert main(["ablate", "--root", str(synth_root), "--modes", "WS", "--out", str(out)] +
                FAST) == 0
    table = read_csv(out / "ablation.csv")
    assert [row['mode'] for row in table] == ["WS", "WS"]
    assert {row['distance_transform'] for row in table} == {"N/A"}
    assert read_manifest(out)['modes'] == ["WS"]


@pytest.mark.timeout(900)
def test_sweep(tmp_path, synth_root):
    out = tmp_path / "sweep"
    assert main(["sweep", "--root", str(synth_root), "--N-values", "0,all", "--seeds", "0",
                 "--out", str(out)] + FAST) == 0
    assert [row['N'] for row in read_csv(out / "sweep_median.csv")] == ["0", "4"]
    assert len(read_csv(out / "sweep.csv")) == 2
