import json
import math

import numpy as np
import pytest

from finessl.cli import main
from finessl.embedstore import read_emb1
from finessl.trainer import read_report_jsonl


def _gen(tmp_path, name="d.emb1", seed=1, extra=()):
    out = tmp_path / name
    code = main([
        "gen", "blobs", "--classes", "3", "--dim", "6", "--labeled", "4",
        "--unlabeled", "30", "--sep", "6", "--seed", str(seed), "--out", str(out),
        *extra,
    ])
    assert code == 0
    return out


def _config(tmp_path, lines):
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


FAST = [
    "[train]",
    "epochs = 2",
    "steps_per_epoch = 8",
    "batch_b = 4",
    "# default strategy is finessl",
]


def test_gen_blobs_roundtrip(tmp_path):
    out = _gen(tmp_path)
    ds = read_emb1(out)
    assert ds.num_classes == 3
    assert int(np.sum(ds.labels >= 0)) == 12


def test_gen_rejects_zero_labeled(tmp_path, capsys):
    code = main([
        "gen", "blobs", "--classes", "3", "--dim", "6", "--labeled", "0",
        "--unlabeled", "30", "--out", str(tmp_path / "x.emb1"),
    ])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "labeled" in err


def test_gen_deterministic_bytes(tmp_path):
    a = _gen(tmp_path, "a.emb1", seed=7)
    b = _gen(tmp_path, "b.emb1", seed=7)
    assert a.read_bytes() == b.read_bytes()


def test_gen_longtail_counts(tmp_path):
    out = tmp_path / "lt.emb1"
    code = main([
        "gen", "longtail", "--classes", "10", "--dim", "6", "--n1", "20",
        "--m1", "40", "--rho", "10", "--out", str(out),
    ])
    assert code == 0
    ds = read_emb1(out)
    assert int(np.sum(ds.labels == 0)) == 20
    assert int(np.sum(ds.labels == 9)) == 2  # round(20/10)


def test_gen_test_split(tmp_path):
    out = tmp_path / "d.emb1"
    tout = tmp_path / "t.emb1"
    code = main([
        "gen", "blobs", "--classes", "3", "--dim", "6", "--labeled", "4",
        "--unlabeled", "30", "--seed", "2", "--out", str(out),
        "--test-per-class", "10", "--test-out", str(tout),
    ])
    assert code == 0
    test = read_emb1(tout)
    assert np.all(test.labels >= 0)
    assert test.n == 30


def test_train_supervised_smoke(tmp_path, capsys):
    data = _gen(tmp_path)
    cfg = _config(tmp_path, FAST + ["strategy = supervised"])
    out = tmp_path / "run"
    code = main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out)])
    assert code == 0
    records = read_report_jsonl(out / "seed_1" / "report.jsonl")
    assert len(records) == 2
    assert (out / "seed_1" / "heads.hds1").exists()
    assert (out / "manifest.json").exists()


def test_train_rejects_bad_lambda(tmp_path, capsys):
    data = _gen(tmp_path)
    cfg = _config(tmp_path, FAST + ["lambda = 1.5"])
    code = main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(tmp_path / "r")])
    assert code == 2
    assert "lambda must be in (0,1)" in capsys.readouterr().err


def test_train_rejects_unknown_key(tmp_path, capsys):
    data = _gen(tmp_path)
    cfg = _config(tmp_path, FAST + ["warmup_epochs = 3"])
    code = main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(tmp_path / "r")])
    assert code == 2
    assert "warmup_epochs" in capsys.readouterr().err


def test_train_three_seeds_manifest_and_std(tmp_path, capsys):
    data = _gen(tmp_path, extra=["--test-per-class", "20",
                                 "--test-out", str(tmp_path / "t.emb1")])
    cfg = _config(tmp_path, FAST + ["strategy = supervised"])
    out = tmp_path / "multi"
    code = main([
        "train", "--config", str(cfg), "--data", str(data),
        "--test", str(tmp_path / "t.emb1"), "--seeds", "1,2,3", "--out", str(out),
    ])
    assert code == 0
    printed = capsys.readouterr().out
    with open(out / "manifest.json") as fh:
        manifest = json.load(fh)
    assert len(manifest["reports"]) == 3
    # recompute mean/std from the emitted report files
    accs = []
    for rel in manifest["reports"].values():
        records = read_report_jsonl(out / rel)
        accs.append(records[-1]["test_acc"])
    mean = float(np.mean(accs))
    std = float(np.std(accs))
    assert manifest["mean_test_acc"] == pytest.approx(mean, abs=1e-12)
    assert manifest["std_test_acc"] == pytest.approx(std, abs=1e-12)
    assert f"{mean * 100:.2f}" in printed
    assert f"{std * 100:.2f}" in printed


def test_train_refuses_overwrite_without_force(tmp_path, capsys):
    data = _gen(tmp_path)
    cfg = _config(tmp_path, FAST + ["strategy = supervised"])
    out = tmp_path / "twice"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out),
                 "--force"]) == 0


def test_compare_two_manifests(tmp_path):
    data = _gen(tmp_path, extra=["--test-per-class", "20",
                                 "--test-out", str(tmp_path / "t.emb1")])
    runs = {}
    for strat in ("supervised", "fixmatch"):
        cfg = _config(tmp_path, FAST + [f"strategy = {strat}"])
        out = tmp_path / f"run_{strat}"
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--test", str(tmp_path / "t.emb1"), "--seeds", "1,2",
                     "--out", str(out)]) == 0
        runs[strat] = out
    csv_out = tmp_path / "cmp.csv"
    code = main(["compare", str(runs["supervised"] / "manifest.json"),
                 str(runs["fixmatch"] / "manifest.json"), "--out", str(csv_out)])
    assert code == 0
    lines = csv_out.read_text().strip().splitlines()
    assert len(lines) == 3  # header + 2 strategies
    assert lines[1].startswith("supervised,")
    assert lines[2].startswith("fixmatch,")
    # numbers equal those recomputed from the source reports
    for line, strat in ((lines[1], "supervised"), (lines[2], "fixmatch")):
        with open(runs[strat] / "manifest.json") as fh:
            manifest = json.load(fh)
        accs = [read_report_jsonl(runs[strat] / rel)[-1]["test_acc"]
                for rel in manifest["reports"].values()]
        acc_mean = float(line.split(",")[1])
        assert acc_mean == pytest.approx(float(np.mean(accs)), abs=1e-6)


def test_compare_rejects_mismatched_datasets(tmp_path, capsys):
    d1 = _gen(tmp_path, "d1.emb1", seed=1)
    d2 = _gen(tmp_path, "d2.emb1", seed=2)
    cfg = _config(tmp_path, FAST + ["strategy = supervised"])
    outs = []
    for name, data in (("r1", d1), ("r2", d2)):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(out)]) == 0
        outs.append(out / "manifest.json")
    code = main(["compare", str(outs[0]), str(outs[1])])
    assert code == 2
    assert "different datasets" in capsys.readouterr().err


def test_compare_needs_two_manifests(tmp_path, capsys):
    code = main(["compare", str(tmp_path / "only.json")])
    assert code == 2


def test_cli_parallel_seeds_match_sequential(tmp_path):
    data = _gen(tmp_path)
    cfg = _config(tmp_path, FAST + ["strategy = supervised"])
    seq = tmp_path / "seq"
    par = tmp_path / "par"
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--seeds", "1,2", "--out", str(seq)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--seeds", "1,2", "--out", str(par), "--parallel"]) == 0
    for seed in (1, 2):
        a = (seq / f"seed_{seed}" / "report.jsonl").read_bytes()
        b = (par / f"seed_{seed}" / "report.jsonl").read_bytes()
        assert a == b
