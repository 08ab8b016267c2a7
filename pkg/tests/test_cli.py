import json

import numpy as np
import pytest

from lightslr.cli import main
from lightslr.features import load_spectrogram

TINY_TRAIN = ["--width", "0.25", "--max-epochs", "1", "--samples-per-class", "2", "--batch-size", "4",
              "--clip-s", "2", "--no-augment"]


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", str(root / "corpus"), "--targets", "2", "--nontargets", "2",
                 "--per-class", "5", "--seed", "1"]) == 0
    weights = root / "m.slrw"
    langs = str(root / "corpus" / "languages.txt")
    assert main(["train", "--arch", "tc_resnet14", "--train", str(root / "corpus" / "train.tsv"),
                 "--val", str(root / "corpus" / "val.tsv"), "--languages", langs,
                 "--output", str(weights)] + TINY_TRAIN) == 0
    return root, weights, langs


def test_synth_writes_manifests(workspace):
    root, _, _ = workspace
    for split in ("train", "val", "test_closed", "test_open"):
        assert (root / "corpus" / f"{split}.tsv").exists()
    assert (root / "corpus" / "languages.txt").read_text().split() == ["lang0", "lang1"]


def test_train_emits_history(workspace, tmp_path, capsys):
    root, _, langs = workspace
    out = tmp_path / "again.slrw"
    assert main(["train", "--arch", "tc_resnet14", "--train", str(root / "corpus" / "train.tsv"),
                 "--val", str(root / "corpus" / "val.tsv"), "--languages", langs,
                 "--output", str(out)] + TINY_TRAIN) == 0
    records = json_lines(capsys.readouterr().out)
    assert set(records[0]) == {"epoch", "train_loss", "val_loss", "val_err"}
    assert records[-1]["best_epoch"] == 1 and out.exists()


def test_inspect(workspace, capsys):
    _, weights, _ = workspace
    assert main(["inspect", str(weights)]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("total")
    assert main(["inspect", "--arch", "lecapat"]) == 0
    assert "lecapat" in capsys.readouterr().out


def test_predict_manifest(workspace, capsys):
    root, weights, langs = workspace
    assert main(["predict", str(weights), str(root / "corpus" / "test_open.tsv"), "--languages", langs]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4
    for line in lines:
        path, outcome, acts = line.split("\t")
        assert outcome in ("lang0", "lang1", "other")
        assert len(acts.split(",")) == 2


def test_eval_writes_csv(workspace, tmp_path, capsys):
    root, weights, langs = workspace
    csv = tmp_path / "confusion.csv"
    assert main(["eval", str(weights), str(root / "corpus" / "test_open.tsv"), "--languages", langs,
                 "--csv", str(csv)]) == 0
    record = json_lines(capsys.readouterr().out)[0]
    assert 0 <= record["err"] <= 100 and record["n_samples"] == 4
    assert len(csv.read_text().splitlines()) == 4


def test_featurize_single_wav(workspace, tmp_path):
    root, _, _ = workspace
    wav = next((root / "corpus" / "lang0").glob("*.wav"))
    assert main(["featurize", str(wav), str(tmp_path / "x.slrf")]) == 0
    spec = load_spectrogram(tmp_path / "x.slrf")
    assert spec.shape[1] == 64 and np.all(np.isfinite(spec))


def test_bench_prints_report(capsys):
    assert main(["bench", "--arch", "tc_resnet14", "--clips", "1", "--repetitions", "1", "--warmup", "0"]) == 0
    out = capsys.readouterr().out
    assert "hardware" in out and json_lines(out)[0]["rtf"] > 0


def test_openset_reports_median(workspace, capsys):
    root, _, _ = workspace
    assert main(["openset", str(root / "corpus"), "--arch", "tc_resnet14", "--seeds", "0"] + TINY_TRAIN) == 0
    records = json_lines(capsys.readouterr().out)
    assert records[0]["architecture"] == "tc_resnet14"
    assert "median_delta" in records[-1]


def test_bad_weight_file_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.slrw"
    bad.write_bytes(b"nope")
    assert main(["inspect", str(bad)]) == 1
    assert "Error" in capsys.readouterr().err


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["inspect"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
