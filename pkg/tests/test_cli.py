import json
import shutil

import pytest

from gazfusion import checkpoint
from gazfusion.cli import EXIT, main
from gazfusion.corpus import load_column_corpus, scheme_of_column_file
from gazfusion.evaluation import evaluate

SYNTH = ["--set", "vocab_size=60", "--set", "names_per_type=12", "--set", "sentences_train=80",
         "--set", "sentences_dev=20", "--set", "sentences_test=40", "--set", "filler_len_max=6"]
TRAIN = ["--set", "h=8", "--set", "d=4", "--set", "w=2", "--set", "encoder_window=2",
         "--set", "max_epochs=2", "--set", "learning_rate=0.005"]


def gaz(data_dir):
    return data_dir / "gazetteers" / "gazetteers.txt"


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--seed", "2", "--quiet"] + SYNTH) == 0
    d = root / "data"
    assert main(["train", "--out", str(root / "late"), "--train", str(d / "train.tsv"),
                 "--dev", str(d / "dev.tsv"), "--gazetteers", str(gaz(d)),
                 "--mode", "late", "--attention", "on", "--quiet"] + TRAIN) == 0
    assert main(["train", "--out", str(root / "ner"), "--train", str(d / "train.tsv"),
                 "--mode", "ner_only", "--quiet"] + TRAIN) == 0
    return root


def test_synth_and_train_record_run_metadata(workspace):
    meta = json.loads((workspace / "late" / "run.json").read_text())
    assert meta["command"] == "train" and meta["seed"] == 0
    assert set(meta["format_versions"]) == {"run", "checkpoint"}
    assert any(k.endswith("train.tsv") for k in meta["inputs"])
    assert all(len(v) == 64 for v in meta["inputs"].values())
    model = checkpoint.load(workspace / "late" / "model.ckpt")
    assert meta["checkpoint_sha256"] == checkpoint.digest(model)
    assert model.config.mode == "late" and model.config.attention
    assert "h=8" in (workspace / "late" / "run.cfg").read_text().splitlines()
    assert len((workspace / "late" / "train_log.jsonl").read_text().splitlines()) == 2
    assert not (workspace / "late" / ".lock").exists()


def test_predict_then_eval_matches_library_scores(workspace, capsys, tmp_path):
    d = workspace / "data"
    code, out, _ = run_cli(capsys, "predict", "--out", tmp_path / "p", "--model",
                           workspace / "late" / "model.ckpt", "--input", d / "test.tsv",
                           "--gazetteers", gaz(d), "--quiet")
    assert code == 0
    preds = tmp_path / "p" / "predictions.tsv"
    scheme = scheme_of_column_file(d / "test.tsv")
    ref = evaluate(load_column_corpus(preds, scheme), load_column_corpus(d / "test.tsv", scheme))
    code, out, _ = run_cli(capsys, "eval", "--out", tmp_path / "e", "--pred", preds,
                           "--gold", d / "test.tsv", "--quiet")
    assert code == 0
    rec = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert rec == ref.record()
    assert out.strip().splitlines()[-1].split()[0] == "micro"
    code, _, _ = run_cli(capsys, "eval", "--out", tmp_path / "u", "--pred", preds,
                         "--gold", d / "test.tsv", "--seen", d / "train.tsv", "--quiet")
    assert code == 0
    assert json.loads((tmp_path / "u" / "eval.json").read_text())["filter"] == "unseen"
    code, _, _ = run_cli(capsys, "eval", "--out", tmp_path / "q", "--pred", preds,
                         "--gold", d / "test.tsv", "--pool", d / "held_out_mentions.tsv",
                         "--quiet")
    assert code == 0


def test_predict_raw_text(workspace, capsys, tmp_path):
    raw = tmp_path / "in.txt"
    raw.write_text("hello there\n\nsecond line here\n", encoding="utf-8")
    code, _, _ = run_cli(capsys, "predict", "--out", tmp_path / "p", "--model",
                         workspace / "ner" / "model.ckpt", "--input", raw, "--quiet")
    assert code == 0
    blocks = (tmp_path / "p" / "predictions.tsv").read_text().strip().split("\n\n")
    assert len(blocks) == 2 and len(blocks[1].splitlines()) == 3


def test_gazette_edit_is_invisible_to_unplugged_model(workspace, capsys, tmp_path):
    d = workspace / "data"
    shutil.copytree(d / "gazetteers", tmp_path / "gaz")
    manifest = tmp_path / "gaz" / "gazetteers.txt"
    args = ["--model", workspace / "late" / "model.ckpt", "--input", d / "test.tsv",
            "--gazetteers", manifest, "--quiet"]
    assert run_cli(capsys, "predict", "--out", tmp_path / "a", "--unplug", *args)[0] == 0
    assert run_cli(capsys, "predict", "--out", tmp_path / "b", *args)[0] == 0

    tokens = [l.split("\t")[0] for l in (d / "test.tsv").read_text().splitlines() if l][:40]
    entries = [" ".join(tokens[i:i + 2]) for i in range(0, 40, 2)]
    code, out, _ = run_cli(capsys, "gazette", "add", "--gazetteers", manifest, "--name", "MED",
                           *sum((["--entry", e] for e in entries), []))
    assert code == 0
    name, before, after = out.split()
    assert name == "MED" and int(after) > int(before)
    assert run_cli(capsys, "predict", "--out", tmp_path / "c", "--unplug", *args)[0] == 0
    assert run_cli(capsys, "predict", "--out", tmp_path / "d", *args)[0] == 0
    same = (tmp_path / "a" / "predictions.tsv").read_bytes()
    assert (tmp_path / "c" / "predictions.tsv").read_bytes() == same
    gaz_a = json.loads((tmp_path / "b" / "run.json").read_text())["inputs"]
    gaz_d = json.loads((tmp_path / "d" / "run.json").read_text())["inputs"]
    assert gaz_a != gaz_d

    code, out, _ = run_cli(capsys, "gazette", "remove", "--gazetteers", manifest, "--name",
                           "MED", *sum((["--entry", e] for e in entries), []))
    assert code == 0
    code, out, _ = run_cli(capsys, "gazette", "list", "--gazetteers", manifest)
    assert code == 0 and out.splitlines()[0].split("\t")[0] == "MED"
    assert int(out.splitlines()[0].split("\t")[1]) == int(before)


def test_match_writes_codes(workspace, capsys, tmp_path):
    d = workspace / "data"
    code, _, _ = run_cli(capsys, "match", "--out", tmp_path / "m", "--gazetteers",
                         gaz(d), "--input", d / "dev.tsv", "--quiet")
    assert code == 0
    lines = (tmp_path / "m" / "matches.tsv").read_text().splitlines()
    assert lines[0] == "# token\tMED\tCOND\tPROC"
    assert {c for l in lines[1:] if l for c in l.split("\t")[1:]} <= set("OBIES")


def test_explain_command(workspace, capsys, tmp_path):
    d = workspace / "data"
    code, out, _ = run_cli(capsys, "explain", "--out", tmp_path / "x", "--model",
                           workspace / "late" / "model.ckpt", "--gazetteers",
                           gaz(d), "--text", "take kodu daily", "--quiet")
    assert code == 0
    recs = json.loads((tmp_path / "x" / "explain.json").read_text())
    assert [t["token"] for t in recs[0]] == ["take", "kodu", "daily"]
    code, _, err = run_cli(capsys, "explain", "--out", tmp_path / "y", "--model",
                           workspace / "ner" / "model.ckpt", "--text", "a b")
    assert code == EXIT["schema_mismatch"] and "category=schema_mismatch" in err


@pytest.mark.parametrize("argv,category", [
    (["train"], "usage"),
    (["nope"], "usage"),
    (["eval", "--pred", "/nonexistent/p.tsv", "--gold", "/nonexistent/g.tsv"], "missing_file"),
    (["synth", "--set", "types="], "config"),
    (["synth", "--set", "no_such_key=1"], "config"),
    (["synth", "--set", "broken"], "config"),
])
def test_error_categories(capsys, tmp_path, argv, category):
    code, _, err = run_cli(capsys, *argv, "--out", tmp_path / "o") if argv[0] != "nope" \
        else run_cli(capsys, *argv)
    assert code == EXIT[category]
    lines = err.strip().splitlines()
    assert lines[-1].startswith(f"gazfusion-error category={category} exit={code}: ")


def test_schema_mismatch_and_missing_gazetteers(workspace, capsys, tmp_path):
    d = workspace / "data"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    code, _, err = run_cli(capsys, "predict", "--out", tmp_path / "p", "--model", bad,
                           "--input", d / "test.tsv")
    assert code == EXIT["schema_mismatch"]
    code, _, _ = run_cli(capsys, "predict", "--out", tmp_path / "q", "--model",
                         workspace / "late" / "model.ckpt", "--input", d / "test.tsv")
    assert code == EXIT["usage"]
    broken = tmp_path / "broken.tsv"
    broken.write_text("a\tI-MED\n", encoding="utf-8")
    code, _, err = run_cli(capsys, "eval", "--out", tmp_path / "e", "--pred", broken,
                           "--gold", d / "test.tsv")
    assert code == EXIT["schema_mismatch"]


def test_locked_run_directory(capsys, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / ".lock").write_text("123\n")
    code, _, err = run_cli(capsys, "synth", "--out", out, *SYNTH)
    assert code == EXIT["locked"] and "category=locked" in err


def test_out_environment_variable(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("GAZFUSION_OUT", str(tmp_path / "env"))
    code, out, _ = run_cli(capsys, "synth", "--quiet", *SYNTH)
    assert code == 0
    assert (tmp_path / "env" / "synth" / "train.tsv").exists()


def test_experiment_command_is_reproducible(capsys, tmp_path):
    argv = ["experiment", "zero_shot", "--seed", "0", "--quiet",
            "--set", "synth.vocab_size=60", "--set", "synth.names_per_type=12",
            "--set", "synth.sentences_train=80", "--set", "synth.sentences_dev=20",
            "--set", "synth.sentences_test=40", "--set", "train.h=8", "--set", "train.d=4",
            "--set", "train.max_epochs=2", "--set", "train.encoder_window=2"]
    code, out, _ = run_cli(capsys, *argv, "--out", tmp_path / "a")
    assert code == 0 and "Late fusion w/ attention" in out
    assert run_cli(capsys, *argv, "--out", tmp_path / "b")[0] == 0
    for name in ("results.jsonl", "zero_shot_table.txt", "spec.cfg"):
        a = (tmp_path / "a" / name).read_text().replace(str(tmp_path / "a"), "")
        b = (tmp_path / "b" / name).read_text().replace(str(tmp_path / "b"), "")
        assert a == b, name
    meta = json.loads((tmp_path / "a" / "run.json").read_text())
    assert meta["kind"] == "zero_shot" and meta["seeds"] == [0]
