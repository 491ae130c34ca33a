import csv
import json
import subprocess
import sys

import pytest

from pgsum import corpus as C
from pgsum.cli import main, read_scores
from pgsum.synthetic import meeting_corpus


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    C.write_jsonl(meeting_corpus(20, seed=1), root / "raw.jsonl")
    assert main(["preprocess", "--input", str(root / "raw.jsonl"), "--vocab-size", "200",
                 "--seed", "3", "--out-dir", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--max-steps", "6", "--batch-size", "4",
                 "--emb-dim", "6", "--hidden-dim", "6", "--validate-every", "3",
                 "--out-dir", str(root / "run")]) == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_preprocess_outputs(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert (len(manifest["train"]), len(manifest["validation"]), len(manifest["test"])) == (14, 3, 3)
    assert manifest["seed"] == 3
    lines = (workspace / "data" / "vocab.txt").read_text().splitlines()
    assert "[PAD]" not in lines and len(lines) == len(set(lines))
    assert len(C.read_jsonl(workspace / "data" / "corpus.jsonl")) == 20


def test_preprocess_is_byte_identical_on_rerun(workspace, tmp_path):
    assert main(["preprocess", "--input", str(workspace / "raw.jsonl"), "--vocab-size", "200",
                 "--seed", "3", "--out-dir", str(tmp_path)]) == 0
    for name in ("corpus.jsonl", "vocab.txt", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_preprocess_csv_and_missing_field(tmp_path, capsys):
    src = tmp_path / "d.csv"
    src.write_text('transcript,summary\n"uh, we decided on the logo .","the group decided on the logo ."\n'
                   "a b,c d\nx y,z w\n")
    assert main(["preprocess", "--input", str(src), "--format", "csv", "--article-field", "transcript",
                 "--out-dir", str(tmp_path / "o")]) == 0
    rows = C.read_jsonl(tmp_path / "o" / "corpus.jsonl")
    assert rows[0]["article"] == "uh, we decided on the logo ."
    code = main(["preprocess", "--input", str(src), "--format", "csv", "--out-dir", str(tmp_path / "p")])
    assert code == 1
    assert "'article'" in capsys.readouterr().err
    assert not (tmp_path / "p").exists()


def test_preprocess_142_examples(tmp_path):
    C.write_jsonl([{"article": f"a{i} b", "summary": "b"} for i in range(142)], tmp_path / "r.jsonl")
    assert main(["preprocess", "--input", str(tmp_path / "r.jsonl"), "--seed", "7",
                 "--out-dir", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert [len(m[k]) for k in ("train", "validation", "test")] == [99, 21, 22]


def test_train_outputs(workspace):
    assert (workspace / "run" / "checkpoint.pgnc").read_bytes()[:4] == b"PGNC"
    rows = read_rows(workspace / "run" / "loss_curve.csv")
    assert rows[0] == ["step", "loss", "val_loss"] and len(rows) == 7


def test_finetune_zero_steps_copies(workspace, tmp_path):
    ck = workspace / "run" / "checkpoint.pgnc"
    assert main(["finetune", "--data", str(workspace / "data"), "--checkpoint", str(ck),
                 "--max-steps", "0", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "checkpoint.pgnc").read_bytes() == ck.read_bytes()


def test_finetune_rejects_foreign_vocab(workspace, tmp_path, capsys):
    C.write_jsonl([{"article": "completely other words", "summary": "other"}] * 5, tmp_path / "r.jsonl")
    main(["preprocess", "--input", str(tmp_path / "r.jsonl"), "--out-dir", str(tmp_path / "d")])
    code = main(["finetune", "--data", str(tmp_path / "d"), "--checkpoint",
                 str(workspace / "run" / "checkpoint.pgnc"), "--max-steps", "2", "--out-dir", str(tmp_path / "o")])
    assert code == 1 and "vocabulary" in capsys.readouterr().err


def test_finetune_runs_with_shared_vocab(workspace, tmp_path):
    C.write_jsonl(meeting_corpus(10, seed=9), tmp_path / "r.jsonl")
    assert main(["preprocess", "--input", str(tmp_path / "r.jsonl"), "--vocab",
                 str(workspace / "data" / "vocab.txt"), "--out-dir", str(tmp_path / "d")]) == 0
    assert main(["finetune", "--data", str(tmp_path / "d"), "--checkpoint",
                 str(workspace / "run" / "checkpoint.pgnc"), "--max-steps", "3", "--batch-size", "4",
                 "--out-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "checkpoint.pgnc").exists()


def _decode(workspace, out, *extra):
    return main(["decode", "--data", str(workspace / "data"), "--checkpoint",
                 str(workspace / "run" / "checkpoint.pgnc"), "--split", "test", "--max-len", "8",
                 "--min-len", "2", "--out-dir", str(out), *extra])


def test_decode_beam_one_equals_greedy_and_is_deterministic(workspace, tmp_path):
    assert _decode(workspace, tmp_path / "g", "--greedy") == 0
    assert _decode(workspace, tmp_path / "b", "--beam-size", "1") == 0
    assert _decode(workspace, tmp_path / "b2", "--beam-size", "1") == 0
    g = (tmp_path / "g" / "summaries.jsonl").read_bytes()
    assert g == (tmp_path / "b" / "summaries.jsonl").read_bytes() == (tmp_path / "b2" / "summaries.jsonl").read_bytes()
    rows = C.read_jsonl(tmp_path / "g" / "summaries.jsonl")
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert [r["id"] for r in rows] == manifest["test"]
    assert set(rows[0]) == {"id", "summary", "origin_tags", "mean_logprob"}
    assert len(rows[0]["origin_tags"]) == len(rows[0]["summary"].split())


def test_evaluate_identical_and_empty(workspace, tmp_path):
    corpus = C.read_jsonl(workspace / "data" / "corpus.jsonl")
    C.write_jsonl([{"id": r["id"], "summary": r["summary"]} for r in corpus], tmp_path / "same.jsonl")
    assert main(["evaluate", "--summaries", str(tmp_path / "same.jsonl"), "--references",
                 str(workspace / "data" / "corpus.jsonl"), "--out-dir", str(tmp_path / "a")]) == 0
    agg = json.loads((tmp_path / "a" / "aggregate.json").read_text())
    for m in ("rouge2_f1", "fact_f1"):
        assert set(agg[m]) == {"min", "median", "mean", "max"}
        assert all(v == pytest.approx(1.0) for v in agg[m].values())
    C.write_jsonl([{"id": r["id"], "summary": ""} for r in corpus[:3]], tmp_path / "empty.jsonl")
    assert main(["evaluate", "--summaries", str(tmp_path / "empty.jsonl"), "--references",
                 str(workspace / "data" / "corpus.jsonl"), "--out-dir", str(tmp_path / "e")]) == 0
    scores = read_scores(tmp_path / "e" / "scores.csv")
    assert len(scores) == 3 and all(r["fact_f1"] == 0.0 for r in scores)
    assert len(read_rows(tmp_path / "e" / "series.csv")) == 4


def test_evaluate_id_mismatch(workspace, tmp_path, capsys):
    C.write_jsonl([{"id": 999, "summary": "x"}], tmp_path / "s.jsonl")
    code = main(["evaluate", "--summaries", str(tmp_path / "s.jsonl"), "--references",
                 str(workspace / "data" / "corpus.jsonl"), "--out-dir", str(tmp_path / "o")])
    assert code == 1 and "999" in capsys.readouterr().err
    C.write_jsonl([{"id": 0, "summary": "x"}], tmp_path / "s.jsonl")
    code = main(["evaluate", "--summaries", str(tmp_path / "s.jsonl"), "--references",
                 str(workspace / "data" / "corpus.jsonl"), "--manifest", str(workspace / "data" / "manifest.json"),
                 "--out-dir", str(tmp_path / "o")])
    assert code == 1 and "missing" in capsys.readouterr().err


def test_report_zero_deltas_and_round_trip(workspace, tmp_path):
    corpus = C.read_jsonl(workspace / "data" / "corpus.jsonl")
    C.write_jsonl([{"id": r["id"], "summary": r["article"]} for r in corpus], tmp_path / "s.jsonl")
    main(["evaluate", "--summaries", str(tmp_path / "s.jsonl"), "--references",
          str(workspace / "data" / "corpus.jsonl"), "--out-dir", str(tmp_path / "e")])
    scores = tmp_path / "e" / "scores.csv"
    assert main(["report", "--scores", f"a={scores}", f"b={scores}", f"c={scores}",
                 "--out-dir", str(tmp_path / "r")]) == 0
    deltas = read_rows(tmp_path / "r" / "deltas.csv")
    assert all(float(x) == 0.0 for row in deltas[1:] for x in row[1:])
    comp = read_rows(tmp_path / "r" / "comparison.csv")
    assert comp[0] == ["metric", "aggregate", "a", "b", "c"]
    original = {m: {a: v for a, v in d.items()} for m, d in
                json.loads((tmp_path / "e" / "aggregate.json").read_text()).items()}
    for metric, agg, *vals in comp[1:]:
        assert all(float(v) == original[metric][agg] for v in vals)
    assert read_scores(scores) == read_scores(scores)
    text = (tmp_path / "r" / "comparison.txt").read_text()
    assert "Median" in text and "Fact F1" in text


def test_report_needs_two_models_with_same_ids(workspace, tmp_path):
    scores = tmp_path / "s.csv"
    scores.write_text("id,rouge2_p,rouge2_r,rouge2_f1,fact_p,fact_r,fact_f1\n0,1,1,1,1,1,1\n")
    other = tmp_path / "o.csv"
    other.write_text("id,rouge2_p,rouge2_r,rouge2_f1,fact_p,fact_r,fact_f1\n1,1,1,1,1,1,1\n")
    assert main(["report", "--scores", f"a={scores}", "--out-dir", str(tmp_path)]) == 1
    assert main(["report", "--scores", f"a={scores}", f"b={other}", "--out-dir", str(tmp_path)]) == 1


def test_config_file_defaults_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_steps": 2, "batch_size": 4, "emb_dim": 5, "hidden_dim": 5}))
    assert main(["train", "--data", str(workspace / "data"), "--config", str(cfg), "--max-steps", "3",
                 "--out-dir", str(tmp_path / "o")]) == 0
    assert len(read_rows(tmp_path / "o" / "loss_curve.csv")) == 4
    from pgsum.training import load_checkpoint
    assert load_checkpoint(tmp_path / "o" / "checkpoint.pgnc").params.config.hidden_dim == 5


def test_module_entry_point(workspace):
    proc = subprocess.run([sys.executable, "-m", "pgsum", "report", "--scores", "nope.csv", "x.csv"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "not found" in proc.stderr
