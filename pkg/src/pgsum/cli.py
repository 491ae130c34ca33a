"""Batch command line: preprocess, train, finetune, decode, evaluate, report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import corpus as C
from .decoding import beam_decode, greedy_decode, render
from .metrics import METRICS, aggregate, format_aggregates, make_embedder, make_extractor, score_example
from .model import ModelConfig, ModelParams
from .training import (Checkpoint, CheckpointError, TrainingAborted, TrainingConfig, checkpoint_bytes, finetune,
                       load_checkpoint, train)

log = logging.getLogger("pgsum")

CORPUS_FILE, VOCAB_FILE, MANIFEST_FILE = "corpus.jsonl", "vocab.txt", "manifest.json"


class CLIError(Exception):
    pass


class Outputs:
    """Stage output files in memory; they land on disk (temp file + rename) only when ``commit`` runs."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data: bytes | str) -> Path:
        self.files[name] = data.encode("utf-8") if isinstance(data, str) else data
        return self.out_dir / name

    def commit(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, data in self.files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out_dir)
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self.out_dir / name)


def _jsonl(records) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _require(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise CLIError(f"{p}: not found")


# ------------------------------------------------------------------ preprocess

def cmd_preprocess(args) -> None:
    _require(args.input)
    if args.vocab:
        _require(args.vocab)
    raw = C.ingest(args.input, args.format, args.article_field, args.summary_field)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    manifest = C.split_dataset(len(raw), ratios, args.seed)
    records = [{"id": i, "article": r["article"], "summary": r["summary"]} for i, r in enumerate(raw)]
    if args.vocab:
        vocab = C.Vocabulary.load(args.vocab)
    else:
        streams = (C.tokenize(raw[i]["article"]) + C.tokenize(raw[i]["summary"]) for i in manifest.train)
        vocab = C.build_vocab(streams, args.vocab_size)
    out = Outputs(args.out_dir)
    out.add(CORPUS_FILE, _jsonl(records))
    out.add(VOCAB_FILE, "".join(t + "\n" for t in vocab.id_to_token[4:]))
    out.add(MANIFEST_FILE, manifest.to_json() + "\n")
    out.commit()
    print(f"{len(records)} examples -> train {len(manifest.train)} / validation {len(manifest.validation)} "
          f"/ test {len(manifest.test)}; vocabulary {len(vocab)}")


# ------------------------------------------------------------- data loading

def _load_data(data_dir: str | Path):
    d = Path(data_dir)
    _require(d / CORPUS_FILE, d / VOCAB_FILE, d / MANIFEST_FILE)
    records = C.read_jsonl(d / CORPUS_FILE)
    vocab = C.Vocabulary.load(d / VOCAB_FILE)
    manifest = C.SplitManifest.from_json((d / MANIFEST_FILE).read_text())
    return records, vocab, manifest


def _encode_split(records, ids, vocab, args) -> list[C.EncodedExample]:
    by_id = {r["id"]: r for r in records}
    out = []
    for i in ids:
        r = by_id[i]
        out.append(C.encode_example(C.tokenize(r["article"]), C.tokenize(r["summary"]), vocab,
                                    args.max_article_len, args.max_summary_len, example_id=i))
    return out


def _training_config(args) -> TrainingConfig:
    return TrainingConfig(learning_rate=args.lr, batch_size=args.batch_size, max_steps=args.max_steps,
                          coverage_frac=args.coverage_frac, lam=args.lam, clip_norm=args.clip_norm,
                          validate_every=args.validate_every, patience=args.patience, seed=args.seed,
                          initial_accumulator=args.initial_accumulator)


def _write_training(result, out: Outputs) -> None:
    out.add("checkpoint.pgnc", checkpoint_bytes(result.checkpoint))
    out.add("loss_curve.csv", _csv(["step", "loss", "val_loss"],
                                   [[s, repr(l), "" if v is None else repr(v)] for s, l, v in result.curve]))


def _run_training(run, out: Outputs) -> None:
    try:
        result = run()
    except TrainingAborted as err:
        _write_training(err.result, out)
        out.commit()
        raise CLIError(f"training aborted: {err} (last good checkpoint written)") from None
    _write_training(result, out)
    out.commit()
    val = "n/a" if result.best_val_loss is None else f"{result.best_val_loss:.6f}"
    print(f"trained {result.steps} steps; best validation loss {val}; checkpoint step {result.checkpoint.step}")


def cmd_train(args) -> None:
    records, vocab, manifest = _load_data(args.data)
    config = _training_config(args)
    train_set = _encode_split(records, manifest.train, vocab, args)
    val_set = _encode_split(records, manifest.validation, vocab, args)
    model_cfg = ModelConfig(len(vocab), args.emb_dim, args.hidden_dim)
    params = ModelParams.init(model_cfg, seed=args.seed, init_scale=args.init_scale)
    out = Outputs(args.out_dir)
    _run_training(lambda: train(config, train_set, val_set, params, vocab.digest()), out)


def cmd_finetune(args) -> None:
    _require(args.checkpoint)
    records, vocab, manifest = _load_data(args.data)
    ckpt = _load_compatible(args.checkpoint, vocab)
    out = Outputs(args.out_dir)
    if args.max_steps == 0:
        out.add("checkpoint.pgnc", Path(args.checkpoint).read_bytes())
        out.add("loss_curve.csv", _csv(["step", "loss", "val_loss"], []))
        out.commit()
        print("zero-step fine-tune: checkpoint copied unchanged")
        return
    config = _training_config(args)
    train_set = _encode_split(records, manifest.train, vocab, args)
    val_set = _encode_split(records, manifest.validation, vocab, args)
    _run_training(lambda: finetune(ckpt, config, train_set, val_set, vocab.digest()), out)


def _load_compatible(path, vocab) -> Checkpoint:
    try:
        ckpt = load_checkpoint(path)
    except CheckpointError as err:
        raise CLIError(str(err)) from None
    if ckpt.metadata.get("vocab_hash") != vocab.digest():
        raise CLIError(f"{path}: checkpoint vocabulary does not match {VOCAB_FILE}; "
                       "preprocess with --vocab pointing at the pretraining vocabulary")
    if ckpt.params.config.vocab_size != len(vocab):
        raise CLIError(f"{path}: checkpoint vocabulary size {ckpt.params.config.vocab_size} != {len(vocab)}")
    return ckpt


# ---------------------------------------------------------------------- decode

def cmd_decode(args) -> None:
    _require(args.checkpoint)
    records, vocab, manifest = _load_data(args.data)
    ckpt = _load_compatible(args.checkpoint, vocab)
    examples = _encode_split(records, manifest.split(args.split), vocab, args)
    rows = []
    for ex in examples:
        if args.greedy:
            s = greedy_decode(ckpt.params, ex, args.max_len, args.min_len, ckpt.coverage)
        else:
            s = beam_decode(ckpt.params, ex, args.beam_size, args.max_len, args.min_len, ckpt.coverage)
        origins = [o for i, o in zip(s.ids, s.origins) if i not in (C.START, C.STOP)]
        rows.append({"id": ex.example_id, "summary": render(s, vocab), "origin_tags": origins,
                     "mean_logprob": s.mean_logprob})
    out = Outputs(args.out_dir)
    out.add("summaries.jsonl", _jsonl(rows))
    out.commit()
    print(f"decoded {len(rows)} examples from split {args.split!r}")


# -------------------------------------------------------------------- evaluate

def _format_float(x: float) -> str:
    return repr(float(x))


def cmd_evaluate(args) -> None:
    _require(args.summaries, args.references)
    summaries = C.read_jsonl(args.summaries)
    references = {r["id"]: r["summary"] for r in C.read_jsonl(args.references)}
    summary_ids = [s["id"] for s in summaries]
    if args.manifest:
        _require(args.manifest)
        wanted = C.SplitManifest.from_json(Path(args.manifest).read_text()).split(args.split)
        missing = sorted(set(wanted) - set(summary_ids), key=str)
        extra = sorted(set(summary_ids) - set(wanted), key=str)
        if missing or extra:
            raise CLIError(f"summary ids do not match split {args.split!r}: missing {missing}, unexpected {extra}")
    missing_refs = [i for i in summary_ids if i not in references]
    if missing_refs:
        raise CLIError(f"no reference for summary ids {missing_refs}")
    if not summaries:
        raise CLIError("no summaries to evaluate")

    extractor = make_extractor(args.extractor)
    embedder = make_embedder(args.embedder, args.embed_width)
    rows = [score_example(s["id"], s["summary"], references[s["id"]], extractor, embedder) for s in summaries]
    aggregates = {m: aggregate([r[m] for r in rows]) for m in METRICS}

    out = Outputs(args.out_dir)
    out.add("scores.csv", _csv(["id", *METRICS], [[r["id"], *(_format_float(r[m]) for m in METRICS)] for r in rows]))
    out.add("aggregate.json", json.dumps(aggregates, indent=2, sort_keys=True) + "\n")
    out.add("series.csv", _csv(["index", "id", "rouge2_f1", "fact_f1", "median_rouge2_f1", "median_fact_f1"],
                               [[k, r["id"], _format_float(r["rouge2_f1"]), _format_float(r["fact_f1"]),
                                 _format_float(aggregates["rouge2_f1"]["median"]),
                                 _format_float(aggregates["fact_f1"]["median"])]
                                for k, r in enumerate(rows)]))
    out.commit()
    print(format_aggregates({"model": aggregates["fact_f1"]}, "Fact F1"))
    print(format_aggregates({"model": aggregates["rouge2_f1"]}, "ROUGE-2"))


def read_scores(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        rid = r["id"]
        out.append({"id": int(rid) if rid.lstrip("-").isdigit() else rid, **{m: float(r[m]) for m in METRICS}})
    return out


# ---------------------------------------------------------------------- report

def cmd_report(args) -> None:
    models: dict[str, list[dict]] = {}
    for spec in args.scores:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).parent.name or spec, spec
        _require(Path(path))
        if name in models:
            raise CLIError(f"duplicate model name {name!r}")
        models[name] = read_scores(path)
    if len(models) < 2:
        raise CLIError("report needs score files for at least two models")
    names = list(models)
    base_ids = [r["id"] for r in models[names[0]]]
    for name in names[1:]:
        ids = [r["id"] for r in models[name]]
        if sorted(ids, key=str) != sorted(base_ids, key=str):
            diff = sorted(set(ids) ^ set(base_ids), key=str)
            raise CLIError(f"score files disagree on example ids: {diff}")

    aggs = {n: {m: aggregate([r[m] for r in rows]) for m in METRICS} for n, rows in models.items()}
    table = "\n\n".join([
        format_aggregates({n: aggs[n]["fact_f1"] for n in names}, "Fact F1"),
        format_aggregates({n: aggs[n]["rouge2_f1"] for n in names}, "ROUGE-2"),
    ]) + "\n"
    comp_rows = [[m, a, *(_format_float(aggs[n][m][a]) for n in names)]
                 for m in METRICS for a in ("min", "median", "mean", "max")]
    indexed = {n: {r["id"]: r for r in rows} for n, rows in models.items()}
    delta_header = ["id"] + [f"{m}_delta_{n}" for n in names[1:] for m in METRICS]
    delta_rows = [[i] + [_format_float(indexed[n][i][m] - indexed[names[0]][i][m]) for n in names[1:] for m in METRICS]
                  for i in base_ids]

    out = Outputs(args.out_dir)
    out.add("comparison.txt", table)
    out.add("comparison.csv", _csv(["metric", "aggregate", *names], comp_rows))
    out.add("deltas.csv", _csv(delta_header, delta_rows))
    out.commit()
    print(table, end="")


# ---------------------------------------------------------------------- parser

def _add_encoding_flags(p) -> None:
    p.add_argument("--max-article-len", type=int, default=400)
    p.add_argument("--max-summary-len", type=int, default=100)


def _add_training_flags(p) -> None:
    p.add_argument("--data", required=True, help="directory written by preprocess")
    p.add_argument("--max-steps", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.15)
    p.add_argument("--coverage-frac", type=float, default=0.2,
                   help="fraction of max-steps spent in the final coverage phase (at least 50 steps)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="coverage loss weight")
    p.add_argument("--clip-norm", type=float, default=2.0)
    p.add_argument("--validate-every", type=int, default=100)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--initial-accumulator", type=float, default=0.1, help="Adagrad accumulator start value")
    _add_encoding_flags(p)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--config", help="JSON file of flag defaults; explicit flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pgsum", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("preprocess", parents=[common], help="ingest a corpus, build vocabulary and splits")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "jsonl"], default="jsonl")
    p.add_argument("--article-field", default="article")
    p.add_argument("--summary-field", default="summary")
    p.add_argument("--vocab-size", type=int, default=50000)
    p.add_argument("--vocab", help="reuse an existing vocabulary file instead of building one")
    p.add_argument("--ratios", default="0.7,0.15,0.15")
    p.set_defaults(func=cmd_preprocess)
    subs["preprocess"] = p

    p = sub.add_parser("train", parents=[common], help="train a model from scratch")
    _add_training_flags(p)
    p.add_argument("--emb-dim", type=int, default=128)
    p.add_argument("--hidden-dim", type=int, default=256)
    p.add_argument("--init-scale", type=float, default=0.02, help="half-width of the uniform weight init")
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("finetune", parents=[common], help="continue training a checkpoint on a new corpus")
    _add_training_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune)
    subs["finetune"] = p

    p = sub.add_parser("decode", parents=[common], help="generate summaries for one split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--beam-size", type=int, default=4)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--max-len", type=int, default=120)
    p.add_argument("--min-len", type=int, default=35)
    _add_encoding_flags(p)
    p.set_defaults(func=cmd_decode)
    subs["decode"] = p

    p = sub.add_parser("evaluate", parents=[common], help="score summaries against references")
    p.add_argument("--summaries", required=True)
    p.add_argument("--references", required=True, help="corpus JSON-lines with id and summary fields")
    p.add_argument("--manifest", help="require the summaries to cover exactly one split of this manifest")
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--extractor", default="builtin", help="builtin or exec:PATH")
    p.add_argument("--embedder", default="hashed", help="hashed or exec:PATH")
    p.add_argument("--embed-width", type=int, default=128)
    p.set_defaults(func=cmd_evaluate)
    subs["evaluate"] = p

    p = sub.add_parser("report", parents=[common], help="compare score files of several models")
    p.add_argument("--scores", nargs="+", required=True, metavar="NAME=PATH")
    p.set_defaults(func=cmd_report)
    subs["report"] = p
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            parser.error(f"--config: {err}")
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        if "lambda" in overrides:
            overrides["lam"] = overrides.pop("lambda")
        subs[args.command].set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, C.CorpusError, CheckpointError, ValueError, OSError) as err:
        print(f"pgsum {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
