"""Tokenization, vocabulary, extended-id encoding, ingestion, splitting and batching."""
from __future__ import annotations

import csv
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, START, STOP = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[START]", "[STOP]")

_PUNCT = re.compile(r"""([.,?!'"():])""")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(r" \1 ", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != RESERVED:
            raise CorpusError("vocabulary must start with the four reserved tokens")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise CorpusError("duplicate token in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token[4:]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = [line for line in Path(path).read_text(encoding="utf-8").split("\n") if line]
        return cls(RESERVED + tuple(tokens))


def build_vocab(token_streams: Iterable[Iterable[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens; ties break lexicographically."""
    if max_size <= 4:
        raise CorpusError("max_size must exceed the 4 reserved tokens")
    counts: Counter[str] = Counter()
    for stream in token_streams:
        counts.update(stream)
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(RESERVED + tuple(tok for tok, _ in ranked[: max_size - 4]))


@dataclass
class EncodedExample:
    article_ids: list[int]
    article_extended_ids: list[int]
    oov_words: list[str]
    summary_input_ids: list[int]
    summary_target_extended_ids: list[int]
    example_id: str | int | None = None

    @property
    def article_len(self) -> int:
        return len(self.article_ids)

    @property
    def summary_len(self) -> int:
        return len(self.summary_input_ids)


def encode_example(article_tokens: Sequence[str], summary_tokens: Sequence[str], vocab: Vocabulary,
                   max_article_len: int = 400, max_summary_len: int = 100,
                   example_id=None) -> EncodedExample:
    if max_article_len <= 0 or max_summary_len <= 0:
        raise CorpusError("length limits must be positive")
    article = list(article_tokens[:max_article_len])
    if not article:
        raise CorpusError(f"empty article after truncation (example {example_id})")
    summary = list(summary_tokens)

    V = len(vocab)
    oov_words: list[str] = []
    article_ids, extended = [], []
    for tok in article:
        i = vocab.id(tok)
        article_ids.append(i)
        if i == UNK:
            if tok not in oov_words:
                oov_words.append(tok)
            extended.append(V + oov_words.index(tok))
        else:
            extended.append(i)

    summary_ids = [vocab.id(t) for t in summary]
    target = []
    for tok, i in zip(summary, summary_ids):
        if i == UNK and tok in oov_words:
            target.append(V + oov_words.index(tok))
        else:
            target.append(i)
    # a summary cut by the limit keeps no STOP target
    return EncodedExample(
        article_ids=article_ids,
        article_extended_ids=extended,
        oov_words=oov_words,
        summary_input_ids=([START] + summary_ids)[:max_summary_len],
        summary_target_extended_ids=(target + [STOP])[:max_summary_len],
        example_id=example_id,
    )


def decode_ids(ids: Iterable[int], vocab: Vocabulary, oov_words: Sequence[str] = ()) -> list[str]:
    V = len(vocab)
    out = []
    for i in ids:
        if i < V:
            out.append(vocab.token(i))
        elif i - V < len(oov_words):
            out.append(oov_words[i - V])
        else:
            raise CorpusError(f"extended id {i} out of range for {len(oov_words)} OOV words")
    return out


# ------------------------------------------------------------------- ingestion

def ingest(path: str | Path, fmt: str = "jsonl", article_field: str = "article",
           summary_field: str = "summary") -> list[dict]:
    """Read raw ``{"article", "summary"}`` examples from a CSV or JSON-lines file, in file order."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"{path}: no such file")
    if fmt == "csv":
        return list(_ingest_csv(path, article_field, summary_field))
    if fmt == "jsonl":
        return list(_ingest_jsonl(path, article_field, summary_field))
    raise CorpusError(f"unknown format {fmt!r} (expected csv or jsonl)")


def _ingest_csv(path: Path, article_field: str, summary_field: str) -> Iterator[dict]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            header = next(reader)
        except StopIteration:
            return
        except csv.Error as err:
            raise CorpusError(f"{path}: malformed CSV at line {reader.line_num}: {err}") from None
        for name in (article_field, summary_field):
            if name not in header:
                raise CorpusError(f"{path}: missing field {name!r} in header {header}")
        a_col, s_col = header.index(article_field), header.index(summary_field)
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error as err:
                raise CorpusError(f"{path}: malformed CSV at line {reader.line_num}: {err}") from None
            if not row:
                continue
            if len(row) != len(header):
                raise CorpusError(f"{path}: malformed CSV at line {reader.line_num}: "
                                  f"expected {len(header)} fields, got {len(row)}")
            yield {"article": row[a_col], "summary": row[s_col]}


def _ingest_jsonl(path: Path, article_field: str, summary_field: str) -> Iterator[dict]:
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"{path}: invalid JSON at line {line_no}: {err.msg}") from None
            for name in (article_field, summary_field):
                if name not in rec:
                    raise CorpusError(f"{path}: line {line_no} is missing field {name!r}")
            yield {"article": rec[article_field], "summary": rec[summary_field]}


def write_jsonl(records: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------------- splitting

@dataclass
class SplitManifest:
    seed: int
    ratios: tuple[float, float, float]
    train: list[int]
    validation: list[int]
    test: list[int]

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "ratios": list(self.ratios), "train": self.train,
                           "validation": self.validation, "test": self.test}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(d["seed"], tuple(d["ratios"]), d["train"], d["validation"], d["test"])

    def split(self, name: str) -> list[int]:
        if name not in ("train", "validation", "test"):
            raise CorpusError(f"unknown split {name!r}")
        return getattr(self, name)


def split_dataset(n_examples: int, ratios: Sequence[float] = (0.70, 0.15, 0.15), seed: int = 0) -> SplitManifest:
    if n_examples < 3:
        raise CorpusError(f"need at least 3 examples to split, got {n_examples}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(n_examples).tolist()
    # small epsilon guards floor() against 0.7 * 100 = 69.99999...
    n_train = int(np.floor(ratios[0] * n_examples + 1e-9))
    n_val = int(np.floor(ratios[1] * n_examples + 1e-9))
    return SplitManifest(seed, ratios, order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])


# -------------------------------------------------------------------- batching

@dataclass
class Batch:
    article_ids: np.ndarray          # (B, n) plain ids, UNK for OOV
    article_extended_ids: np.ndarray  # (B, n)
    article_mask: np.ndarray          # (B, n) 1 on real tokens
    summary_input_ids: np.ndarray     # (B, T)
    summary_target_ids: np.ndarray    # (B, T) extended space
    summary_mask: np.ndarray          # (B, T)
    max_oov: int
    examples: list[EncodedExample]

    @property
    def size(self) -> int:
        return self.article_ids.shape[0]


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float32)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = 1.0
    return ids, mask


def make_batch(examples: Sequence[EncodedExample]) -> Batch:
    a_ids, a_mask = _pad([e.article_ids for e in examples])
    a_ext, _ = _pad([e.article_extended_ids for e in examples])
    s_in, s_mask = _pad([e.summary_input_ids for e in examples])
    s_tgt, _ = _pad([e.summary_target_extended_ids for e in examples])
    return Batch(a_ids, a_ext, a_mask, s_in, s_tgt, s_mask,
                 max(len(e.oov_words) for e in examples), list(examples))


def batch(examples: Sequence[EncodedExample], batch_size: int) -> list[Batch]:
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    return [make_batch(examples[i:i + batch_size]) for i in range(0, len(examples), batch_size)]
