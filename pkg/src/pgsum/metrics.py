"""ROUGE-2, the fact-triple Factual score, and min/median/mean/max aggregation."""
from __future__ import annotations

import hashlib
import logging
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .corpus import tokenize

log = logging.getLogger(__name__)

METRICS = ("rouge2_p", "rouge2_r", "rouge2_f1", "fact_p", "fact_r", "fact_f1")
AGGREGATES = ("min", "median", "mean", "max")
SENTENCE_END = {".", "!", "?"}


class AdapterError(RuntimeError):
    pass


def _prf(overlap: float, n_candidate: float, n_reference: float) -> tuple[float, float, float]:
    p = overlap / n_candidate if n_candidate else 0.0
    r = overlap / n_reference if n_reference else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def bigrams(tokens: Sequence[str]) -> Counter:
    return Counter(zip(tokens, tokens[1:]))


def rouge2_f1(candidate: Sequence[str] | str, reference: Sequence[str] | str) -> tuple[float, float, float]:
    """Clipped bigram overlap: (precision, recall, F1)."""
    if isinstance(candidate, str):
        candidate = tokenize(candidate)
    if isinstance(reference, str):
        reference = tokenize(reference)
    cand, ref = bigrams(candidate), bigrams(reference)
    overlap = sum((cand & ref).values())
    return _prf(overlap, sum(cand.values()), sum(ref.values()))


# ------------------------------------------------------------------ fact triples

@dataclass(frozen=True)
class FactTriple:
    arg1: tuple[str, ...]
    predicate: tuple[str, ...]
    arg2: tuple[str, ...]
    sentence: int | None = None

    def __post_init__(self):
        if not self.predicate:
            raise ValueError("a fact triple needs a nonempty predicate")

    def tokens(self) -> tuple[str, ...]:
        return self.arg1 + self.predicate + self.arg2

    def to_tsv(self) -> str:
        return "\t".join(" ".join(part) for part in (self.arg1, self.predicate, self.arg2))


@lru_cache(maxsize=None)
def default_lexicon() -> frozenset[str]:
    text = resources.files("pgsum").joinpath("data/verbs.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    sentences, current = [], []
    for tok in tokens:
        if tok in SENTENCE_END:
            if current:
                sentences.append(current)
            current = []
        else:
            current.append(tok)
    if current:
        sentences.append(current)
    return sentences


class BuiltinExtractor:
    """One triple per sentence, pivoting on the first predicate-lexicon word.

    The predicate absorbs the lexicon words that immediately follow the pivot
    ("will discuss"); everything before is the first argument and everything
    after the second.
    """

    def __init__(self, lexicon: Iterable[str] | None = None):
        self.lexicon = frozenset(lexicon) if lexicon is not None else default_lexicon()

    def __call__(self, text: str) -> list[FactTriple]:
        facts = []
        for idx, sent in enumerate(split_sentences(tokenize(text))):
            hits = [i for i, tok in enumerate(sent) if tok in self.lexicon]
            if not hits:
                continue
            start = end = hits[0]
            while end + 1 < len(sent) and sent[end + 1] in self.lexicon:
                end += 1
            facts.append(FactTriple(tuple(sent[:start]), tuple(sent[start:end + 1]), tuple(sent[end + 1:]), idx))
        return facts


def _run_adapter(path: str, payload: str, what: str) -> str:
    try:
        proc = subprocess.run([path], input=payload, capture_output=True, text=True, check=False)
    except OSError as err:
        raise AdapterError(f"{what} adapter {path!r} could not start: {err}") from None
    if proc.returncode != 0:
        raise AdapterError(f"{what} adapter {path!r} exited with {proc.returncode}: {proc.stderr.strip()}")
    return proc.stdout


class ExecExtractor:
    """Child-process extractor: text on stdin, one ``arg1<TAB>predicate<TAB>arg2`` line per fact on stdout."""

    def __init__(self, path: str):
        self.path = path

    def __call__(self, text: str) -> list[FactTriple]:
        out = _run_adapter(self.path, text, "extractor")
        facts = []
        for line_no, line in enumerate(out.splitlines(), 1):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise AdapterError(f"extractor {self.path!r} line {line_no}: expected 3 tab-separated fields")
            arg1, pred, arg2 = (tuple(f.split()) for f in fields)
            if not pred:
                raise AdapterError(f"extractor {self.path!r} line {line_no}: empty predicate")
            facts.append(FactTriple(arg1, pred, arg2, None))
        return facts


def make_extractor(spec: str = "builtin"):
    if spec == "builtin":
        return BuiltinExtractor()
    if spec.startswith("exec:"):
        return ExecExtractor(spec[5:])
    raise ValueError(f"unknown extractor {spec!r} (expected builtin or exec:PATH)")


def extract_facts(text: str, extractor=None) -> list[FactTriple]:
    if extractor is None or isinstance(extractor, str):
        extractor = make_extractor(extractor or "builtin")
    return extractor(text)


# -------------------------------------------------------------- fact embeddings

def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0:
        out = np.zeros_like(vec)
        out[0] = 1.0
        return out
    return vec / norm


class HashedEmbedder:
    """Signed feature hashing of the triple's tokens, L2-normalised.

    Each token lands in ``slots`` hashed positions with hashed signs.
    """

    def __init__(self, width: int = 128, slots: int = 4):
        if width < 1 or slots < 1:
            raise ValueError("width and slots must be positive")
        self.width = width
        self.slots = slots

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8 * self.slots).digest()
        vec = np.zeros(self.width)
        for k in range(self.slots):
            h = int.from_bytes(digest[8 * k:8 * k + 8], "little")
            vec[h % self.width] += 1.0 if (h >> 63) & 1 else -1.0
        return vec

    def embed(self, triple: FactTriple) -> np.ndarray:
        vec = np.zeros(self.width)
        for tok in triple.tokens():
            vec += self._token_vector(tok)
        return _unit(vec)

    def __call__(self, triples: Sequence[FactTriple]) -> np.ndarray:
        return np.array([self.embed(t) for t in triples]).reshape(len(triples), self.width)


class ExecEmbedder:
    """Child-process embedder: triples as TSV lines in, one line of ``width`` floats per triple out."""

    def __init__(self, path: str, width: int = 128):
        self.path = path
        self.width = width

    def __call__(self, triples: Sequence[FactTriple]) -> np.ndarray:
        if not triples:
            return np.zeros((0, self.width))
        out = _run_adapter(self.path, "".join(t.to_tsv() + "\n" for t in triples), "embedder")
        lines = [ln for ln in out.splitlines() if ln.strip()]
        if len(lines) != len(triples):
            raise AdapterError(f"embedder {self.path!r} returned {len(lines)} vectors for {len(triples)} triples")
        rows = []
        for line_no, line in enumerate(lines, 1):
            try:
                vec = np.array([float(x) for x in line.split()])
            except ValueError:
                raise AdapterError(f"embedder {self.path!r} line {line_no}: not a list of numbers") from None
            if vec.shape != (self.width,) or not np.isfinite(vec).all():
                raise AdapterError(f"embedder {self.path!r} line {line_no}: expected {self.width} finite floats")
            rows.append(_unit(vec))
        return np.array(rows)


def make_embedder(spec: str = "hashed", width: int = 128):
    if spec == "hashed":
        return HashedEmbedder(width)
    if spec.startswith("exec:"):
        return ExecEmbedder(spec[5:], width)
    raise ValueError(f"unknown embedder {spec!r} (expected hashed or exec:PATH)")


def embed_fact(triple: FactTriple, embedder=None) -> np.ndarray:
    if embedder is None or isinstance(embedder, str):
        embedder = make_embedder(embedder or "hashed")
    return embedder([triple])[0]


# --------------------------------------------------------------- factual score

def factual_score(generated: np.ndarray | Sequence[np.ndarray],
                  reference: np.ndarray | Sequence[np.ndarray]) -> tuple[float, float, float]:
    """Best-match cosine precision, recall and F1 between two sets of fact embeddings.

    Similarities are clipped to [0, 1]. An empty side scores (0, 0, 0).
    """
    G = np.asarray(generated, dtype=np.float64)
    R = np.asarray(reference, dtype=np.float64)
    if G.size == 0 or R.size == 0:
        log.warning("factual score on an empty fact set (%d generated, %d reference): scoring 0",
                    len(G), len(R))
        return 0.0, 0.0, 0.0
    G = G / np.linalg.norm(G, axis=1, keepdims=True)
    R = R / np.linalg.norm(R, axis=1, keepdims=True)
    sim = np.clip(G @ R.T, 0.0, 1.0)
    p = float(sim.max(axis=1).mean())
    r = float(sim.max(axis=0).mean())
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def factual_score_text(generated: str, reference: str, extractor=None, embedder=None) -> tuple[float, float, float]:
    if extractor is None or isinstance(extractor, str):
        extractor = make_extractor(extractor or "builtin")
    if embedder is None or isinstance(embedder, str):
        embedder = make_embedder(embedder or "hashed")
    return factual_score(embedder(extractor(generated)), embedder(extractor(reference)))


# ----------------------------------------------------------------- aggregation

def aggregate(values: Sequence[float]) -> dict[str, float]:
    if len(values) == 0:
        raise ValueError("cannot aggregate an empty list")
    arr = np.sort(np.asarray(values, dtype=np.float64))
    return {"min": float(arr[0]), "median": float(np.median(arr)), "mean": float(arr.mean()), "max": float(arr[-1])}


@dataclass
class ScoreReport:
    rows: list[dict] = field(default_factory=list)   # {"id", *METRICS}

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        return {m: aggregate([r[m] for r in self.rows]) for m in METRICS}

    def ids(self) -> list:
        return [r["id"] for r in self.rows]


def score_example(example_id, generated: str, reference: str, extractor, embedder) -> dict:
    p2, r2, f2 = rouge2_f1(generated, reference)
    fp, fr, ff = factual_score(embedder(extractor(generated)), embedder(extractor(reference)))
    return {"id": example_id, "rouge2_p": p2, "rouge2_r": r2, "rouge2_f1": f2,
            "fact_p": fp, "fact_r": fr, "fact_f1": ff}


def score_pairs(pairs: Iterable[tuple[object, str, str]], extractor="builtin", embedder="hashed",
                width: int = 128) -> ScoreReport:
    extractor = make_extractor(extractor) if isinstance(extractor, str) else extractor
    embedder = make_embedder(embedder, width) if isinstance(embedder, str) else embedder
    return ScoreReport([score_example(i, g, r, extractor, embedder) for i, g, r in pairs])


def format_aggregates(columns: dict[str, dict[str, float]], title: str) -> str:
    """Fixed-width table, one column per model, rows min/median/mean/max, scores x100."""
    names = list(columns)
    width = max(12, *(len(n) + 2 for n in names))
    lines = [f"{title:<10}" + "".join(f"{n:>{width}}" for n in names)]
    for agg in AGGREGATES:
        lines.append(f"{agg.capitalize():<10}" + "".join(f"{100 * columns[n][agg]:>{width}.2f}" for n in names))
    return "\n".join(lines)
