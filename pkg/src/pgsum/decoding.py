"""Greedy and beam-search decoding over the extended vocabulary."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import START, STOP, UNK, EncodedExample, Vocabulary
from .model import EncoderOutput, ModelParams, decoder_step, encode


class DecodeError(ValueError):
    pass


@dataclass
class DecodedSummary:
    ids: list[int]                 # extended-space ids, STOP included when emitted
    origins: list[str]             # "generated" or "copied", one per id
    attentions: list[np.ndarray]   # attention over source positions, one per id
    log_probs: list[float]
    oov_words: list[str] = field(default_factory=list)

    @property
    def mean_logprob(self) -> float:
        return float(np.mean(self.log_probs)) if self.log_probs else 0.0

    @property
    def content_ids(self) -> list[int]:
        return [i for i in self.ids if i not in (START, STOP)]

    def tokens(self, vocab: Vocabulary) -> list[str]:
        return render(self, vocab).split()


@dataclass
class _Hyp:
    ids: list[int]
    log_probs: list[float]
    origins: list[str]
    attentions: list[np.ndarray]
    state: tuple[np.ndarray, np.ndarray]
    coverage: np.ndarray

    @property
    def mean_logprob(self) -> float:
        return float(np.mean(self.log_probs))


def _encode_one(P: dict[str, Tensor], example: EncodedExample) -> EncoderOutput:
    if not example.article_ids:
        raise DecodeError("cannot decode an empty article")
    ids = np.asarray([example.article_ids])
    return encode(P, ids, np.ones(ids.shape, dtype=np.float32), np.asarray([example.article_extended_ids]))


def _step(P, enc: EncoderOutput, hyp: _Hyp, use_coverage: bool, n_oov: int, V: int):
    dtype = enc.h.dtype
    state = (Tensor(hyp.state[0][None], dtype=dtype), Tensor(hyp.state[1][None], dtype=dtype))
    cov = Tensor(hyp.coverage[None], dtype=np.float64)
    prev = np.array([hyp.ids[-1] if hyp.ids[-1] < V else UNK])
    return decoder_step(P, state, prev, enc, cov, use_coverage, n_oov)


def _origin(out, row: int, token: int, V: int) -> str:
    p_gen = float(out.p_gen.data[row, 0])
    generated = p_gen * float(out.p_vocab.data[row, token]) if token < V else 0.0
    copied = float(out.p_final.data[row, token]) - generated
    return "copied" if copied > generated else "generated"


def _check_lengths(max_len: int, min_len: int) -> None:
    if not max_len >= min_len >= 1:
        raise DecodeError(f"need max_len >= min_len >= 1, got max_len={max_len}, min_len={min_len}")


def greedy_decode(params: ModelParams, example: EncodedExample, max_len: int = 120, min_len: int = 35,
                  use_coverage: bool = False) -> DecodedSummary:
    """Pick the most probable extended id at every step; STOP is suppressed before ``min_len``."""
    _check_lengths(max_len, min_len)
    V = params.config.vocab_size
    n_oov = len(example.oov_words)
    with ad.no_grad():
        P = params.tensors()
        enc = _encode_one(P, example)
        hyp = _Hyp([START], [], [], [], (enc.init_state[0].data[0], enc.init_state[1].data[0]),
                   np.zeros(len(example.article_ids)))
        for t in range(max_len):
            out = _step(P, enc, hyp, use_coverage, n_oov, V)
            probs = out.p_final.data[0].astype(np.float64)
            if t < min_len:
                probs[STOP] = -1.0
            token = int(np.argmax(probs))
            hyp = _extend(hyp, out, 0, token, V)
            if token == STOP:
                break
    return _finish(hyp, example)


def _extend(hyp: _Hyp, out, row: int, token: int, V: int) -> _Hyp:
    p = float(out.p_final.data[row, token])
    return _Hyp(hyp.ids + [token], hyp.log_probs + [float(np.log(max(p, 1e-12)))],
                hyp.origins + [_origin(out, row, token, V)],
                hyp.attentions + [out.attention.data[row].copy()],
                (out.state[0].data[row], out.state[1].data[row]),
                out.next_coverage.data[row])


def _rank(hyp: _Hyp) -> tuple[float, list[int]]:
    return -hyp.mean_logprob, hyp.ids


def _finish(hyp: _Hyp, example: EncodedExample) -> DecodedSummary:
    return DecodedSummary(hyp.ids[1:], hyp.origins, hyp.attentions, hyp.log_probs, list(example.oov_words))


def beam_decode(params: ModelParams, example: EncodedExample, beam_size: int = 4, max_len: int = 120,
                min_len: int = 35, use_coverage: bool = False) -> DecodedSummary:
    """Beam search ranked by mean log-probability per token.

    Each live hypothesis proposes its ``beam_size`` most probable next ids; the
    best ``beam_size`` candidates survive. Candidates ending in STOP move to
    a finished pool that keeps the best ``beam_size``. The search ends when no
    hypothesis is live, at ``max_len``, or once the pool is full and its best
    entry outranks every live one. The answer is the best of the finished
    pool and the surviving live hypotheses. UNK proposals are pruned whenever
    there is more than one beam.
    """
    if beam_size < 1:
        raise DecodeError("beam_size must be >= 1")
    _check_lengths(max_len, min_len)
    V = params.config.vocab_size
    n_oov = len(example.oov_words)
    finished: list[_Hyp] = []
    with ad.no_grad():
        P = params.tensors()
        enc = _encode_one(P, example)
        live = [_Hyp([START], [], [], [], (enc.init_state[0].data[0], enc.init_state[1].data[0]),
                     np.zeros(len(example.article_ids)))]
        for t in range(max_len):
            candidates = []
            for row, hyp in enumerate(live):
                # one row per call: batched float32 matmuls would perturb scores vs greedy
                out = _step(P, enc, hyp, use_coverage, n_oov, V)
                probs = out.p_final.data[0].astype(np.float64)
                if t < min_len:
                    probs[STOP] = -1.0
                if beam_size > 1:
                    probs[UNK] = -1.0
                # stable sort on -p keeps the lowest id first among ties
                for token in np.argsort(-probs, kind="stable")[:beam_size]:
                    if probs[token] < 0:
                        continue
                    new = _extend(hyp, out, 0, int(token), V)
                    candidates.append((-new.mean_logprob, int(token), row, new))
            candidates.sort(key=lambda c: c[:3])
            live = []
            for _, token, _, new in candidates:
                if token == STOP:
                    finished.append(new)
                else:
                    live.append(new)
                if len(live) == beam_size:
                    break
            finished = sorted(finished, key=_rank)[:beam_size]
            if not live or (len(finished) == beam_size and _rank(finished[0]) <= _rank(min(live, key=_rank))):
                break
    best = min(finished + live, key=_rank)
    return _finish(best, example)


def render(summary: DecodedSummary, vocab: Vocabulary, oov_words: Sequence[str] | None = None) -> str:
    oov = summary.oov_words if oov_words is None else list(oov_words)
    V = len(vocab)
    words = []
    for i in summary.ids:
        if i in (START, STOP):
            continue
        if i < V:
            words.append(vocab.token(i))
        elif i - V < len(oov):
            words.append(oov[i - V])
        else:
            raise DecodeError(f"extended id {i} has no OOV word (only {len(oov)} known)")
    return " ".join(words)


@dataclass
class RepetitionStats:
    repeated: dict[int, dict[tuple[str, ...], int]]

    def count(self, n: int) -> int:
        return len(self.repeated[n])


def repetition_stats(tokens: Sequence[str] | str) -> RepetitionStats:
    """N-grams (n = 1..3) that occur more than once, with their occurrence counts."""
    if isinstance(tokens, str):
        tokens = tokens.split()
    repeated = {}
    for n in (1, 2, 3):
        grams = Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
        repeated[n] = {g: c for g, c in grams.items() if c > 1}
    return RepetitionStats(repeated)
