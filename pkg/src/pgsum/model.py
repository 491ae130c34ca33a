"""Pointer-generator network with coverage, expressed over the autodiff primitives.

Shapes use B for batch, n for source length, E for embedding width, H for the
LSTM width, A for the attention width and V for the fixed vocabulary size.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import UNK, Batch

P_GEN_FLOOR = 1e-6
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    emb_dim: int = 128
    hidden_dim: int = 256
    attn_dim: int | None = None

    def __post_init__(self):
        if self.attn_dim is None:
            object.__setattr__(self, "attn_dim", 2 * self.hidden_dim)
        if min(self.vocab_size, self.emb_dim, self.hidden_dim, self.attn_dim) <= 0:
            raise ValueError(f"model dimensions must be positive: {self}")
        if self.vocab_size <= UNK:
            raise ValueError("vocabulary must at least hold the reserved ids")

    @classmethod
    def desk(cls, vocab_size: int = 2000) -> "ModelConfig":
        return cls(vocab_size, emb_dim=32, hidden_dim=64)

    def to_dict(self) -> dict:
        return asdict(self)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        V, E, H, A = self.vocab_size, self.emb_dim, self.hidden_dim, self.attn_dim
        return {
            "embedding": (V, E),
            "enc_fw_W": (E + H, 4 * H), "enc_fw_b": (4 * H,),
            "enc_bw_W": (E + H, 4 * H), "enc_bw_b": (4 * H,),
            "reduce_W": (4 * H, 2 * H), "reduce_b": (2 * H,),
            "dec_W": (E + H, 4 * H), "dec_b": (4 * H,),
            "attn_v": (A,), "attn_W_h": (2 * H, A), "attn_W_s": (H, A),
            "attn_w_c": (A,), "attn_b": (A,),
            "out_V": (3 * H, H), "out_b": (H,),
            "out_V2": (H, V), "out_b2": (V,),
            "gen_w_hstar": (2 * H,), "gen_w_s": (H,), "gen_w_x": (E,), "gen_b": (1,),
        }


_ZERO_INIT = {"enc_fw_b", "enc_bw_b", "reduce_b", "dec_b", "attn_w_c", "attn_b", "out_b", "out_b2", "gen_b"}


class ModelParams:
    """Named float arrays for every learned quantity, plus the dimensions they imply."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = arrays
        self.validate()

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32, init_scale: float = 0.02) -> "ModelParams":
        """Uniform(-init_scale, init_scale) weights, zero biases and zero coverage weight."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in sorted(config.param_shapes().items()):
            if name in _ZERO_INIT:
                arrays[name] = np.zeros(shape, dtype=dtype)
            else:
                arrays[name] = rng.uniform(-init_scale, init_scale, size=shape).astype(dtype)
        return cls(config, arrays)

    def validate(self) -> None:
        expected = self.config.param_shapes()
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            arr = self.arrays[name]
            if arr.shape != shape:
                raise ValueError(f"parameter {name}: shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name} has non-finite values")

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, dtype=v.dtype, name=k) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


class EncoderOutput(NamedTuple):
    h: Tensor                  # (B, n, 2H)
    features: Tensor           # (B, n, A), W_h h_i cached for every decoder step
    init_state: tuple[Tensor, Tensor]
    source_extended_ids: np.ndarray
    mask: np.ndarray           # (B, n)


class StepOutput(NamedTuple):
    state: tuple[Tensor, Tensor]   # decoder (hidden, cell); s_t is the hidden part
    x: Tensor                      # decoder input embedding
    attention: Tensor              # (B, n)
    context: Tensor                # (B, 2H)
    p_vocab: Tensor                # (B, V)
    p_gen: Tensor                  # (B, 1)
    p_final: Tensor                # (B, V + n_oov)
    coverage: Tensor               # c_t used at this step, 64-bit
    next_coverage: Tensor          # c_t + a_t, 64-bit


# ------------------------------------------------------------------ components

def embed(ids: np.ndarray, E: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    plain = np.where(ids >= E.shape[0], UNK, ids)
    return ad.take_rows(E, plain)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step; rows with mask 0 keep their previous state."""
    z = ad.concat([x, h], axis=-1) @ W + b
    hc = ad.lstm_gates(z, c, h, mask)
    H = c.shape[-1]
    return ad.slice_last(hc, 0, H), ad.slice_last(hc, H, 2 * H)


def _run_lstm(xs: list[Tensor], mask: np.ndarray, W: Tensor, b: Tensor, H: int,
              reverse: bool) -> tuple[list[Tensor], tuple[Tensor, Tensor]]:
    B = mask.shape[0]
    h = ad.as_tensor(np.zeros((B, H), dtype=W.dtype))
    c = h
    outs: list[Tensor | None] = [None] * len(xs)
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in order:
        m = mask[:, t]
        h, c = lstm_cell(xs[t], h, c, W, b, None if m.all() else m)
        outs[t] = h
    return outs, (h, c)


def encode(P: dict[str, Tensor], article_ids: np.ndarray, mask: np.ndarray,
           source_extended_ids: np.ndarray | None = None) -> EncoderOutput:
    """Bidirectional LSTM over the article; h_i = [forward_i, backward_i]."""
    article_ids = np.atleast_2d(np.asarray(article_ids))
    mask = np.atleast_2d(np.asarray(mask, dtype=np.float32))
    if article_ids.shape != mask.shape:
        raise ad.ShapeError(f"encode: ids {article_ids.shape} vs mask {mask.shape}")
    if (mask.sum(axis=1) == 0).any():
        raise ValueError("encode: an article is fully masked")
    H = P["enc_fw_b"].shape[0] // 4
    B, n = article_ids.shape
    emb = embed(article_ids, P["embedding"])
    xs = [ad.select(emb, 1, t) for t in range(n)]
    fw, (fh, fc) = _run_lstm(xs, mask, P["enc_fw_W"], P["enc_fw_b"], H, reverse=False)
    bw, (bh, bc) = _run_lstm(xs, mask, P["enc_bw_W"], P["enc_bw_b"], H, reverse=True)
    h = ad.concat([ad.stack(fw, axis=1), ad.stack(bw, axis=1)], axis=-1)
    reduced = ad.tanh(ad.concat([fh, bh, fc, bc], axis=-1) @ P["reduce_W"] + P["reduce_b"])
    s0, c0 = ad.split(reduced, 2)
    features = h @ P["attn_W_h"]
    if source_extended_ids is None:
        source_extended_ids = article_ids
    return EncoderOutput(h, features, (s0, c0), np.atleast_2d(np.asarray(source_extended_ids)), mask)


def attention(P: dict[str, Tensor], features: Tensor, s: Tensor, coverage: Tensor | None,
              mask: np.ndarray, use_coverage: bool) -> Tensor:
    """a_i = softmax_i(v . tanh(W_h h_i + W_s s + w_c c_i + b)), masked to real positions."""
    B, n, A = features.shape
    pre = features + ad.reshape(s @ P["attn_W_s"] + P["attn_b"], (B, 1, A))
    if use_coverage:
        pre = pre + ad.reshape(coverage, (B, n, 1)) * P["attn_w_c"]
    scores = ad.tanh(pre) @ ad.reshape(P["attn_v"], (A, 1))
    return ad.softmax(ad.reshape(scores, (B, n)), mask=np.asarray(mask) > 0)


def context(a: Tensor, h: Tensor) -> Tensor:
    B, n, D = h.shape
    return ad.reshape(ad.reshape(a, (B, 1, n)) @ h, (B, D))


def vocab_dist(P: dict[str, Tensor], s: Tensor, h_star: Tensor) -> Tensor:
    hidden = ad.concat([s, h_star], axis=-1) @ P["out_V"] + P["out_b"]
    return ad.softmax(hidden @ P["out_V2"] + P["out_b2"])


def gen_prob(P: dict[str, Tensor], h_star: Tensor, s: Tensor, x: Tensor) -> Tensor:
    """p_gen = sigmoid(w_h* . h* + w_s . s + w_x . x + b), clamped into [1e-6, 1 - 1e-6]."""
    logit = (h_star @ ad.reshape(P["gen_w_hstar"], (-1, 1))
             + s @ ad.reshape(P["gen_w_s"], (-1, 1))
             + x @ ad.reshape(P["gen_w_x"], (-1, 1))
             + P["gen_b"])
    return ad.clip(ad.sigmoid(logit), P_GEN_FLOOR, 1.0 - P_GEN_FLOOR)


def final_dist(p_gen: Tensor, p_vocab: Tensor, a: Tensor, source_extended_ids: np.ndarray,
               n_oov: int) -> Tensor:
    """p_gen * P_vocab (zero-extended over the OOV tail) + (1 - p_gen) * attention scattered onto source ids."""
    B, V = p_vocab.shape
    gen = p_gen * p_vocab
    if n_oov > 0:
        gen = ad.concat([gen, np.zeros((B, n_oov), dtype=p_vocab.dtype)], axis=-1)
    copied = ad.scatter_add(a, source_extended_ids, V + n_oov)
    return gen + (1.0 - p_gen) * copied


def coverage_loss(a: Tensor, coverage: Tensor) -> Tensor:
    return ad.sum(ad.minimum(a, coverage), axis=1)


def step_loss(p_final: Tensor, target_ids: np.ndarray, a: Tensor, coverage: Tensor,
              lam: float = 1.0, use_coverage: bool = True) -> Tensor:
    """Per-example loss at one decoder step, shape (B,)."""
    nll = -ad.log(ad.clip(ad.pick(p_final, target_ids), PROB_FLOOR, 1.0))
    if use_coverage:
        return nll + lam * coverage_loss(a, coverage)
    return nll


def decoder_step(P: dict[str, Tensor], prev_state: tuple[Tensor, Tensor], input_ids: np.ndarray | None,
                 enc: EncoderOutput, coverage: Tensor, use_coverage: bool, n_oov: int,
                 x: Tensor | None = None) -> StepOutput:
    """One decoder step; ``coverage`` is the 64-bit running attention sum before this step."""
    if x is None:
        x = embed(input_ids, P["embedding"])
    s, cell = lstm_cell(x, prev_state[0], prev_state[1], P["dec_W"], P["dec_b"])
    cov = ad.astype(coverage, s.dtype) if coverage.dtype != s.dtype else coverage
    a = attention(P, enc.features, s, cov, enc.mask, use_coverage)
    h_star = context(a, enc.h)
    p_vocab = vocab_dist(P, s, h_star)
    p_gen = gen_prob(P, h_star, s, x)
    p_final = final_dist(p_gen, p_vocab, a, enc.source_extended_ids, n_oov)
    next_cov = coverage + ad.astype(a, np.float64)
    return StepOutput((s, cell), x, a, h_star, p_vocab, p_gen, p_final, coverage, next_cov)


def initial_coverage(mask: np.ndarray) -> Tensor:
    return Tensor(np.zeros(np.asarray(mask).shape, dtype=np.float64), dtype=np.float64)


def sequence_loss(P: dict[str, Tensor], batch: Batch, lam: float = 1.0, use_coverage: bool = False,
                  return_steps: bool = False):
    """Teacher-forced loss: mean over each example's real target steps, then mean over the batch.

    Accumulation happens in float64. With ``return_steps`` the per-step
    per-example loss tensors come back alongside the scalar.
    """
    B, T = batch.summary_input_ids.shape
    lengths = batch.summary_mask.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("sequence_loss: empty target sequence")
    enc = encode(P, batch.article_ids, batch.article_mask, batch.article_extended_ids)
    xs = embed(batch.summary_input_ids, P["embedding"])
    state = enc.init_state
    cov = initial_coverage(batch.article_mask)
    steps = []
    for t in range(T):
        out = decoder_step(P, state, None, enc, cov, use_coverage, batch.max_oov, x=ad.select(xs, 1, t))
        loss_t = step_loss(out.p_final, batch.summary_target_ids[:, t], out.attention,
                           ad.astype(cov, out.attention.dtype), lam, use_coverage)
        steps.append(ad.astype(loss_t, np.float64))
        state, cov = out.state, out.next_coverage
    per_step = ad.stack(steps, axis=1)                                # (B, T)
    weights = batch.summary_mask.astype(np.float64) / lengths[:, None] / B
    total = ad.sum(per_step * weights)
    if return_steps:
        return total, steps
    return total
