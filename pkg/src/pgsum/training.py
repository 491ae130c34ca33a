"""Training loop, fine-tuning, validation and the binary checkpoint format."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import EncodedExample, make_batch
from .model import ModelConfig, ModelParams, sequence_loss

log = logging.getLogger(__name__)

MAGIC = b"PGNC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainingConfig:
    learning_rate: float = 0.15
    batch_size: int = 16
    max_steps: int = 5000
    coverage_frac: float = 0.2
    coverage_min_steps: int = 50
    coverage_phase_steps: int | None = None
    lam: float = 1.0
    clip_norm: float = 2.0
    validate_every: int = 100
    patience: int = 5
    seed: int = 0
    epsilon: float = 1e-10
    initial_accumulator: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.validate_every < 1 or self.patience < 1:
            raise ValueError("batch_size, validate_every and patience must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if not 0.0 <= self.coverage_frac <= 1.0:
            raise ValueError("coverage_frac must lie in [0, 1]")

    def coverage_steps(self) -> int:
        """Length of the final coverage phase."""
        if self.coverage_phase_steps is not None:
            return min(self.coverage_phase_steps, self.max_steps)
        if self.coverage_frac == 0:
            return 0
        return min(self.max_steps, max(self.coverage_min_steps, round(self.coverage_frac * self.max_steps)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    params: ModelParams
    metadata: dict

    @property
    def coverage(self) -> bool:
        return bool(self.metadata.get("coverage", False))

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))


def make_metadata(config: ModelConfig, vocab_hash: str, step: int, coverage: bool,
                  training: dict | None = None) -> dict:
    return {"format_version": FORMAT_VERSION, "dims": config.to_dict(), "vocab_hash": vocab_hash,
            "step": step, "coverage": coverage, "config": training or {}}


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.metadata)
    meta["format_version"] = FORMAT_VERSION
    meta["dims"] = ckpt.params.config.to_dict()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    for name in sorted(ckpt.params.arrays):
        arr = np.ascontiguousarray(ckpt.params.arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def parse_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated checkpoint (need {n} bytes at offset {pos})")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
        config = ModelConfig(**meta["dims"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise CheckpointError(f"{source}: corrupt metadata block ({err})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: metadata format version {meta.get('format_version')}")

    expected = config.param_shapes()
    arrays: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        if name_len > 256:
            raise CheckpointError(f"{source}: implausible parameter name length {name_len} at offset {pos - 4}")
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{source}: corrupt parameter name at offset {pos}") from None
        if name not in expected:
            raise CheckpointError(f"{source}: unknown parameter {name!r}")
        if name in arrays:
            raise CheckpointError(f"{source}: duplicate parameter {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CheckpointError(f"{source}: implausible rank {rank} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if tuple(dims) != expected[name]:
            raise CheckpointError(f"{source}: {name} has shape {dims}, metadata implies {expected[name]}")
        count = int(np.prod(dims))
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise CheckpointError(f"{source}: missing parameters {missing}")
    try:
        params = ModelParams(config, arrays)
    except ValueError as err:
        raise CheckpointError(f"{source}: {err}") from None
    return Checkpoint(params, meta)


# -------------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    final_params: ModelParams
    curve: list[tuple[int, float, float | None]] = field(default_factory=list)
    best_val_loss: float | None = None
    steps: int = 0

    def write_curve(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "val_loss"])
            for step, loss, val in self.curve:
                w.writerow([step, repr(loss), "" if val is None else repr(val)])


def validate(params: ModelParams, val_set: Sequence[EncodedExample], lam: float = 1.0,
             use_coverage: bool = False, batch_size: int = 16) -> float:
    """Teacher-forced mean loss over ``val_set``; parameters are only read."""
    if not val_set:
        raise ValueError("validation set is empty")
    total = 0.0
    P = params.tensors(requires_grad=False)
    with ad.no_grad():
        for i in range(0, len(val_set), batch_size):
            chunk = val_set[i:i + batch_size]
            total += sequence_loss(P, make_batch(chunk), lam, use_coverage).item() * len(chunk)
    return total / len(val_set)


def _batches(examples: Sequence[EncodedExample], batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(len(examples))
        for i in range(0, len(order), batch_size):
            yield make_batch([examples[j] for j in order[i:i + batch_size]])


def train(config: TrainingConfig, train_set: Sequence[EncodedExample], val_set: Sequence[EncodedExample] | None,
          init: ModelParams | Checkpoint, vocab_hash: str) -> TrainResult:
    """Adagrad training with a final coverage phase and validation-driven checkpointing.

    ``init`` is either fresh parameters or a checkpoint to continue from. When
    validation patience runs out before the coverage phase, training jumps
    straight into that phase; patience running out inside it ends training.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if isinstance(init, Checkpoint):
        params, coverage, start_step = init.params.copy(), init.coverage, init.step
    else:
        params, coverage, start_step = init.copy(), False, 0
    rng = np.random.default_rng(config.seed)
    opt = ad.AdagradState(config.learning_rate, config.epsilon, config.initial_accumulator)
    batches = _batches(train_set, config.batch_size, rng)

    n_cov = config.coverage_steps()
    total_steps = config.max_steps
    cov_start = total_steps - n_cov if not coverage else 0

    def snapshot(p: ModelParams, step: int, cov: bool) -> Checkpoint:
        return Checkpoint(p.copy(), make_metadata(p.config, vocab_hash, start_step + step, cov, config.to_dict()))

    best = snapshot(params, 0, coverage)
    best_val = None
    bad_validations = 0
    curve: list[tuple[int, float, float | None]] = []
    result = TrainResult(best, params, curve)

    step = 0
    while step < total_steps:
        if not coverage and step >= cov_start and n_cov > 0:
            coverage = True
            params.arrays["attn_w_c"][...] = 0.0
            best_val, bad_validations = None, 0
            best = snapshot(params, step, coverage)
            log.info("step %d: coverage phase begins (%d steps)", step, total_steps - step)
        step += 1
        batch = next(batches)
        P = params.tensors(requires_grad=True)
        try:
            loss = sequence_loss(P, batch, config.lam, coverage)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise ad.NonFiniteError("loss is not finite")
            ad.backward(loss)
        except ad.NonFiniteError as err:
            result.checkpoint, result.steps = best, step
            raise TrainingAborted(f"step {step}: {err}", result) from err
        grads = {k: t.grad for k, t in P.items() if t.grad is not None}
        ad.clip_by_global_norm(grads, config.clip_norm)
        ad.adagrad_step(params.arrays, grads, opt)

        val_loss = None
        if val_set and (step % config.validate_every == 0 or step == total_steps):
            val_loss = validate(params, val_set, config.lam, coverage, config.batch_size)
            if best_val is None or val_loss < best_val:
                best_val, bad_validations = val_loss, 0
                best = snapshot(params, step, coverage)
            else:
                bad_validations += 1
            log.info("step %d: loss %.4f val %.4f", step, loss_value, val_loss)
            if bad_validations >= config.patience:
                if not coverage and n_cov > 0:
                    log.info("step %d: patience exhausted, moving to the coverage phase", step)
                    cov_start, total_steps = step, step + n_cov
                else:
                    log.info("step %d: patience exhausted, stopping", step)
                    curve.append((step, loss_value, val_loss))
                    break
        curve.append((step, loss_value, val_loss))

    if not val_set:
        best = snapshot(params, step, coverage)
    result.checkpoint, result.best_val_loss, result.steps = best, best_val, step
    return result


def finetune(checkpoint: Checkpoint, config: TrainingConfig, train_set: Sequence[EncodedExample],
             val_set: Sequence[EncodedExample] | None, vocab_hash: str) -> TrainResult:
    """Continue training from ``checkpoint`` on a new corpus encoded with the same vocabulary.

    Optimizer accumulators start fresh. A zero-step run returns the input checkpoint untouched.
    """
    if checkpoint.metadata.get("vocab_hash") != vocab_hash:
        raise CheckpointError("vocabulary hash mismatch: the corpus must be encoded with the checkpoint's vocabulary")
    if config.max_steps == 0:
        return TrainResult(checkpoint, checkpoint.params, [], None, 0)
    return train(config, train_set, val_set, checkpoint, vocab_hash)
