"""Training loop, class-weighted objective, AdamW, and binary checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ChaeModel, ModelConfig
from .textcodec import EOS, ChaeSpec, ModelInput, Vocabulary, assemble_input, pad_conditions

log = logging.getLogger(__name__)


class NumericsError(RuntimeError):
    """A loss or gradient stopped being finite."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed, corrupt, or incompatible."""


@dataclass(frozen=True)
class TrainExample:
    """One (context, conditions, target sentence) supervision pair."""

    context_tokens: tuple[str, ...]
    chae: ChaeSpec
    target_tokens: tuple[str, ...]  # ends with the end-of-sentence marker

    def __post_init__(self):
        object.__setattr__(self, "context_tokens", tuple(self.context_tokens))
        object.__setattr__(self, "target_tokens", tuple(self.target_tokens))
        if not self.target_tokens or self.target_tokens[-1] != EOS:
            raise ValueError(f"target must end with {EOS}, got {list(self.target_tokens)[-3:]}")
        if len(self.target_tokens) < 2:
            raise ValueError("target sentence is empty")


@dataclass(frozen=True)
class PreparedExample:
    """Id-level view of a TrainExample for a fixed vocabulary."""

    model_input: ModelInput
    target_ids: np.ndarray
    emotion_ids: tuple[int, ...]
    active: tuple[bool, ...]


def prepare_example(example: TrainExample, vocab: Vocabulary, k: int) -> PreparedExample:
    padded = pad_conditions(example.chae, k) if len(example.chae) != k else example.chae
    return PreparedExample(
        model_input=assemble_input(list(example.context_tokens), padded, vocab, k),
        target_ids=np.asarray(vocab.encode(list(example.target_tokens)), dtype=np.int64),
        emotion_ids=padded.emotion_ids,
        active=padded.active,
    )


def compute_class_weights(labels, n_classes: int) -> np.ndarray:
    """weight[c] = N / (n_classes * count[c]); zero-count classes get 0."""
    counts = np.bincount(np.asarray(list(labels), dtype=np.int64), minlength=n_classes)
    if counts.size > n_classes:
        raise ValueError(f"label id {counts.size - 1} out of range for {n_classes} classes")
    total = counts.sum()
    weights = np.zeros(n_classes, dtype=np.float64)
    present = counts > 0
    weights[present] = total / (n_classes * counts[present])
    return weights


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, T.Tensor],
        lr: float = 5e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericsError(f"non-finite gradient in {name}")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{name}": arr for name, arr in self.m.items()}
        out.update({f"v.{name}": arr for name, arr in self.v.items()})
        return out

    def load_state_arrays(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        for name in self.m:
            self.m[name] = arrays[f"m.{name}"].copy()
            self.v[name] = arrays[f"v.{name}"].copy()


def clip_gradients(params: dict[str, T.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class StepStats:
    loss: float
    nll: float
    emo: float
    grad_norm: float


def train_step(
    model: ChaeModel,
    batch: list[PreparedExample],
    optimizer: AdamW,
    class_weights: np.ndarray | None = None,
    clip_norm: float = 1.0,
) -> StepStats:
    """One optimizer step on the mean loss over the batch."""
    optimizer.zero_grad()
    totals: list[T.Tensor] = []
    nll_sum = 0.0
    emo_sum = 0.0
    for idx, ex in enumerate(batch):
        out = model.forward(ex.model_input, ex.target_ids, ex.emotion_ids, ex.active, class_weights)
        if not np.isfinite(out.total.data):
            raise NumericsError(f"non-finite loss at batch index {idx}")
        totals.append(out.total)
        nll_sum += float(out.nll.data)
        emo_sum += float(out.emo.data) if out.emo is not None else 0.0
    loss = totals[0]
    for t in totals[1:]:
        loss = T.add(loss, t)
    loss = T.scalar_mul(loss, 1.0 / len(batch))
    T.backward(loss)
    norm = clip_gradients(model.params, clip_norm)
    optimizer.step()
    return StepStats(
        loss=float(loss.data), nll=nll_sum / len(batch), emo=emo_sum / len(batch), grad_norm=norm
    )


def evaluate_nll(model: ChaeModel, examples: list[PreparedExample]) -> float:
    """Mean over examples of the per-example mean-token negative log-likelihood."""
    if not examples:
        raise ValueError("cannot evaluate on an empty split")
    total = 0.0
    with T.no_grad():
        for ex in examples:
            out = model.forward(ex.model_input, ex.target_ids, ex.emotion_ids, ex.active)
            total += float(out.nll.data)
    return total / len(examples)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    keep_best: bool = True

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val_nll: float = float("inf")
    steps: int = 0
    class_weights: np.ndarray | None = None
    optimizer: AdamW | None = None
    rng: np.random.Generator | None = None


def train_loop(
    model: ChaeModel,
    train: list[PreparedExample],
    val: list[PreparedExample],
    config: TrainConfig,
    optimizer: AdamW | None = None,
    rng: np.random.Generator | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Epoch loop with shuffling, validation tracking, and best-weights restore.

    Pass ``optimizer`` and ``rng`` to resume a run bit-exactly from a
    checkpoint; fresh ones are created from ``config`` otherwise.
    """
    if not train:
        raise ValueError("training split is empty")
    if not val:
        raise ValueError("validation split is empty")
    if optimizer is None:
        optimizer = AdamW(
            model.params,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
        )
    if rng is None:
        rng = np.random.default_rng(config.seed)

    labels = [l for ex in train for l, a in zip(ex.emotion_ids, ex.active) if a]
    weights = compute_class_weights(labels, model.config.n_emotions) if labels else None

    result = TrainResult(class_weights=weights, optimizer=optimizer, rng=rng)
    best_params: dict[str, np.ndarray] | None = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(train), config.batch_size):
            batch = [train[i] for i in order[start : start + config.batch_size]]
            stats = train_step(model, batch, optimizer, weights, config.clip_norm)
            epoch_loss += stats.loss
            result.steps += 1
            n_batches += 1
        val_nll = evaluate_nll(model, val)
        entry = {"epoch": epoch, "train_loss": epoch_loss / n_batches, "val_nll": val_nll}
        result.history.append(entry)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            log.info("epoch %d train_loss %.4f val_nll %.4f", epoch, entry["train_loss"], val_nll)
        if val_nll < result.best_val_nll:
            result.best_val_nll = val_nll
            if config.keep_best:
                best_params = {name: p.data.copy() for name, p in model.params.items()}
    if config.keep_best and best_params is not None:
        for name, p in model.params.items():
            p.data = best_params[name]
    return result


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, length-prefixed JSON header, raw
# little-endian float64 tensor payload in header order, CRC32 trailer.
# ---------------------------------------------------------------------------

MAGIC = b"CHAE"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab_hash: str
    step: int = 0
    rng_state: dict | None = None
    opt_t: int = 0
    opt_arrays: dict[str, np.ndarray] | None = None

    def build_model(self) -> ChaeModel:
        return ChaeModel(self.config, {name: T.param(arr.copy()) for name, arr in self.params.items()})

    def build_optimizer(self, model: ChaeModel, config: TrainConfig) -> AdamW:
        opt = AdamW(
            model.params,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
        )
        if self.opt_arrays is not None:
            opt.load_state_arrays(self.opt_t, self.opt_arrays)
        return opt

    def build_rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def save_checkpoint(
    path,
    config: ModelConfig,
    params: dict[str, T.Tensor] | dict[str, np.ndarray],
    vocab_hash: str,
    step: int = 0,
    rng: np.random.Generator | None = None,
    rng_state: dict | None = None,
    optimizer: AdamW | None = None,
    opt_t: int | None = None,
    opt_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    arrays = {name: (p.data if isinstance(p, T.Tensor) else p) for name, p in params.items()}
    if optimizer is not None:
        opt_t = optimizer.t
        opt_arrays = optimizer.state_arrays()
    if rng is not None:
        rng_state = rng.bit_generator.state

    header = {
        "config": config.to_dict(),
        "vocab_hash": vocab_hash,
        "step": int(step),
        "rng_state": rng_state,
        "tensors": [[name, list(arr.shape)] for name, arr in arrays.items()],
        "opt": None
        if opt_arrays is None
        else {"t": int(opt_t or 0), "tensors": [[name, list(arr.shape)] for name, arr in opt_arrays.items()]},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", VERSION)
    payload += struct.pack("<Q", len(header_bytes))
    payload += header_bytes
    for name, _ in header["tensors"]:
        payload += arrays[name].astype("<f8").tobytes()
    if opt_arrays is not None:
        for name, _ in header["opt"]["tensors"]:
            payload += opt_arrays[name].astype("<f8").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    with open(path, "wb") as fh:
        fh.write(payload)


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise CheckpointError(f"{path}: corrupt checkpoint (CRC mismatch)")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_start = 16
    header_end = header_start + header_len
    try:
        header = json.loads(blob[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from err

    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch (checkpoint {header['vocab_hash'][:12]}..., "
            f"current {expected_vocab_hash[:12]}...)"
        )

    offset = header_end

    def read_array(shape) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += n * 8
        return arr

    params = {name: read_array(shape) for name, shape in header["tensors"]}
    opt_arrays = None
    opt_t = 0
    if header["opt"] is not None:
        opt_t = header["opt"]["t"]
        opt_arrays = {name: read_array(shape) for name, shape in header["opt"]["tensors"]}
    if offset != len(blob) - 4:
        raise CheckpointError(f"{path}: corrupt checkpoint (payload size mismatch)")

    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        vocab_hash=header["vocab_hash"],
        step=header["step"],
        rng_state=header["rng_state"],
        opt_t=opt_t,
        opt_arrays=opt_arrays,
    )
