"""Encoder-decoder transformer with a copy pointer and per-character emotion heads.

The encoder reads ``<s> context conditions </s>``. The decoder generates
the next sentence token by token; at each step the output distribution is
a gated mixture of the vocabulary softmax and a copy distribution over
the condition-region tokens, where the copy weights are the head-averaged
cross-attention of the last decoder layer restricted to the condition
region. One emotion classification head per condition slot predicts that
character's emotion from the mean-pooled decoder states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .textcodec import BOS_ID, ModelInput


class ConfigError(ValueError):
    """Model configuration is inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    k: int = 2
    n_emotions: int = 9
    lam: float = 1.0
    max_len: int = 256
    enable_copy: bool = True
    enable_emotion_loss: bool = True

    def __post_init__(self):
        if self.vocab_size < 11:
            raise ConfigError(f"vocab_size must be >= 11, got {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.n_emotions < 2:
            raise ConfigError(f"n_emotions must be >= 2, got {self.n_emotions}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers,
            "d_ff": self.d_ff,
            "k": self.k,
            "n_emotions": self.n_emotions,
            "lam": self.lam,
            "max_len": self.max_len,
            "enable_copy": self.enable_copy,
            "enable_emotion_loss": self.enable_emotion_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table; even dims sine, odd dims cosine."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, T.Tensor]:
    """Seeded parameter set; identical seeds give identical parameters."""
    rng = np.random.default_rng(seed)
    d, ff, v, e = config.d_model, config.d_ff, config.vocab_size, config.n_emotions
    params: dict[str, T.Tensor] = {}

    def w(name, fan_in, fan_out):
        params[name] = T.param(xavier_uniform(rng, fan_in, fan_out))

    def b(name, n):
        params[name] = T.param(np.zeros(n))

    def ln(prefix):
        params[f"{prefix}_g"] = T.param(np.ones(d))
        params[f"{prefix}_b"] = T.param(np.zeros(d))

    def attn_block(prefix):
        for part in ("wq", "wk", "wv", "wo"):
            w(f"{prefix}.{part}", d, d)
        for part in ("bq", "bk", "bv", "bo"):
            b(f"{prefix}.{part}", d)

    def ffn_block(prefix):
        w(f"{prefix}.w1", d, ff)
        b(f"{prefix}.b1", ff)
        w(f"{prefix}.w2", ff, d)
        b(f"{prefix}.b2", d)

    w("tok_emb", v, d)
    for i in range(config.n_enc_layers):
        ln(f"enc{i}.ln1")
        attn_block(f"enc{i}.attn")
        ln(f"enc{i}.ln2")
        ffn_block(f"enc{i}.ffn")
    ln("enc_ln")
    for i in range(config.n_dec_layers):
        ln(f"dec{i}.ln1")
        attn_block(f"dec{i}.self")
        ln(f"dec{i}.ln2")
        attn_block(f"dec{i}.cross")
        ln(f"dec{i}.ln3")
        ffn_block(f"dec{i}.ffn")
    ln("dec_ln")
    w("w_voc", d, v)
    b("b_voc", v)
    w("w_p", 3 * d, 1)
    for i in range(config.k):
        w(f"w_emo{i}", d, e)
    return params


# ---------------------------------------------------------------------------
# Distribution ops
# ---------------------------------------------------------------------------


def vocab_distribution(h_dec: T.Tensor, w_voc: T.Tensor, b_voc: T.Tensor, temperature: float = 1.0) -> T.Tensor:
    """Softmax over the vocabulary; temperature scales the logits."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    logits = T.add(T.matmul(h_dec, w_voc), b_voc)
    if temperature != 1.0:
        logits = T.scalar_mul(logits, 1.0 / temperature)
    return T.softmax(logits, axis=-1)


def average_attention(cross_attn: T.Tensor, chae_mask: np.ndarray) -> T.Tensor:
    """Head-averaged attention restricted to the condition region, renormalized.

    Rows whose restricted mass underflows to zero fall back to a uniform
    distribution over the condition region (no gradient through the patch).
    """
    if not chae_mask.any():
        raise T.ShapeError("average_attention: condition mask is empty")
    avg = T.mean(cross_attn, axis=0)
    mask = chae_mask.astype(np.float64)
    masked = T.mul(avg, T.tensor(mask))
    denom = T.tensor_sum(masked, axis=-1, keepdims=True)
    zero_rows = denom.data[:, 0] == 0.0
    if zero_rows.any():
        uniform = mask / mask.sum()
        patch = np.where(zero_rows[:, None], uniform[None, :], 0.0)
        masked = T.add(masked, T.tensor(patch))
        denom = T.tensor_sum(masked, axis=-1, keepdims=True)
    return T.div(masked, denom)


def context_vector(attn_avg: T.Tensor, h_enc: T.Tensor) -> T.Tensor:
    """Attention-weighted sum of encoder states, one vector per step."""
    return T.matmul(attn_avg, h_enc)


def copy_gate(h_dec: T.Tensor, h_con: T.Tensor, e_y: T.Tensor, w_p: T.Tensor) -> T.Tensor:
    """Generation probability per step from [state; context; input embedding]."""
    return T.sigmoid(T.matmul(T.concat([h_dec, h_con, e_y], axis=-1), w_p))


def copy_distribution(attn_avg: T.Tensor, input_ids: np.ndarray, vocab_size: int) -> T.Tensor:
    """Scatter attention mass onto the vocabulary by source-token id."""
    onehot = np.zeros((len(input_ids), vocab_size))
    onehot[np.arange(len(input_ids)), np.asarray(input_ids, dtype=np.intp)] = 1.0
    return T.matmul(attn_avg, T.tensor(onehot))


def mixture_distribution(p_gen: T.Tensor, p_voc: T.Tensor, copy_dist: T.Tensor) -> T.Tensor:
    """p_gen * vocabulary distribution + (1 - p_gen) * copy distribution."""
    return T.add(T.mul(p_gen, p_voc), T.mul(T.sub(T.tensor(1.0), p_gen), copy_dist))


def emotion_distribution(pooled: T.Tensor, w_emo: T.Tensor) -> T.Tensor:
    """Per-head emotion softmax from the pooled decoder state, shape (1, e)."""
    return T.softmax(T.matmul(pooled, w_emo), axis=-1)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

PROB_FLOOR = 1e-12


def nll_loss(probs: T.Tensor, target_ids: np.ndarray) -> T.Tensor:
    """Mean negative log-probability of the target tokens."""
    picked = T.take_per_row(probs, target_ids)
    return T.scalar_mul(T.mean(T.log(T.clamp_min(picked, PROB_FLOOR))), -1.0)


def emotion_loss(
    dists: list[T.Tensor],
    labels,
    active,
    class_weights: np.ndarray | None = None,
) -> T.Tensor:
    """Class-weighted cross-entropy, averaged over active condition slots."""
    terms: list[T.Tensor] = []
    for dist, label, act in zip(dists, labels, active):
        if not act:
            continue
        weight = 1.0 if class_weights is None else float(class_weights[label])
        picked = T.take_per_row(dist, [int(label)])
        terms.append(T.scalar_mul(T.log(T.clamp_min(picked, PROB_FLOOR)), -weight))
    if not terms:
        return T.tensor(0.0)
    return T.mean(T.concat(terms, axis=0))


def total_loss(nll: T.Tensor, emo: T.Tensor | None, lam: float) -> T.Tensor:
    """nll + lam * emotion loss; plain nll when the emotion term is off."""
    if emo is None:
        return nll
    return T.add(nll, T.scalar_mul(emo, lam))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class DecoderOutput:
    h_dec: T.Tensor  # (T_dec, d)
    cross_attn: T.Tensor  # (heads, T_dec, T_enc) from the last decoder layer
    input_emb: T.Tensor  # (T_dec, d) embeddings actually fed to the decoder


@dataclass
class ForwardResult:
    probs: T.Tensor  # (T_dec, vocab) final output distribution
    p_gen: T.Tensor | None  # (T_dec, 1); None when copy is disabled
    attn_avg: T.Tensor | None  # (T_dec, T_enc) condition-restricted attention
    h_dec: T.Tensor
    emotion_dists: list[T.Tensor] = field(default_factory=list)
    nll: T.Tensor | None = None
    emo: T.Tensor | None = None
    total: T.Tensor | None = None


class ChaeModel:
    """Bundles config and parameters; all methods are pure graph builders."""

    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params
        self._pos = sinusoidal_positions(config.max_len, config.d_model)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "ChaeModel":
        return cls(config, init_params(config, seed))

    # -- building blocks ----------------------------------------------------

    def _ln(self, x: T.Tensor, prefix: str) -> T.Tensor:
        return T.add(T.mul(T.layer_norm(x), self.params[f"{prefix}_g"]), self.params[f"{prefix}_b"])

    def _embed(self, ids: np.ndarray) -> T.Tensor:
        n = len(ids)
        if n > self.config.max_len:
            raise ConfigError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        emb = T.scalar_mul(T.embedding_gather(self.params["tok_emb"], ids), math.sqrt(self.config.d_model))
        return T.add(emb, T.tensor(self._pos[:n]))

    def _mha(self, q_in: T.Tensor, kv_in: T.Tensor, prefix: str, causal: bool):
        p = self.params
        d, h = self.config.d_model, self.config.n_heads
        dh = d // h
        t_q, t_k = q_in.shape[0], kv_in.shape[0]

        def heads(x):
            return T.transpose(T.reshape(x, (x.shape[0], h, dh)), (1, 0, 2))

        q = heads(T.add(T.matmul(q_in, p[f"{prefix}.wq"]), p[f"{prefix}.bq"]))
        k = heads(T.add(T.matmul(kv_in, p[f"{prefix}.wk"]), p[f"{prefix}.bk"]))
        v = heads(T.add(T.matmul(kv_in, p[f"{prefix}.wv"]), p[f"{prefix}.bv"]))
        scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        if causal:
            mask = np.triu(np.full((t_q, t_k), -1e9), k=1)
            scores = T.add(scores, T.tensor(mask))
        probs = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (1, 0, 2)), (t_q, d))
        out = T.add(T.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])
        return out, probs

    def _ffn(self, x: T.Tensor, prefix: str) -> T.Tensor:
        p = self.params
        h = T.relu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return T.add(T.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    # -- encoder / decoder ---------------------------------------------------

    def encode(self, model_input: ModelInput) -> T.Tensor:
        """Bidirectional encoding of the full conditioned input, (T_enc, d)."""
        x = self._embed(model_input.ids)
        for i in range(self.config.n_enc_layers):
            normed = self._ln(x, f"enc{i}.ln1")
            a, _ = self._mha(normed, normed, f"enc{i}.attn", causal=False)
            x = T.add(x, a)
            x = T.add(x, self._ffn(self._ln(x, f"enc{i}.ln2"), f"enc{i}.ffn"))
        return self._ln(x, "enc_ln")

    def decode(self, prefix_ids: np.ndarray, h_enc: T.Tensor) -> DecoderOutput:
        """Causal decoding of the prefix with cross-attention into the encoder."""
        emb = self._embed(prefix_ids)
        x = emb
        cross_probs = None
        for i in range(self.config.n_dec_layers):
            normed = self._ln(x, f"dec{i}.ln1")
            sa, _ = self._mha(normed, normed, f"dec{i}.self", causal=True)
            x = T.add(x, sa)
            ca, cross_probs = self._mha(self._ln(x, f"dec{i}.ln2"), h_enc, f"dec{i}.cross", causal=False)
            x = T.add(x, ca)
            x = T.add(x, self._ffn(self._ln(x, f"dec{i}.ln3"), f"dec{i}.ffn"))
        return DecoderOutput(h_dec=self._ln(x, "dec_ln"), cross_attn=cross_probs, input_emb=emb)

    # -- full passes ----------------------------------------------------------

    def output_distributions(
        self, model_input: ModelInput, prefix_ids: np.ndarray, h_enc: T.Tensor, temperature: float = 1.0
    ) -> tuple[T.Tensor, T.Tensor | None, T.Tensor | None, DecoderOutput]:
        """Final per-step distributions for a decoder prefix.

        Returns (probs, p_gen, attn_avg, decoder_output); p_gen and
        attn_avg are None when copy is disabled. Temperature scales only
        the vocabulary logits; the copy side is untouched.
        """
        dec = self.decode(prefix_ids, h_enc)
        p_voc = vocab_distribution(dec.h_dec, self.params["w_voc"], self.params["b_voc"], temperature)
        if not self.config.enable_copy:
            return p_voc, None, None, dec
        attn_avg = average_attention(dec.cross_attn, model_input.chae_mask)
        h_con = context_vector(attn_avg, h_enc)
        p_gen = copy_gate(dec.h_dec, h_con, dec.input_emb, self.params["w_p"])
        copy_dist = copy_distribution(attn_avg, model_input.ids, self.config.vocab_size)
        probs = mixture_distribution(p_gen, p_voc, copy_dist)
        return probs, p_gen, attn_avg, dec

    def emotion_heads(self, h_dec: T.Tensor) -> list[T.Tensor]:
        """One emotion distribution per condition slot from mean-pooled states."""
        pooled = T.reshape(T.mean(h_dec, axis=0), (1, self.config.d_model))
        return [
            emotion_distribution(pooled, self.params[f"w_emo{i}"])
            for i in range(self.config.k)
        ]

    def forward(
        self,
        model_input: ModelInput,
        target_ids: np.ndarray,
        emotion_ids,
        active,
        class_weights: np.ndarray | None = None,
        temperature: float = 1.0,
    ) -> ForwardResult:
        """Teacher-forced pass: distributions plus all loss terms.

        ``target_ids`` must end with the end-of-sentence id; the decoder
        prefix is the target shifted right behind ``<s>``.
        """
        target_ids = np.asarray(target_ids, dtype=np.int64)
        if target_ids.size == 0:
            raise ConfigError("target is empty")
        prefix = np.concatenate(([BOS_ID], target_ids[:-1]))
        h_enc = self.encode(model_input)
        probs, p_gen, attn_avg, dec = self.output_distributions(model_input, prefix, h_enc)
        result = ForwardResult(probs=probs, p_gen=p_gen, attn_avg=attn_avg, h_dec=dec.h_dec)
        result.emotion_dists = self.emotion_heads(dec.h_dec)
        result.nll = nll_loss(probs, target_ids)
        if self.config.enable_emotion_loss:
            result.emo = emotion_loss(result.emotion_dists, emotion_ids, active, class_weights)
        result.total = total_loss(result.nll, result.emo, self.config.lam)
        return result

    def predict_emotions(self, model_input: ModelInput, sentence_ids: np.ndarray) -> list[tuple[int, np.ndarray]]:
        """Per-head (argmax label id, probability vector) for a finished sentence.

        Pools over the same teacher-forced states the training loss sees:
        the decoder prefix is the sentence shifted right behind ``<s>``.
        """
        sentence_ids = np.asarray(sentence_ids, dtype=np.int64)
        with T.no_grad():
            prefix = np.concatenate(([BOS_ID], sentence_ids[:-1]))
            h_enc = self.encode(model_input)
            dec = self.decode(prefix, h_enc)
            dists = self.emotion_heads(dec.h_dec)
        return [(int(np.argmax(d.data[0])), d.data[0].copy()) for d in dists]
