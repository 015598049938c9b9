"""The four-model quartet at desk scale, plus the frozen synthetic teacher.

Video encoder: temporal-conv frontend -> linear projection -> pre-norm
transformer stack. Generator: residual feature blocks over concat(v, z).
Discriminator: hybrid 1-d conv branch + 2-d conv branch, mean-pooled.
Decoder: pre-norm transformer decoder with an output projection over
content tokens + sos/eos and a separate linear CTC head on the memory.

Token id layout follows the corpus: blank 0, content 1..V, sos V+1,
eos V+2. Decoder tables index ids shifted down by one (no blank row).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tc
from .tensor import ParameterStore, ShapeMismatch, Tensor

MASK_OFF = -1e9  # additive attention mask; exp() underflows to exactly 0


@dataclass(frozen=True)
class QuartetConfig:
    """Shapes for all four models; defaults are the desk-scale reduction."""

    feature_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    generator_blocks: int = 2
    attention_heads: int = 4
    ff_dim: int = 64
    vocab_size: int = 24
    input_dim: int = 12          # width of the per-frame observation vectors
    max_len: int = 16
    noise_dim: int = 8
    disc_channels: int = 8
    dropout: float = 0.0

    def __post_init__(self):
        extents = (
            self.feature_dim, self.encoder_layers, self.decoder_layers,
            self.generator_blocks, self.attention_heads, self.ff_dim,
            self.vocab_size, self.input_dim, self.max_len, self.noise_dim,
            self.disc_channels,
        )
        if any(e <= 0 for e in extents):
            raise ValueError(f"all extents must be positive: {self}")
        if self.feature_dim % self.attention_heads:
            raise ValueError(
                f"feature_dim {self.feature_dim} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if self.feature_dim % 2:
            raise ValueError("feature_dim must be even for sinusoidal positions")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1): {self.dropout}")


@lru_cache(maxsize=None)
def sinusoidal_positions(t_len: int, d: int) -> np.ndarray:
    pos = np.arange(t_len)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((t_len, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    pe.setflags(write=False)
    return pe


def one_hot(ids: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros(ids.shape + (depth,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def _xavier(rng, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return tc.mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, store, name, d_in, d_out, rng, zero_init=False):
        w = np.zeros((d_in, d_out)) if zero_init else _xavier(rng, d_in, d_out, (d_in, d_out))
        self.w = store.register(f"{name}.w", Tensor(w))
        self.b = store.register(f"{name}.b", Tensor(np.zeros(d_out)))

    def __call__(self, x):
        return tc.bias_add(tc.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, store, name, d):
        self.gain = store.register(f"{name}.gain", Tensor(np.ones(d)))
        self.bias = store.register(f"{name}.bias", Tensor(np.zeros(d)))

    def __call__(self, x):
        return tc.layer_norm_last(x, self.gain, self.bias)


class Conv1d:
    def __init__(self, store, name, kernel, c_in, c_out, rng, zero_init=False):
        if zero_init:
            w = np.zeros((kernel, c_in, c_out))
        else:
            w = _xavier(rng, kernel * c_in, kernel * c_out, (kernel, c_in, c_out))
        self.w = store.register(f"{name}.w", Tensor(w))
        self.b = store.register(f"{name}.b", Tensor(np.zeros(c_out)))

    def __call__(self, x):
        return tc.conv1d_same(x, self.w, self.b)


class MultiHeadAttention:
    def __init__(self, store, name, d, heads, rng):
        self.d = d
        self.heads = heads
        self.dh = d // heads
        self.wq = Linear(store, f"{name}.wq", d, d, rng)
        self.wk = Linear(store, f"{name}.wk", d, d, rng)
        self.wv = Linear(store, f"{name}.wv", d, d, rng)
        self.wo = Linear(store, f"{name}.wo", d, d, rng)

    def _split(self, x, b, t):
        # (B, T, d) -> (B, heads, T, dh)
        return tc.transpose(tc.reshape(x, (b, t, self.heads, self.dh)), (0, 2, 1, 3))

    def __call__(self, q_in, kv_in, mask: np.ndarray | None = None):
        b, tq = q_in.shape[0], q_in.shape[1]
        tk = kv_in.shape[1]
        q = self._split(self.wq(q_in), b, tq)
        k = self._split(self.wk(kv_in), b, tk)
        v = self._split(self.wv(kv_in), b, tk)
        scores = tc.mul_scalar(tc.matmul(q, tc.transpose_last_two(k)), 1.0 / math.sqrt(self.dh))
        if mask is not None:
            scores = tc.add(scores, Tensor(np.broadcast_to(mask, scores.shape).copy()))
        ctx = tc.matmul(tc.softmax_last(scores), v)
        merged = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.d))
        return self.wo(merged)


class FeedForward:
    def __init__(self, store, name, d, hidden, rng):
        self.w1 = Linear(store, f"{name}.w1", d, hidden, rng)
        self.w2 = Linear(store, f"{name}.w2", hidden, d, rng)

    def __call__(self, x):
        return self.w2(tc.relu(self.w1(x)))


class EncoderLayer:
    def __init__(self, store, name, d, heads, ff, rng):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ff = FeedForward(store, f"{name}.ff", d, ff, rng)

    def __call__(self, x, dropout=0.0, drop_rng=None):
        h = self.ln1(x)
        x = tc.add(x, _dropout(self.attn(h, h), dropout, drop_rng))
        x = tc.add(x, _dropout(self.ff(self.ln2(x)), dropout, drop_rng))
        return x


class DecoderLayer:
    def __init__(self, store, name, d, heads, ff, rng):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", d, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", d, heads, rng)
        self.ln3 = LayerNorm(store, f"{name}.ln3", d)
        self.ff = FeedForward(store, f"{name}.ff", d, ff, rng)

    def __call__(self, x, memory, causal_mask, dropout=0.0, drop_rng=None):
        h = self.ln1(x)
        x = tc.add(x, _dropout(self.self_attn(h, h, mask=causal_mask), dropout, drop_rng))
        x = tc.add(x, _dropout(self.cross_attn(self.ln2(x), memory), dropout, drop_rng))
        x = tc.add(x, _dropout(self.ff(self.ln3(x)), dropout, drop_rng))
        return x


def _add_positions(x):
    b, t, d = x.shape
    pe = np.broadcast_to(sinusoidal_positions(t, d), (b, t, d)).copy()
    return tc.add(x, Tensor(pe))


# ---------------------------------------------------------------------------
# the quartet


class VideoEncoder:
    """Length-preserving map from per-frame observations to d-dim features."""

    def __init__(self, store, cfg: QuartetConfig, rng, name="encoder"):
        d = cfg.feature_dim
        self.cfg = cfg
        self.frontend = Conv1d(store, f"{name}.frontend", 3, cfg.input_dim, d, rng)
        self.proj = Linear(store, f"{name}.proj", d, d, rng)
        self.layers = [
            EncoderLayer(store, f"{name}.layers.{i}", d, cfg.attention_heads, cfg.ff_dim, rng)
            for i in range(cfg.encoder_layers)
        ]
        self.ln_out = LayerNorm(store, f"{name}.ln_out", d)

    def __call__(self, x, drop_rng=None):
        if x.values.ndim != 3 or x.shape[-1] != self.cfg.input_dim:
            raise ShapeMismatch(
                f"encoder wants (B, T, {self.cfg.input_dim}), got {x.shape}"
            )
        if x.shape[1] > self.cfg.max_len:
            raise ShapeMismatch(
                f"sequence length {x.shape[1]} exceeds max_len {self.cfg.max_len}"
            )
        h = _add_positions(self.proj(self.frontend(x)))
        for layer in self.layers:
            h = layer(h, self.cfg.dropout, drop_rng)
        return self.ln_out(h)


class Generator:
    """Residual feature translator G(z, v): same shape out as in."""

    def __init__(self, store, cfg: QuartetConfig, rng, name="generator"):
        d = cfg.feature_dim
        self.cfg = cfg
        self.in_proj = Linear(store, f"{name}.in_proj", d + cfg.noise_dim, d, rng)
        self.blocks = [
            (Linear(store, f"{name}.blocks.{i}.w1", d, d, rng),
             Linear(store, f"{name}.blocks.{i}.w2", d, d, rng))
            for i in range(cfg.generator_blocks)
        ]
        # zero-init keeps the adversarial game quiet until stage 1 grows it
        self.out_proj = Linear(store, f"{name}.out_proj", d, d, rng, zero_init=True)

    def __call__(self, v, z):
        if z.values.ndim != 2 or z.shape != (v.shape[0], self.cfg.noise_dim):
            raise ShapeMismatch(
                f"noise must be (B, {self.cfg.noise_dim}), got {z.shape} for v {v.shape}"
            )
        b, t, _ = v.shape
        z_tiled = Tensor(np.broadcast_to(z.values[:, None, :], (b, t, self.cfg.noise_dim)).copy())
        h = self.in_proj(tc.concat_last([v, z_tiled]))
        for w1, w2 in self.blocks:
            h = tc.add(h, tc.tanh(w2(tc.relu(w1(h)))))
        return tc.add(v, self.out_proj(h))


class Discriminator:
    """Hybrid per-sequence critic: 1-d conv branch + 2-d conv branch, both
    mean-pooled to one scalar, averaged. Zero-initialized."""

    def __init__(self, store, cfg: QuartetConfig, rng, name="discriminator"):
        d = cfg.feature_dim
        c = cfg.disc_channels
        self.conv1 = Conv1d(store, f"{name}.conv1", 3, d, c, rng, zero_init=True)
        self.conv2_w = store.register(f"{name}.conv2.w", Tensor(np.zeros((3, 3, c))))
        self.conv2_b = store.register(f"{name}.conv2.b", Tensor(np.zeros(c)))

    def __call__(self, feats):
        if feats.values.ndim != 3:
            raise ShapeMismatch(f"discriminator wants (B, T, d), got {feats.shape}")
        branch1 = tc.mean_op(self.conv1(feats), axis=(1, 2))
        branch2 = tc.mean_op(tc.conv2d_same(feats, self.conv2_w, self.conv2_b), axis=(1, 2, 3))
        return tc.mul_scalar(tc.add(branch1, branch2), 0.5)


class Decoder:
    """Autoregressive transformer decoder plus a linear CTC head on memory."""

    def __init__(self, store, cfg: QuartetConfig, rng, name="decoder"):
        d = cfg.feature_dim
        self.cfg = cfg
        self.n_classes = cfg.vocab_size + 2        # content + sos + eos
        self.embed = store.register(
            f"{name}.embed",
            Tensor(_xavier(rng, self.n_classes, d, (self.n_classes, d))),
        )
        self.layers = [
            DecoderLayer(store, f"{name}.layers.{i}", d, cfg.attention_heads, cfg.ff_dim, rng)
            for i in range(cfg.decoder_layers)
        ]
        self.ln_out = LayerNorm(store, f"{name}.ln_out", d)
        self.out_proj = Linear(store, f"{name}.out_proj", d, self.n_classes, rng)
        self.ctc_head = Linear(store, f"{name}.ctc_head", d, cfg.vocab_size + 1, rng)

    @property
    def sos_id(self):
        return self.cfg.vocab_size + 1

    @property
    def eos_id(self):
        return self.cfg.vocab_size + 2

    def id_to_class(self, ids):
        return np.asarray(ids, dtype=np.int64) - 1

    def class_to_id(self, classes):
        return np.asarray(classes, dtype=np.int64) + 1

    def _run_stack(self, dec_ids, memory, drop_rng=None):
        b, u = dec_ids.shape
        if u > self.cfg.max_len + 1:
            raise ShapeMismatch(f"decoder length {u} exceeds max_len+1")
        x = tc.matmul(Tensor(one_hot(self.id_to_class(dec_ids), self.n_classes)), self.embed)
        x = _add_positions(x)
        mask = np.triu(np.full((u, u), MASK_OFF), k=1)
        for layer in self.layers:
            x = layer(x, memory, mask, self.cfg.dropout, drop_rng)
        return self.out_proj(self.ln_out(x))

    def teacher_forced(self, memory, targets: np.ndarray, drop_rng=None):
        """Teacher-forced logits (B, U+1, V+2) for sos-prefixed targets, and
        CTC head log-probs (B, T, V+1) taken from the memory sequence."""
        if memory.values.ndim != 3 or memory.shape[1] == 0:
            raise ShapeMismatch(f"memory must be non-empty (B, T, d), got {memory.shape}")
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim != 2 or targets.shape[0] != memory.shape[0]:
            raise ShapeMismatch(
                f"targets {targets.shape} do not match memory batch {memory.shape[0]}"
            )
        b = targets.shape[0]
        dec_in = np.concatenate([np.full((b, 1), self.sos_id), targets], axis=1)
        logits = self._run_stack(dec_in, memory, drop_rng)
        ctc_logp = tc.log_softmax_last(self.ctc_head(memory))
        return logits, ctc_logp

    def greedy(self, memory, max_steps: int) -> list[list[int]]:
        """Batched argmax decoding until eos or max_steps; ties resolve to the
        lowest token id. Returns emitted content-token ids (eos stripped)."""
        b = memory.shape[0]
        if max_steps <= 0:
            return [[] for _ in range(b)]
        ids = np.full((b, 1), self.sos_id, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_steps):
            logits = self._run_stack(ids, memory)
            nxt = self.class_to_id(np.argmax(logits.values[:, -1, :], axis=-1))
            nxt = np.where(done, self.eos_id, nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            done |= nxt == self.eos_id
            if done.all():
                break
        out = []
        for row in ids[:, 1:]:
            toks = []
            for t in row:
                if t == self.eos_id:
                    break
                toks.append(int(t))
            out.append(toks)
        return out


class TeacherEncoder:
    """Frozen seed-determined encoder mapping clean token sequences to
    feature sequences; the distillation target."""

    def __init__(self, cfg: QuartetConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        self.store = ParameterStore()
        rng = np.random.default_rng(np.random.SeedSequence([self.seed]))
        d = cfg.feature_dim
        name = "teacher"
        self.frontend = Conv1d(self.store, f"{name}.frontend", 3, cfg.vocab_size, d, rng)
        self.proj = Linear(self.store, f"{name}.proj", d, d, rng)
        self.layers = [
            EncoderLayer(self.store, f"{name}.layers.{i}", d, cfg.attention_heads, cfg.ff_dim, rng)
            for i in range(cfg.encoder_layers)
        ]
        self.ln_out = LayerNorm(self.store, f"{name}.ln_out", d)
        self.store.set_trainable("teacher", False)

    def features(self, tokens: np.ndarray) -> np.ndarray:
        """(B, T) content-token ids -> (B, T, d) features, no gradients."""
        tokens = np.asarray(tokens, dtype=np.int64)
        x = Tensor(one_hot(tokens - 1, self.cfg.vocab_size))
        h = _add_positions(self.proj(self.frontend(x)))
        for layer in self.layers:
            h = layer(h)
        return self.ln_out(h).values


class Quartet:
    """Encoder, generator, discriminator, decoder over one parameter store."""

    def __init__(self, cfg: QuartetConfig, store, encoder, generator, discriminator, decoder):
        self.cfg = cfg
        self.store = store
        self.encoder = encoder
        self.generator = generator
        self.discriminator = discriminator
        self.decoder = decoder

    @classmethod
    def build(cls, cfg: QuartetConfig, rng) -> "Quartet":
        store = ParameterStore()
        encoder = VideoEncoder(store, cfg, rng)
        generator = Generator(store, cfg, rng)
        discriminator = Discriminator(store, cfg, rng)
        decoder = Decoder(store, cfg, rng)
        return cls(cfg, store, encoder, generator, discriminator, decoder)

    def parameter_count(self, group: str | None = None) -> int:
        return self.store.parameter_count(group)


# ---------------------------------------------------------------------------
# spec-facing single-sequence wrappers (lift to batch one via reshape ops so
# gradients keep flowing through the tape)


def _lift(x: Tensor) -> Tensor:
    return tc.reshape(x, (1,) + x.shape)


def _drop(x: Tensor) -> Tensor:
    return tc.reshape(x, x.shape[1:])


def encode_video(enc: VideoEncoder, x_v: Tensor) -> Tensor:
    x_v = tc.as_tensor(x_v)
    if x_v.values.ndim == 2:
        return _drop(enc(_lift(x_v)))
    return enc(x_v)


def generate(gen: Generator, v: Tensor, z: Tensor) -> Tensor:
    v, z = tc.as_tensor(v), tc.as_tensor(z)
    if v.values.ndim == 2:
        return _drop(gen(_lift(v), _lift(z)))
    return gen(v, z)


def discriminate(disc: Discriminator, feats: Tensor) -> Tensor:
    feats = tc.as_tensor(feats)
    if feats.values.ndim == 2:
        return tc.reshape(disc(_lift(feats)), ())
    return disc(feats)


def decode_teacher_forced(dec: Decoder, memory: Tensor, targets) -> tuple[Tensor, Tensor]:
    memory = tc.as_tensor(memory)
    targets = np.asarray(targets, dtype=np.int64)
    if memory.values.ndim == 2:
        logits, ctc_logp = dec.teacher_forced(_lift(memory), targets[None])
        return _drop(logits), _drop(ctc_logp)
    return dec.teacher_forced(memory, targets)


def greedy_decode(dec: Decoder, memory: Tensor, max_steps: int) -> list[int]:
    memory = tc.as_tensor(memory)
    if memory.values.ndim == 2:
        return dec.greedy(Tensor(memory.values[None]), max_steps)[0]
    raise ShapeMismatch("greedy_decode takes one (T, d) memory; use Decoder.greedy for batches")
