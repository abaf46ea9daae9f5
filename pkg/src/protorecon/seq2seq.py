"""Encoder-decoder families: bidirectional GRU with dot-product attention, and a
post-norm Transformer. Both read a shared phoneme embedding table.

All sequence tensors are batch-major ``(B, S, d)``. Padding positions are
described by a boolean mask rather than special-cased inside the math.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, add, concat, dropout, gather, matmul, mul, sigmoid, stack, tanh
from .corpus import BOS, EOS, PAD, Vocabulary
from .nn import Init, LayerNorm, Linear, Module

NEG_INF = -1e9


@dataclass
class Seq2SeqConfig:
    architecture: str = "gru"
    d_emb: int = 64
    d_model: int = 64
    layers: int = 2
    heads: int = 8
    feedforward: int = 512
    dropout: float = 0.0
    max_len: int = 15
    max_input_len: int = 128

    def __post_init__(self):
        if self.architecture not in ("gru", "transformer"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "transformer" and self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the head count")
        if self.layers < 1 or self.max_len < 1:
            raise ValueError("layers and max_len must be >= 1")


@dataclass
class EncoderOutput:
    states: Tensor          # (B, S, d_model)
    mask: np.ndarray        # (B, S) bool, True on real positions
    init: list | None = None  # GRU only: per-layer decoder initial state (B, d_model)


@dataclass
class BatchDecode:
    tokens: list            # per row: emitted ids, EOS included when produced
    logits: Tensor          # (B, T, V)
    hidden: Tensor          # (B, T, d_model), final decoder layer
    lengths: np.ndarray     # (B,)


@dataclass
class DecodeResult:
    tokens: list
    logits: np.ndarray
    hidden: np.ndarray
    total_log_prob: float
    normalized_log_prob: float


def pad_ids(seqs: Sequence[Sequence[int]], value: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max()) if len(seqs) else 0), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def length_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


# ----------------------------------------------------------------- attention


def attention(query: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q K^T / sqrt(d)) V for one query per batch row.

    Accepts unbatched ``(d,), (S, d), (S, dv)`` or batched ``(B, d), (B, S, d), (B, S, dv)``.
    """
    single = query.ndim == 1
    if single:
        query, keys, values = (ag.reshape(t, (1, *t.shape)) for t in (query, keys, values))
        mask = None if mask is None else np.asarray(mask)[None]
    if keys.shape[1] == 0:
        raise ValueError("attention over an empty key set")
    if keys.shape[1] != values.shape[1]:
        raise ValueError("keys and values must have the same number of rows")
    d = query.shape[-1]
    q = ag.reshape(query, (query.shape[0], 1, d))
    scores = mul(matmul(q, ag.transpose(keys, (0, 2, 1))), 1.0 / math.sqrt(d))
    if mask is not None and not mask.all():
        scores = add(scores, np.where(mask, 0.0, NEG_INF)[:, None, :])
    weights = ag.softmax(scores, axis=-1)
    ctx = ag.reshape(matmul(weights, values), (query.shape[0], values.shape[-1]))
    return ag.reshape(ctx, (values.shape[-1],)) if single else ctx


# ----------------------------------------------------------------------- GRU


class GRUWeights(Module):
    """Gate order (z, r) in the fused matrices; n kept separate because it sees r*h."""

    def __init__(self, d_in: int, hidden: int, init: Init, name: str):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.add_param("Wzr", init.uniform(name + ".Wzr", (d_in, 2 * hidden), bound))
        self.add_param("Wn", init.uniform(name + ".Wn", (d_in, hidden), bound))
        self.add_param("Uzr", init.uniform(name + ".Uzr", (hidden, 2 * hidden), bound))
        self.add_param("Un", init.uniform(name + ".Un", (hidden, hidden), bound))
        self.add_param("bzr", init.uniform(name + ".bzr", (2 * hidden,), bound))
        self.add_param("bn", init.uniform(name + ".bn", (hidden,), bound))

    def project_inputs(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return add(matmul(x, self.Wzr), self.bzr), add(matmul(x, self.Wn), self.bn)

    def step(self, xzr: Tensor, xn: Tensor, h: Tensor) -> Tensor:
        H = self.hidden
        gates = sigmoid(add(xzr, matmul(h, self.Uzr)))
        z, r = gates[..., :H], gates[..., H:]
        n = tanh(add(xn, matmul(mul(r, h), self.Un)))
        return add(n, mul(z, ag.sub(h, n)))


def gru_cell(x: Tensor, h: Tensor, weights: GRUWeights) -> Tensor:
    """z = s(Wz x + Uz h + bz), r = s(...), n = tanh(Wn x + Un (r*h) + bn), h' = (1-z) n + z h."""
    x, h = ag._as_tensor(x), ag._as_tensor(h)
    if x.shape[-1] != weights.Wzr.shape[0] or h.shape[-1] != weights.hidden:
        raise ValueError(f"gru_cell dims: x {x.shape}, h {h.shape}, weights in={weights.Wzr.shape[0]} hidden={weights.hidden}")
    xzr, xn = weights.project_inputs(x)
    return weights.step(xzr, xn, h)


def _blend(new: Tensor, old: Tensor, m: np.ndarray) -> Tensor:
    if m.all():
        return new
    m = m[:, None].astype(np.float64)
    return add(mul(new, m), mul(old, 1.0 - m))


class GruSeq2Seq(Module):
    def __init__(self, cfg: Seq2SeqConfig, vocab_size: int, phoneme_emb: Tensor, lang_emb: Tensor | None,
                 init: Init, name: str):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.phoneme_emb = phoneme_emb
        self.lang_emb = lang_emb
        H = cfg.d_model
        self.enc_fwd, self.enc_bwd, self.dec = [], [], []
        for l in range(cfg.layers):
            d_in = cfg.d_emb if l == 0 else H
            self.enc_fwd.append(self.add_module(f"enc_fwd{l}", GRUWeights(d_in, H, init, f"{name}.enc_fwd{l}")))
            self.enc_bwd.append(self.add_module(f"enc_bwd{l}", GRUWeights(d_in, H, init, f"{name}.enc_bwd{l}")))
            self.dec.append(self.add_module(f"dec{l}", GRUWeights(d_in, H, init, f"{name}.dec{l}")))
        self.add_module("combine", Linear(2 * H, H, init, f"{name}.combine"))
        self.add_module("classifier", Linear(H, vocab_size, init, f"{name}.classifier"))

    # -- encoder
    def _direction(self, w: GRUWeights, x: Tensor, mask: np.ndarray, reverse: bool):
        B, S = mask.shape
        xzr, xn = w.project_inputs(x)
        h = Tensor(np.zeros((B, w.hidden)))
        outs = [None] * S
        for t in (range(S - 1, -1, -1) if reverse else range(S)):
            h = _blend(w.step(xzr[:, t], xn[:, t], h), h, mask[:, t])
            outs[t] = h
        return stack(outs, axis=1), h

    def encode_layers(self, emb: Tensor, mask: np.ndarray, drop=None):
        """Per-layer (forward states, backward states) plus the summed top output."""
        x = dropout(emb, self.cfg.dropout, drop, drop is not None)
        per_layer, init = [], []
        for l in range(self.cfg.layers):
            if l > 0:
                x = dropout(x, self.cfg.dropout, drop, drop is not None)
            f_states, f_last = self._direction(self.enc_fwd[l], x, mask, reverse=False)
            b_states, b_first = self._direction(self.enc_bwd[l], x, mask, reverse=True)
            per_layer.append((f_states, b_states))
            init.append(add(f_last, b_first))
            x = add(f_states, b_states)
        return per_layer, x, init

    def encode(self, emb: Tensor, mask: np.ndarray, drop=None) -> EncoderOutput:
        _, states, init = self.encode_layers(emb, mask, drop)
        return EncoderOutput(states, mask, init)

    # -- decoder
    def initial_state(self, enc: EncoderOutput):
        return list(enc.init)

    def step(self, enc: EncoderOutput, state, prev_ids: np.ndarray, drop=None):
        x = dropout(gather(self.phoneme_emb, prev_ids), self.cfg.dropout, drop, drop is not None)
        new = []
        for l, w in enumerate(self.dec):
            if l > 0:
                x = dropout(x, self.cfg.dropout, drop, drop is not None)
            xzr, xn = w.project_inputs(x)
            h = w.step(xzr, xn, state[l])
            new.append(h)
            x = h
        ctx = attention(x, enc.states, enc.states, enc.mask)
        hidden = tanh(self.combine(concat([x, ctx], axis=-1)))
        logits = self.classifier(dropout(hidden, self.cfg.dropout, drop, drop is not None))
        return logits, hidden, new

    def teacher_forced(self, enc: EncoderOutput, prev_ids: np.ndarray, drop=None):
        state = self.initial_state(enc)
        logits, hidden = [], []
        for t in range(prev_ids.shape[1]):
            lg, hd, state = self.step(enc, state, prev_ids[:, t], drop)
            logits.append(lg)
            hidden.append(hd)
        return stack(logits, axis=1), stack(hidden, axis=1)

    def greedy(self, enc: EncoderOutput, max_len: int, drop=None) -> BatchDecode:
        B = enc.mask.shape[0]
        state = self.initial_state(enc)
        prev = np.full(B, BOS, dtype=np.int64)
        tracker = _GreedyTracker(B)
        logits, hidden = [], []
        for _ in range(max_len):
            lg, hd, state = self.step(enc, state, prev, drop)
            logits.append(lg)
            hidden.append(hd)
            prev = tracker.push(lg.data)
            if tracker.done():
                break
        return tracker.result(stack(logits, axis=1), stack(hidden, axis=1))


class _GreedyTracker:
    def __init__(self, batch: int):
        self.tokens = [[] for _ in range(batch)]
        self.finished = np.zeros(batch, dtype=bool)

    def push(self, logits: np.ndarray) -> np.ndarray:
        nxt = logits.argmax(axis=-1)
        for i, tok in enumerate(nxt):
            if not self.finished[i]:
                self.tokens[i].append(int(tok))
                self.finished[i] = tok == EOS
        return nxt

    def done(self) -> bool:
        return bool(self.finished.all())

    def result(self, logits: Tensor, hidden: Tensor) -> BatchDecode:
        lengths = np.array([len(t) for t in self.tokens], dtype=np.int64)
        return BatchDecode(self.tokens, logits, hidden, lengths)


# --------------------------------------------------------------- Transformer


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, init: Init, name: str):
        super().__init__()
        self.d, self.heads = d, heads
        for p in ("q", "k", "v", "o"):
            self.add_module(p, Linear(d, d, init, f"{name}.{p}"))

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return ag.transpose(ag.reshape(x, (B, T, self.heads, self.d // self.heads)), (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor, bias: np.ndarray | None, drop=None, p: float = 0.0) -> Tensor:
        B, T, _ = xq.shape
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = mul(matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d // self.heads))
        if bias is not None:
            scores = add(scores, bias)
        w = dropout(ag.softmax(scores, axis=-1), p, drop, drop is not None)
        ctx = ag.reshape(ag.transpose(matmul(w, v), (0, 2, 1, 3)), (B, T, self.d))
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d: int, ff: int, init: Init, name: str):
        super().__init__()
        self.add_module("lin1", Linear(d, ff, init, name + ".lin1"))
        self.add_module("lin2", Linear(ff, d, init, name + ".lin2"))

    def __call__(self, x: Tensor, drop=None, p: float = 0.0) -> Tensor:
        return self.lin2(dropout(ag.relu(self.lin1(x)), p, drop, drop is not None))


class EncoderLayer(Module):
    def __init__(self, cfg: Seq2SeqConfig, init: Init, name: str):
        super().__init__()
        d = cfg.d_model
        self.p = cfg.dropout
        self.add_module("attn", MultiHeadAttention(d, cfg.heads, init, name + ".attn"))
        self.add_module("ln1", LayerNorm(d, init, name + ".ln1"))
        self.add_module("ff", FeedForward(d, cfg.feedforward, init, name + ".ff"))
        self.add_module("ln2", LayerNorm(d, init, name + ".ln2"))

    def __call__(self, x: Tensor, key_bias, drop=None) -> Tensor:
        training = drop is not None
        x = self.ln1(add(x, dropout(self.attn(x, x, key_bias, drop, self.p), self.p, drop, training)))
        return self.ln2(add(x, dropout(self.ff(x, drop, self.p), self.p, drop, training)))


class DecoderLayer(Module):
    def __init__(self, cfg: Seq2SeqConfig, init: Init, name: str):
        super().__init__()
        d = cfg.d_model
        self.p = cfg.dropout
        self.add_module("self_attn", MultiHeadAttention(d, cfg.heads, init, name + ".self_attn"))
        self.add_module("ln1", LayerNorm(d, init, name + ".ln1"))
        self.add_module("cross_attn", MultiHeadAttention(d, cfg.heads, init, name + ".cross_attn"))
        self.add_module("ln2", LayerNorm(d, init, name + ".ln2"))
        self.add_module("ff", FeedForward(d, cfg.feedforward, init, name + ".ff"))
        self.add_module("ln3", LayerNorm(d, init, name + ".ln3"))

    def __call__(self, x: Tensor, memory: Tensor, causal, memory_bias, drop=None) -> Tensor:
        training = drop is not None
        x = self.ln1(add(x, dropout(self.self_attn(x, x, causal, drop, self.p), self.p, drop, training)))
        x = self.ln2(add(x, dropout(self.cross_attn(x, memory, memory_bias, drop, self.p), self.p, drop, training)))
        return self.ln3(add(x, dropout(self.ff(x, drop, self.p), self.p, drop, training)))


class TransformerSeq2Seq(Module):
    def __init__(self, cfg: Seq2SeqConfig, vocab_size: int, phoneme_emb: Tensor, lang_emb: Tensor | None,
                 init: Init, name: str):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.phoneme_emb = phoneme_emb
        self.lang_emb = lang_emb
        self.scale = math.sqrt(cfg.d_model)
        self.positions = sinusoidal_positions(cfg.max_input_len + 2, cfg.d_model)
        if cfg.d_emb != cfg.d_model:
            self.add_module("in_proj", Linear(cfg.d_emb, cfg.d_model, init, name + ".in_proj", bias=False))
        else:
            self.in_proj = None
        self.enc_layers = [self.add_module(f"enc{l}", EncoderLayer(cfg, init, f"{name}.enc{l}")) for l in range(cfg.layers)]
        self.dec_layers = [self.add_module(f"dec{l}", DecoderLayer(cfg, init, f"{name}.dec{l}")) for l in range(cfg.layers)]
        self.add_module("classifier", Linear(cfg.d_model, vocab_size, init, name + ".classifier"))

    def _inputs(self, emb: Tensor, drop) -> Tensor:
        T = emb.shape[1]
        if T > self.positions.shape[0]:
            raise ValueError(f"sequence length {T} exceeds max_input_len {self.cfg.max_input_len}")
        x = mul(emb, self.scale)
        if self.in_proj is not None:
            x = self.in_proj(x)
        x = add(x, self.positions[:T])
        return dropout(x, self.cfg.dropout, drop, drop is not None)

    def encode(self, emb: Tensor, mask: np.ndarray, drop=None) -> EncoderOutput:
        x = self._inputs(emb, drop)
        bias = None if mask.all() else np.where(mask, 0.0, NEG_INF)[:, None, None, :]
        for layer in self.enc_layers:
            x = layer(x, bias, drop)
        return EncoderOutput(x, mask)

    def decode(self, enc: EncoderOutput, prev_ids: np.ndarray, drop=None):
        T = prev_ids.shape[1]
        x = self._inputs(gather(self.phoneme_emb, prev_ids), drop)
        causal = np.triu(np.full((T, T), NEG_INF), k=1)[None, None] if T > 1 else None
        mem_bias = None if enc.mask.all() else np.where(enc.mask, 0.0, NEG_INF)[:, None, None, :]
        for layer in self.dec_layers:
            x = layer(x, enc.states, causal, mem_bias, drop)
        return self.classifier(x), x

    def teacher_forced(self, enc: EncoderOutput, prev_ids: np.ndarray, drop=None):
        return self.decode(enc, prev_ids, drop)

    def greedy(self, enc: EncoderOutput, max_len: int, drop=None) -> BatchDecode:
        B = enc.mask.shape[0]
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        tracker = _GreedyTracker(B)
        logits, hidden = [], []
        for t in range(max_len):
            lg, hd = self.decode(enc, prefix, drop)
            logits.append(lg[:, t])
            hidden.append(hd[:, t])
            nxt = tracker.push(lg.data[:, t])
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            if tracker.done():
                break
        return tracker.result(stack(logits, axis=1), stack(hidden, axis=1))


# ------------------------------------------------------------ shared helpers


def build_seq2seq(cfg: Seq2SeqConfig, vocab_size: int, phoneme_emb: Tensor, lang_emb: Tensor | None,
                  init: Init, name: str):
    cls = GruSeq2Seq if cfg.architecture == "gru" else TransformerSeq2Seq
    return cls(cfg, vocab_size, phoneme_emb, lang_emb, init, name)


def embed(model, ids: np.ndarray, lang_ids: np.ndarray | None = None) -> Tensor:
    """Phoneme embedding, plus the language embedding when the model has one."""
    x = gather(model.phoneme_emb, ids)
    if lang_ids is not None and model.lang_emb is not None:
        x = add(x, gather(model.lang_emb, lang_ids))
    return x


def encode(model, ids: Sequence[Sequence[int]], lang_ids: Sequence[Sequence[int]] | None = None, drop=None) -> EncoderOutput:
    """Pad, embed and encode a batch of id sequences."""
    padded, lengths = pad_ids(ids)
    langs = None if lang_ids is None else pad_ids(lang_ids, 0)[0]
    mask = length_mask(lengths, padded.shape[1])
    return model.encode(embed(model, padded, langs), mask, drop)


def shift_right(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(decoder inputs BOS+t[:-1], padded targets, lengths)."""
    tgt, lengths = pad_ids(targets)
    prev = np.concatenate([np.full((len(targets), 1), BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
    return prev, tgt, lengths


def teacher_forced_logits(model, enc: EncoderOutput, targets: Sequence[Sequence[int]], drop=None):
    """Logits (B, T, V) and hidden (B, T, d) predicting each target from its prefix."""
    if any(len(t) == 0 for t in targets):
        raise ValueError("teacher forcing needs non-empty targets")
    prev, _, _ = shift_right(targets)
    return model.teacher_forced(enc, prev, drop)


def sequence_ce(logits: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
    """Per-row mean token cross-entropy, shape (B,)."""
    tgt, lengths = pad_ids(targets)
    ce = ag.cross_entropy(logits, tgt)
    w = length_mask(lengths, tgt.shape[1]) / lengths[:, None]
    return ag.sum_(mul(ce, w), axis=1)


def greedy_decode(model, enc: EncoderOutput, max_len: int, drop=None) -> BatchDecode:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return model.greedy(enc, max_len, drop)


def sequence_log_prob(result) -> tuple[float, float]:
    """(total, per-step mean) log-probability of the emitted tokens under their own logits."""
    logits = np.asarray(result.logits)
    toks = np.asarray(result.tokens, dtype=np.int64)
    if len(toks) == 0:
        raise ValueError("empty decode")
    logp = ag.log_softmax_np(logits)[np.arange(len(toks)), toks]
    total = float(logp.sum())
    return total, total / len(toks)


def split_decodes(batch: BatchDecode) -> list[DecodeResult]:
    out = []
    for i, toks in enumerate(batch.tokens):
        n = len(toks)
        r = DecodeResult(list(toks), batch.logits.data[i, :n].copy(), batch.hidden.data[i, :n].copy(), 0.0, 0.0)
        r.total_log_prob, r.normalized_log_prob = sequence_log_prob(r)
        out.append(r)
    return out


def strip_eos(tokens: Sequence[int]) -> list:
    toks = list(tokens)
    return toks[:-1] if toks and toks[-1] == EOS else toks


# --------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "protorecon-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, vocab: Vocabulary, meta: dict, created: str = "") -> None:
    """First line: JSON header; remainder: little-endian float64 arrays back to back.

    The header holds format id, version, vocab hash, vocab, caller metadata and
    an index of ``{name, shape, offset}`` (offset in float64 elements).
    ``created`` is the only field that varies between identical runs.
    """
    index, offset = [], 0
    names = sorted(params)
    for n in names:
        arr = np.asarray(params[n], dtype="<f8")
        index.append({"name": n, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "vocab_hash": vocab.hash(),
        "vocab": vocab.to_json(),
        "created": created,
        "meta": meta,
        "arrays": index,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path, expected_vocab_hash: str | None = None):
    """Returns ``(params, vocab, header)``; refuses a mismatched vocabulary hash."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    vocab = Vocabulary.from_json(header["vocab"])
    if vocab.hash() != header["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary hash does not match stored vocabulary")
    if expected_vocab_hash is not None and expected_vocab_hash != header["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch (checkpoint was trained on different data)")
    data = np.frombuffer(raw[nl + 1:], dtype="<f8")
    params = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = data[entry["offset"]: entry["offset"] + size]
        if chunk.size != size:
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        params[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return params, vocab, header
