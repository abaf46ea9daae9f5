"""Daughters-to-protoform-to-daughters model: D2P and P2D sub-networks joined
by a dense bridge, and the weighted multi-term objective over them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, add, concat, gather, mean, mul
from .corpus import BOS, EOS, CognateSet, Vocabulary, encode_d2p_input, encode_p2d_input, target_ids
from .nn import EVAL, Init, Linear, Module, RngStreams
from .seq2seq import (
    BatchDecode,
    Seq2SeqConfig,
    build_seq2seq,
    encode,
    length_mask,
    pad_ids,
    sequence_ce,
    teacher_forced_logits,
)


@dataclass
class LossWeights:
    w_d2p: float = 1.0
    w_bridge: float = 0.5
    w_p2d_gold: float = 0.5
    w_p2d_pred: float = 1.0
    cringe_alpha: float = 0.3
    cringe_top_k: int = 3
    cringe_only_correct_reflex: bool = False

    def __post_init__(self):
        for name in ("w_d2p", "w_bridge", "w_p2d_gold", "w_p2d_pred", "cringe_alpha"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.cringe_top_k < 1:
            raise ValueError("cringe_top_k must be >= 1")

    def for_component(self, name: str) -> float:
        return {
            "l_d2p": self.w_d2p,
            "l_p2d_gold": self.w_p2d_gold,
            "l_p2d_ce_pred": self.w_p2d_pred,
            "l_p2d_cr_pred": self.cringe_alpha,
            "l_bridge": self.w_bridge,
        }[name]


COMPONENTS = ("l_d2p", "l_p2d_gold", "l_p2d_ce_pred", "l_p2d_cr_pred", "l_bridge")


@dataclass
class LossBundle:
    l_d2p: Tensor | None = None
    l_p2d_gold: Tensor | None = None
    l_p2d_ce_pred: Tensor | None = None
    l_p2d_cr_pred: Tensor | None = None
    l_bridge: Tensor | None = None
    total: Tensor | None = None
    active: bool = False               # some present component has a positive weight
    diagnostics: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def values(self) -> dict:
        out = {c: (None if getattr(self, c) is None else float(getattr(self, c).data)) for c in COMPONENTS}
        out["total"] = None if self.total is None else float(self.total.data)
        return out


def assemble_total(bundle: LossBundle, weights: LossWeights) -> LossBundle:
    """total = sum of weight * component over present components."""
    total = None
    for c in COMPONENTS:
        v = getattr(bundle, c)
        if v is None:
            continue
        w = weights.for_component(c)
        term = mul(v, w)
        total = term if total is None else add(total, term)
        bundle.active = bundle.active or w > 0
    bundle.total = total if total is not None else Tensor(0.0)
    return bundle


# --------------------------------------------------------------------- model


class DpdModel(Module):
    """Shared phoneme table, D2P (with language embeddings), optional P2D and bridge."""

    def __init__(self, vocab: Vocabulary, d2p_cfg: Seq2SeqConfig, p2d_cfg: Seq2SeqConfig | None, seed: int):
        super().__init__()
        if p2d_cfg is not None and p2d_cfg.d_emb != d2p_cfg.d_emb:
            raise ValueError("D2P and P2D must share the phoneme embedding size")
        init = Init(seed)
        self.vocab = vocab
        d = d2p_cfg.d_emb
        self.add_param("phoneme_emb", init.normal("embeddings.phoneme", (len(vocab), d), 1.0 / math.sqrt(d)))
        self.add_param("lang_emb", init.normal("embeddings.language", (vocab.n_lang_ids, d), 1.0 / math.sqrt(d)))
        self.add_module("d2p", build_seq2seq(d2p_cfg, len(vocab), self.phoneme_emb, self.lang_emb, init, "d2p"))
        self.p2d = self.bridge = None
        if p2d_cfg is not None:
            self.add_module("p2d", build_seq2seq(p2d_cfg, len(vocab), self.phoneme_emb, None, init, "p2d"))
            self.add_module("bridge", Linear(d2p_cfg.d_model, d, init, "bridge"))

    @property
    def has_p2d(self) -> bool:
        return self.p2d is not None


# ------------------------------------------------------------------- pieces


def d2p_inputs(items: Sequence[CognateSet], vocab: Vocabulary):
    ids, langs = zip(*(encode_d2p_input(cs, vocab) for cs in items))
    return list(ids), list(langs)


def d2p_supervised(items: Sequence[CognateSet], model: DpdModel, drop=None):
    """Per-item teacher-forced D2P cross-entropy (B,) and the logits it came from."""
    ids, langs = d2p_inputs(items, model.vocab)
    enc = encode(model.d2p, ids, langs, drop)
    targets = [target_ids(cs.protoform, model.vocab) for cs in items]
    logits, _ = teacher_forced_logits(model.d2p, enc, targets, drop)
    return sequence_ce(logits, targets), logits, targets


def bridge_forward(states: Tensor, bridge: Linear) -> Tensor:
    """Positionwise affine map from decoder states to embedding space."""
    if states.size == 0:
        raise ValueError("bridge needs a non-empty state sequence")
    if states.shape[-1] != bridge.W.shape[0]:
        raise ValueError(f"bridge expects {bridge.W.shape[0]}-dim states, got {states.shape[-1]}")
    return bridge(states)


def bridge_cosine_loss(bridge_out: Tensor, tokens, embeddings: Tensor, lengths=None):
    """Mean over positions of 1 - cos(bridge_out_t, emb[token_t]); the embedding side is detached.

    ``bridge_out`` is ``(T, d)`` (returns a scalar) or ``(B, T, d)`` with
    ``lengths`` (returns per-row losses). Zero-norm positions score 1 and are
    counted in the returned diagnostics.
    """
    single = bridge_out.ndim == 2
    if single:
        bridge_out = ag.reshape(bridge_out, (1, *bridge_out.shape))
        tokens = [list(tokens)]
    tok, lens = pad_ids(tokens)
    if lengths is not None:
        lens = np.asarray(lengths)
    if tok.shape[1] != bridge_out.shape[1]:
        raise ValueError("bridge output and token sequence lengths differ")
    target = Tensor(embeddings.data[tok])  # detached lookup
    cos = ag.cosine_similarity(bridge_out, target, axis=-1)
    valid = length_mask(lens, tok.shape[1])
    zero = valid & ((np.linalg.norm(bridge_out.data, axis=-1) == 0) | (np.linalg.norm(target.data, axis=-1) == 0))
    w = valid / lens[:, None]
    per_row = ag.sub(1.0, ag.sum_(mul(cos, w), axis=1))
    diag = {"zero_norm_positions": int(zero.sum())}
    return (ag.reshape(per_row, ()), diag) if single else (per_row, diag)


def sample_cringe_positives(logits: np.ndarray, negatives: np.ndarray, valid: np.ndarray, k: int,
                            rng: np.random.Generator) -> np.ndarray:
    """For each valid position: top-k indices excluding the negative, sample one by renormalised softmax."""
    V = logits.shape[-1]
    k = min(k, V - 1)
    pos = np.zeros(negatives.shape, dtype=np.int64)
    for idx in zip(*np.nonzero(valid)):
        s = logits[idx].copy()
        s[negatives[idx]] = -np.inf
        top = np.argsort(-s, kind="stable")[:k]
        p = np.exp(s[top] - s[top].max())
        p /= p.sum()
        choice = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
        pos[idx] = top[min(choice, k - 1)]
    return pos


def cringe_loss(logits: Tensor, negative_tokens, k: int, rng: np.random.Generator, lengths=None) -> Tensor:
    """Two-way contrast of each negative token against a sampled top-k positive.

    ``logits`` is ``(T, V)`` with ``negative_tokens`` of length T (scalar
    result) or ``(B, T, V)`` with padded negatives and ``lengths`` (per-row
    means).
    """
    if logits.shape[-1] <= 1:
        raise ValueError("CRINGE needs a vocabulary of at least 2")
    if k < 1:
        raise ValueError("k must be >= 1")
    single = logits.ndim == 2
    if single:
        neg = np.asarray(negative_tokens, dtype=np.int64)[None]
        if neg.shape[1] != logits.shape[0]:
            raise ValueError("one negative token per logit row is required")
        logits = ag.reshape(logits, (1, *logits.shape))
        lens = np.array([neg.shape[1]])
    else:
        neg = np.asarray(negative_tokens, dtype=np.int64)
        lens = np.asarray(lengths)
    valid = length_mask(lens, neg.shape[1])
    positives = sample_cringe_positives(logits.data, neg, valid, k, rng)
    pair = ag.stack([ag.pick(logits, positives), ag.pick(logits, neg)], axis=-1)
    ce = ag.cross_entropy(pair, np.zeros(neg.shape, dtype=np.int64))
    per_row = ag.sum_(mul(ce, valid / lens[:, None]), axis=1)
    return ag.reshape(per_row, ()) if single else per_row


def _pairs(items: Sequence[CognateSet]):
    """(item index, daughter) for every present reflex, in item then presentation order."""
    return [(i, d) for i, cs in enumerate(items) for d in cs.reflexes]


def _mean_by_item(per_pair: Tensor, pair_item: np.ndarray, n_items: int, select: np.ndarray | None = None) -> Tensor:
    """Average pair values into their items via a constant (B, P) averaging matrix."""
    sel = np.ones(len(pair_item), dtype=bool) if select is None else select
    A = np.zeros((n_items, len(pair_item)))
    for j, i in enumerate(pair_item):
        if sel[j]:
            A[i, j] = 1.0
    counts = A.sum(axis=1, keepdims=True)
    A = np.divide(A, counts, out=np.zeros_like(A), where=counts > 0)
    return ag.matmul(Tensor(A), per_pair)


def p2d_loss_from_gold(items: Sequence[CognateSet], model: DpdModel, drop=None) -> Tensor:
    """Per-item mean over daughters of P2D cross-entropy given the (gold or pseudo) protoform."""
    vocab = model.vocab
    pairs = _pairs(items)
    inputs = [encode_p2d_input(items[i].protoform, d, vocab) for i, d in pairs]
    targets = [target_ids(items[i].reflexes[d], vocab) for i, d in pairs]
    enc = encode(model.p2d, inputs, None, drop)
    logits, _ = teacher_forced_logits(model.p2d, enc, targets, drop)
    ce = sequence_ce(logits, targets)
    return _mean_by_item(ce, np.array([i for i, _ in pairs]), len(items))


@dataclass
class PredictionLosses:
    ce: Tensor                  # (B,)
    bridge: Tensor              # (B,)
    cringe: Tensor | None       # (n_neg,) over items in cringe_items
    cringe_items: np.ndarray    # indices of items carrying a CRINGE term
    decode: BatchDecode
    predicted: list             # per item: emitted ids (EOS included when produced)
    diagnostics: dict


def p2d_losses_from_prediction(items: Sequence[CognateSet], model: DpdModel, weights: LossWeights,
                               rng: np.random.Generator, streams: RngStreams = EVAL) -> PredictionLosses:
    vocab = model.vocab
    B = len(items)
    ids, langs = d2p_inputs(items, vocab)
    d2p_drop = streams.get("d2p_greedy")
    enc = encode(model.d2p, ids, langs, d2p_drop)
    dec = model.d2p.greedy(enc, model.d2p.cfg.max_len, d2p_drop)
    T = dec.hidden.shape[1]

    bridged = bridge_forward(dec.hidden, model.bridge)            # (B, T, d_emb)
    tok_pad = np.full((B, T), EOS, dtype=np.int64)
    for i, t in enumerate(dec.tokens):
        tok_pad[i, : len(t)] = t
    bridge_loss, diag = bridge_cosine_loss(bridged, [list(r) for r in tok_pad], model.phoneme_emb, dec.lengths)

    pairs = _pairs(items)
    pair_item = np.array([i for i, _ in pairs])
    prefix = gather(model.phoneme_emb, np.array([[BOS, vocab.tag_id(d)] for _, d in pairs]))
    body = gather(bridged, pair_item)                               # (P, T, d_emb)
    x = concat([prefix, body], axis=1)
    mask = length_mask(2 + dec.lengths[pair_item], 2 + T)
    p2d_drop = streams.get("p2d_pred")
    p2d_enc = model.p2d.encode(x, mask, p2d_drop)
    targets = [target_ids(items[i].reflexes[d], vocab) for i, d in pairs]
    logits, _ = teacher_forced_logits(model.p2d, p2d_enc, targets, p2d_drop)
    ce_pairs = sequence_ce(logits, targets)
    ce = _mean_by_item(ce_pairs, pair_item, B)

    # CRINGE: labeled items whose greedy protoform is wrong; negatives are the true reflexes
    wrong = np.array([
        cs.protoform is not None and dec.tokens[i] != target_ids(cs.protoform, vocab)
        for i, cs in enumerate(items)
    ])
    select = wrong[pair_item]
    if weights.cringe_only_correct_reflex and select.any():
        tgt_pad, tgt_len = pad_ids(targets)
        hit = (logits.data.argmax(-1) == tgt_pad) | ~length_mask(tgt_len, tgt_pad.shape[1])
        select &= hit.all(axis=1)
    cringe, cringe_items = None, np.flatnonzero(np.zeros(B, dtype=bool))
    if select.any():
        sel = np.flatnonzero(select)
        neg_pad, neg_len = pad_ids([targets[j] for j in sel])
        sub_logits = ag.slice_(logits, (sel, slice(0, neg_pad.shape[1])))
        cr_pairs = cringe_loss(sub_logits, neg_pad, weights.cringe_top_k, rng, neg_len)
        has = np.zeros(B, dtype=bool)
        has[pair_item[sel]] = True
        cringe_items = np.flatnonzero(has)
        remap = {it: r for r, it in enumerate(cringe_items)}
        cringe = _mean_by_item(cr_pairs, np.array([remap[pair_item[j]] for j in sel]), len(cringe_items))
    return PredictionLosses(ce, bridge_loss, cringe, cringe_items, dec, list(dec.tokens), diag)


def item_prediction_losses(cs: CognateSet, model: DpdModel, weights: LossWeights, rng: np.random.Generator):
    """Single-item view: (ce, cringe or None, bridge, predicted protoform ids)."""
    r = p2d_losses_from_prediction([cs], model, weights, rng)
    squeeze = lambda t: ag.reshape(t, ())
    cringe = None if r.cringe is None else squeeze(r.cringe)
    return squeeze(r.ce), cringe, squeeze(r.bridge), r.predicted[0]


def dpd_total_loss(items: Sequence[CognateSet], model: DpdModel, weights: LossWeights,
                   rng: np.random.Generator, streams: RngStreams = EVAL) -> LossBundle:
    """Weighted sum of the five DPD terms over one batch.

    Items with a protoform (gold or pseudo) contribute the supervised terms;
    every item contributes the prediction-path terms.
    """
    if not items:
        raise ValueError("empty batch")
    bundle = LossBundle()
    labeled = [cs for cs in items if cs.protoform is not None]
    if labeled:
        per_item, logits, targets = d2p_supervised(labeled, model, streams.get("d2p_tf"))
        bundle.l_d2p = mean(per_item)
        bundle.aux["d2p_logits"] = logits
        bundle.aux["d2p_targets"] = targets
        if model.has_p2d:
            bundle.l_p2d_gold = mean(p2d_loss_from_gold(labeled, model, streams.get("p2d_gold")))
    if model.has_p2d:
        pred = p2d_losses_from_prediction(items, model, weights, rng, streams)
        bundle.l_p2d_ce_pred = mean(pred.ce)
        bundle.l_bridge = mean(pred.bridge)
        if pred.cringe is not None:
            bundle.l_p2d_cr_pred = mean(pred.cringe)
        bundle.diagnostics.update(pred.diagnostics)
        bundle.aux["predicted"] = pred.predicted
    return assemble_total(bundle, weights)
