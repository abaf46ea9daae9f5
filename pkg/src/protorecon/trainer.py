"""Strategy composition (SUPV, BST, Pi-model, DPD and their combinations),
pseudo-label pool, consistency regularisation and the epoch loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Adam, NumericError, Tape, Tensor, lr_at, no_grad
from .corpus import (
    EOS,
    AugmentationConfig,
    CognateSet,
    Dataset,
    LabelingMask,
    Vocabulary,
    augment_cognate_set,
    build_vocab,
    target_ids,
)
from .dpd import COMPONENTS, DpdModel, LossBundle, LossWeights, assemble_total, d2p_inputs, d2p_supervised, dpd_total_loss
from .evalsuite import token_edit_distance
from .nn import RngStreams
from .seq2seq import Seq2SeqConfig, encode, length_mask, pad_ids, split_decodes, strip_eos, teacher_forced_logits


# -------------------------------------------------------------- configuration


@dataclass
class PiConfig:
    rampup_epochs: int = 50
    max_consistency: float = 100.0
    space: str = "prob"  # "prob" compares softmax rows, "logit" compares raw logits

    def __post_init__(self):
        if self.rampup_epochs < 0:
            raise ValueError("rampup_epochs must be >= 0")
        if not math.isfinite(self.max_consistency) or self.max_consistency < 0:
            raise ValueError("max_consistency must be finite and >= 0")
        if self.space not in ("prob", "logit"):
            raise ValueError("consistency space must be 'prob' or 'logit'")


@dataclass
class BstConfig:
    warmup_epochs: int = 10
    min_norm_logprob: float = -0.007
    max_new_per_epoch: int = 30

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.max_new_per_epoch < 0:
            raise ValueError("warmup_epochs and max_new_per_epoch must be >= 0")
        if math.isnan(self.min_norm_logprob):
            raise ValueError("min_norm_logprob must not be NaN")


STRATEGY_NAMES = ("SUPV", "BST", "PIM", "PIM-BST", "DPD", "DPD-BST", "DPD-PIM", "DPD-PIM-BST")


@dataclass
class StrategyConfig:
    use_dpd: bool = False
    use_pi: bool = False
    use_bst: bool = False
    architecture: str = "gru"
    weights: LossWeights = field(default_factory=LossWeights)
    pi: PiConfig = field(default_factory=PiConfig)
    bst: BstConfig = field(default_factory=BstConfig)

    @property
    def name(self) -> str:
        parts = [p for p, on in (("DPD", self.use_dpd), ("PIM", self.use_pi), ("BST", self.use_bst)) if on]
        return "-".join(parts) if parts else "SUPV"

    @classmethod
    def from_name(cls, name: str, **kw) -> "StrategyConfig":
        parts = set(name.upper().replace("ΠM", "PIM").split("-"))
        if parts == {"SUPV"}:
            parts = set()
        if not parts <= {"DPD", "PIM", "BST"}:
            raise ValueError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGY_NAMES)}")
        return cls(use_dpd="DPD" in parts, use_pi="PIM" in parts, use_bst="BST" in parts, **kw)


@dataclass
class TrainConfig:
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    d2p: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    p2d: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    batch_size: int = 64
    max_epochs: int = 300
    warmup_epochs: int = 10
    learning_rate: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    validate_every: int = 3
    patience: int = 24
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    augment_primary: bool = True
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.validate_every < 1 or self.patience < 1:
            raise ValueError("validate_every and patience must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")


def build_model(vocab: Vocabulary, cfg: TrainConfig, seed: int) -> DpdModel:
    return DpdModel(vocab, cfg.d2p, cfg.p2d if cfg.strategy.use_dpd else None, seed)


# ---------------------------------------------------------------- Pi-model


def consistency_weight(epoch: int, cfg: PiConfig) -> float:
    """Gaussian ramp-up max * exp(-5 (1 - min(1, e / rampup))^2)."""
    if cfg.rampup_epochs == 0:
        return cfg.max_consistency
    t = min(1.0, epoch / cfg.rampup_epochs)
    return cfg.max_consistency * math.exp(-5.0 * (1.0 - t) ** 2)


def _sq_diff_sum(a: Tensor, b: Tensor, mask: np.ndarray | None) -> tuple[Tensor, int]:
    """Sum of squared differences over rows where ``mask`` holds, and the element count."""
    d = ag.sub(a, b)
    sq = ag.mul(d, d)
    if mask is None:
        return ag.sum_(sq), sq.size
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return ag.sum_(ag.mul(sq, m)), int(m.sum()) * a.shape[-1]


def consistency_loss(out_a: Tensor, out_b: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over positions and vocabulary of (a - b)^2; ``mask`` selects valid positions."""
    if out_a.shape != out_b.shape:
        raise ValueError(f"consistency needs equal shapes, got {out_a.shape} and {out_b.shape}")
    total, count = _sq_diff_sum(out_a, out_b, mask)
    if count == 0:
        raise ValueError("no positions to compare")
    return ag.mul(total, 1.0 / count)


def _rows(logits: Tensor, space: str) -> Tensor:
    return ag.softmax(logits, axis=-1) if space == "prob" else logits


def pi_consistency(view_a: Sequence[CognateSet], view_b: Sequence[CognateSet], model: DpdModel, space: str,
                   streams: RngStreams, labeled_logits_a: Tensor | None = None) -> Tensor:
    """Consistency between the D2P outputs for two augmentations of the same items.

    Labeled items are teacher-forced on the gold protoform in both passes.
    Unlabeled items are teacher-forced in both passes on pass A's own greedy
    output (decoded without dropout and without gradient), so that rows align.
    ``labeled_logits_a`` lets the caller reuse pass A's supervised logits.
    """
    vocab = model.vocab
    parts = []
    lab = [i for i, cs in enumerate(view_a) if cs.protoform is not None]
    unl = [i for i, cs in enumerate(view_a) if cs.protoform is None]
    if lab:
        a_items = [view_a[i] for i in lab]
        targets = [target_ids(cs.protoform, vocab) for cs in a_items]
        if labeled_logits_a is None:
            _, labeled_logits_a, _ = d2p_supervised(a_items, model, streams.get("d2p_tf"))
        _, logits_b, _ = d2p_supervised([view_b[i] for i in lab], model, streams.get("pi_b_labeled"))
        _, lens = pad_ids(targets)
        parts.append((labeled_logits_a, logits_b, length_mask(lens, logits_b.shape[1])))
    if unl:
        a_items = [view_a[i] for i in unl]
        ids, langs = d2p_inputs(a_items, vocab)
        with no_grad():
            anchor = model.d2p.greedy(encode(model.d2p, ids, langs), model.d2p.cfg.max_len).tokens
        enc_a = encode(model.d2p, ids, langs, streams.get("pi_a_unlabeled"))
        la, _ = teacher_forced_logits(model.d2p, enc_a, anchor, streams.get("pi_a_unlabeled"))
        ids_b, langs_b = d2p_inputs([view_b[i] for i in unl], vocab)
        enc_b = encode(model.d2p, ids_b, langs_b, streams.get("pi_b_unlabeled"))
        lb, _ = teacher_forced_logits(model.d2p, enc_b, anchor, streams.get("pi_b_unlabeled"))
        _, lens = pad_ids(anchor)
        parts.append((la, lb, length_mask(lens, la.shape[1])))
    total, count = None, 0
    for la, lb, mask in parts:
        s, n = _sq_diff_sum(_rows(la, space), _rows(lb, space), mask)
        total = s if total is None else ag.add(total, s)
        count += n
    return ag.mul(total, 1.0 / count)


# --------------------------------------------------------------- bootstrap


@dataclass
class PseudoLabel:
    protoform: tuple
    epoch: int
    confidence: float


class PseudoLabelPool:
    """Pseudo-protoforms for unlabeled train ids; gold ids are refused."""

    def __init__(self, gold_ids: frozenset | set = frozenset()):
        self.gold_ids = frozenset(gold_ids)
        self.entries: dict[str, PseudoLabel] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.entries

    def get(self, item_id: str) -> PseudoLabel | None:
        return self.entries.get(item_id)

    def update(self, additions: Sequence[tuple], epoch: int) -> int:
        """Insert or overwrite ``(id, protoform, confidence)`` triples; returns how many were new ids."""
        new = 0
        for item_id, protoform, confidence in additions:
            if item_id in self.gold_ids:
                raise ValueError(f"refusing to pseudo-label gold item {item_id!r}")
            new += item_id not in self.entries
            self.entries[item_id] = PseudoLabel(tuple(protoform), epoch, float(confidence))
        return new


def select_pseudo_labels(candidates: Sequence[tuple], cfg: BstConfig, epoch: int) -> list:
    """Filter ``(id, DecodeResult-like)`` candidates by normalized log-prob, best first, capped.

    Returns the kept ``(id, candidate)`` pairs in selection order.
    """
    if epoch < cfg.warmup_epochs:
        return []
    kept = [(i, c) for i, c in candidates if c.normalized_log_prob >= cfg.min_norm_logprob]
    kept.sort(key=lambda ic: -ic[1].normalized_log_prob)
    return kept[: cfg.max_new_per_epoch]


# ----------------------------------------------------------------- decoding


def decode_items(model: DpdModel, items: Sequence[CognateSet], batch_size: int = 256) -> list:
    """Greedy evaluation-mode decodes (``DecodeResult`` per item, EOS kept)."""
    out = []
    with no_grad():
        for s in range(0, len(items), batch_size):
            ids, langs = d2p_inputs(items[s:s + batch_size], model.vocab)
            enc = encode(model.d2p, ids, langs)
            out += split_decodes(model.d2p.greedy(enc, model.d2p.cfg.max_len))
    return out


def predict(model: DpdModel, items: Sequence[CognateSet], batch_size: int = 256) -> list:
    """Predicted protoforms as token tuples."""
    return [tuple(model.vocab.decode(strip_eos(r.tokens))) for r in decode_items(model, items, batch_size)]


def mean_ted(model: DpdModel, items: Sequence[CognateSet], batch_size: int = 256) -> float:
    if not items:
        raise ValueError("cannot validate on an empty split")
    preds = predict(model, items, batch_size)
    return float(np.mean([token_edit_distance(p, cs.protoform) for p, cs in zip(preds, items)]))


# ---------------------------------------------------------------- training


@dataclass
class EarlyStopState:
    best_ted: float = math.inf
    best_epoch: int = 0  # epochs completed when the best validation happened
    epochs_since_improvement: int = 0
    patience: int = 24
    validate_every: int = 3

    def due(self, completed: int) -> bool:
        return completed % self.validate_every == 0

    def observe(self, completed: int, ted: float) -> bool:
        """Record a validation after ``completed`` epochs; True if it improved."""
        improved = ted < self.best_ted
        if improved:
            self.best_ted, self.best_epoch = ted, completed
        self.epochs_since_improvement = completed - self.best_epoch
        return improved

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_improvement >= self.patience


def training_view(train: Sequence[CognateSet], mask: LabelingMask | None, pool: PseudoLabelPool) -> list:
    """Train items as the learner sees them: gold inside the mask, pseudo-labels, or unlabeled."""
    view = []
    for cs in train:
        if mask is None or cs.id in mask.labeled_ids:
            view.append(cs)
        elif cs.id in pool:
            view.append(cs.with_protoform(pool.get(cs.id).protoform))
        else:
            view.append(cs.with_protoform(None))
    return view


def batch_loss(batch: Sequence[CognateSet], model: DpdModel, cfg: TrainConfig, epoch: int,
               streams: RngStreams) -> tuple[LossBundle, Tensor | None, float]:
    """Loss for one batch under the configured strategy; returns (bundle, consistency, weight)."""
    strat = cfg.strategy
    if cfg.augment_primary:
        rng_a = streams.always("augment_a")
        view_a = [augment_cognate_set(cs, cfg.augmentation, rng_a) for cs in batch]
    else:
        view_a = list(batch)
    if strat.use_dpd:
        bundle = dpd_total_loss(view_a, model, strat.weights, streams.always("cringe"), streams)
    else:
        bundle = LossBundle()
        labeled = [cs for cs in view_a if cs.protoform is not None]
        if labeled:
            per_item, logits, _ = d2p_supervised(labeled, model, streams.get("d2p_tf"))
            bundle.l_d2p = ag.mean(per_item)
            bundle.aux["d2p_logits"] = logits
        assemble_total(bundle, strat.weights)
    cons, cw = None, 0.0
    if strat.use_pi:
        cw = consistency_weight(epoch, strat.pi)
        if cw > 0:
            rng_b = streams.always("augment_b")
            view_b = [augment_cognate_set(cs, cfg.augmentation, rng_b) for cs in batch]
            cons = pi_consistency(view_a, view_b, model, strat.pi.space, streams, bundle.aux.get("d2p_logits"))
            bundle.total = ag.add(bundle.total, ag.mul(cons, cw))
            bundle.active = True
    return bundle, cons, cw


@dataclass
class EpochSummary:
    epoch: int
    components: dict
    lr: float
    consistency_weight: float
    steps: int
    batches: list = field(default_factory=list)


def train_epoch(model: DpdModel, view: Sequence[CognateSet], cfg: TrainConfig, optimizer: Adam,
                epoch: int, seed: int) -> EpochSummary:
    """One pass over ``view`` in a seeded shuffled order, one Adam step per active batch."""
    order = RngStreams((seed, epoch)).always("shuffle").permutation(len(view))
    lr = lr_at(epoch, cfg.learning_rate, cfg.warmup_epochs)
    records, steps = [], 0
    cw = consistency_weight(epoch, cfg.strategy.pi) if cfg.strategy.use_pi else 0.0
    for b, start in enumerate(range(0, len(view), cfg.batch_size)):
        batch = [view[i] for i in order[start:start + cfg.batch_size]]
        streams = RngStreams((seed, epoch, b))
        optimizer.zero_grad()
        try:
            with Tape() as tape:
                bundle, cons, cw = batch_loss(batch, model, cfg, epoch, streams)
            if bundle.active:
                ag.backward(bundle.total, tape)
                optimizer.step(lr)
                steps += 1
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
        rec = {"epoch": epoch, "batch": b, "split": "train", **bundle.values(),
               "consistency": None if cons is None else float(cons.data), "stepped": bundle.active}
        rec.update(bundle.diagnostics)
        records.append(rec)
    keys = list(COMPONENTS) + ["consistency", "total"]
    means = {}
    for k in keys:
        vals = [r[k] for r in records if r[k] is not None]
        means[k] = float(np.mean(vals)) if vals else None
    return EpochSummary(epoch, means, lr, cw, steps, records)


@dataclass
class RunResult:
    best_params: dict
    final_params: dict
    log: list
    best_val_ted: float
    best_epoch: int
    epochs_completed: int
    stopped_early: bool
    pool: PseudoLabelPool
    vocab: Vocabulary


def fit(cfg: TrainConfig, dataset: Dataset, mask: LabelingMask | None, seed: int,
        vocab: Vocabulary | None = None, on_epoch: Callable | None = None,
        log_batches: bool = True, sink: Callable[[dict], None] | None = None) -> RunResult:
    """Train with validation every ``validate_every`` epochs and patience-based early stopping.

    ``on_epoch(epoch, model)`` is called after each epoch's updates (and any
    pseudo-labelling); ``sink`` receives every log record as it is produced.
    The returned best parameters are those with the lowest validation TED,
    or the last ones when no validation happened.
    """
    vocab = vocab or build_vocab(dataset)
    model = build_model(vocab, cfg, seed)
    optimizer = Adam(model.parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.epsilon, cfg.weight_decay)
    gold = frozenset(cs.id for cs in dataset.train) if mask is None else mask.labeled_ids
    pool = PseudoLabelPool(gold)
    stop = EarlyStopState(patience=cfg.patience, validate_every=cfg.validate_every)
    log, best_params, stopped = [], None, False

    def emit(rec: dict) -> None:
        log.append(rec)
        if sink is not None:
            sink(rec)

    completed = 0
    for epoch in range(cfg.max_epochs):
        view = training_view(dataset.train, mask, pool)
        summary = train_epoch(model, view, cfg, optimizer, epoch, seed)
        if log_batches:
            for rec in summary.batches:
                emit(rec)
        if cfg.strategy.use_bst and epoch >= cfg.strategy.bst.warmup_epochs:
            pending = [cs for cs in dataset.train if cs.id not in gold]
            decoded = decode_items(model, pending, cfg.eval_batch_size)
            cands = [(cs.id, r) for cs, r in zip(pending, decoded)
                     if len(r.tokens) > 1 and r.tokens[-1] == EOS]
            chosen = select_pseudo_labels(cands, cfg.strategy.bst, epoch)
            pool.update([(i, vocab.decode(strip_eos(r.tokens)), r.normalized_log_prob) for i, r in chosen], epoch)
        completed = epoch + 1
        emit({"epoch": epoch, "split": "train", **summary.components, "lr": summary.lr,
              "consistency_weight": summary.consistency_weight, "pool_size": len(pool),
              "steps": summary.steps})
        if on_epoch is not None:
            on_epoch(epoch, model)
        if stop.due(completed):
            ted = mean_ted(model, dataset.valid, cfg.eval_batch_size)
            if stop.observe(completed, ted):
                best_params = model.state_dict()
            emit({"epoch": epoch, "split": "valid", "val_ted": ted, "best_val_ted": stop.best_ted,
                  "epochs_since_improvement": stop.epochs_since_improvement})
            if stop.should_stop:
                stopped = True
                break
    final = model.state_dict()
    return RunResult(best_params if best_params is not None else final, final, log, stop.best_ted,
                     stop.best_epoch, completed, stopped, pool, vocab)


def load_model(params: dict, vocab: Vocabulary, cfg: TrainConfig, seed: int = 0) -> DpdModel:
    model = build_model(vocab, cfg, seed)
    own = dict(model.named_parameters())
    model.load_state_dict({k: v for k, v in params.items() if k in own})
    return model
