import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protorecon import autograd as ag
from protorecon.autograd import Tape, Tensor
from protorecon.corpus import EOS, CognateSet, encode_p2d_input, target_ids
from protorecon.dpd import (
    COMPONENTS,
    LossBundle,
    LossWeights,
    assemble_total,
    bridge_cosine_loss,
    bridge_forward,
    cringe_loss,
    dpd_total_loss,
    item_prediction_losses,
    p2d_loss_from_gold,
    sample_cringe_positives,
)
from protorecon.nn import Init, Linear
from protorecon.seq2seq import encode, sequence_ce, teacher_forced_logits

from test_seq2seq import ITEMS, _model

ARCHS = ["gru", "transformer"]


# ------------------------------------------------------------------- bridge


def test_bridge_identity_and_zero():
    lin = Linear(4, 4, Init(0), "b")
    lin.W.data[...] = np.eye(4)
    lin.b.data[...] = 0.0
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(bridge_forward(x, lin).data, x.data)
    lin.W.data[...] = 0.0
    lin.b.data[...] = [1.0, 2.0, 3.0, 4.0]
    np.testing.assert_array_equal(bridge_forward(x, lin).data, np.broadcast_to(lin.b.data, (2, 3, 4)))


def test_bridge_errors():
    lin = Linear(4, 2, Init(0), "b")
    with pytest.raises(ValueError):
        bridge_forward(Tensor(np.ones((2, 3))), lin)
    with pytest.raises(ValueError):
        bridge_forward(Tensor(np.ones((0, 4))), lin)


# ------------------------------------------------------------ cosine bridge


def test_cosine_bridge_exact_orthogonal_antiparallel():
    emb = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]))
    assert bridge_cosine_loss(Tensor(np.array([[3.0, 3.0]])), [2], emb)[0].item() == pytest.approx(0.0, abs=1e-15)
    assert bridge_cosine_loss(Tensor(np.array([[0.0, 5.0]])), [0], emb)[0].item() == pytest.approx(1.0)
    assert bridge_cosine_loss(Tensor(np.array([[-1.0, 0.0]])), [0], emb)[0].item() == pytest.approx(2.0)


def test_cosine_bridge_zero_norm_counts_as_one():
    emb = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    out = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))
    loss, diag = bridge_cosine_loss(out, [1, 0], emb)
    assert loss.item() == pytest.approx(0.5)
    assert diag["zero_norm_positions"] == 1


def test_cosine_bridge_detaches_embeddings():
    emb = Tensor(np.random.default_rng(0).normal(size=(5, 3)), requires_grad=True)
    out = Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True)
    with Tape() as tape:
        loss, _ = bridge_cosine_loss(out, [1, 4], emb)
    ag.backward(loss, tape)
    assert emb.grad is None or not np.any(emb.grad)
    assert np.any(out.grad)


def test_cosine_bridge_batched_matches_rows():
    rng = np.random.default_rng(2)
    emb = Tensor(rng.normal(size=(6, 3)))
    out = Tensor(rng.normal(size=(2, 3, 3)))
    toks = [[1, 2, 3], [4, 5, EOS]]
    per_row, _ = bridge_cosine_loss(out, toks, emb, lengths=[3, 2])
    assert per_row.data[0] == pytest.approx(bridge_cosine_loss(Tensor(out.data[0]), toks[0], emb)[0].item())
    assert per_row.data[1] == pytest.approx(bridge_cosine_loss(Tensor(out.data[1, :2]), toks[1][:2], emb)[0].item())


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_cosine_bridge_range(seed):
    rng = np.random.default_rng(seed)
    loss, _ = bridge_cosine_loss(Tensor(rng.normal(size=(4, 3))), list(rng.integers(0, 5, 4)), Tensor(rng.normal(size=(5, 3))))
    assert -1e-12 <= loss.item() <= 2 + 1e-12


# ------------------------------------------------------------------- CRINGE


def test_cringe_binary_symmetric_is_ln2():
    assert cringe_loss(Tensor(np.zeros((1, 2))), [0], 1, np.random.default_rng(0)).item() == pytest.approx(math.log(2))


def test_cringe_saturates():
    logits = Tensor(np.array([[-50.0, 50.0, 0.0]]))
    assert cringe_loss(logits, [0], 2, np.random.default_rng(0)).item() < 1e-12


def test_cringe_hand_evaluation_four_tokens():
    s = np.array([[2.0, 1.0, 0.0, -1.0], [0.5, 3.0, -2.0, 1.0]])
    neg = [0, 1]
    k = 2
    u = np.random.default_rng(11).random(2)
    expected = []
    for t in range(2):
        cand = sorted((i for i in range(4) if i != neg[t]), key=lambda i: -s[t, i])[:k]
        p = np.exp(s[t, cand]) / np.exp(s[t, cand]).sum()
        pos = cand[0] if u[t] < p[0] else cand[1]
        expected.append(-math.log(math.exp(s[t, pos]) / (math.exp(s[t, pos]) + math.exp(s[t, neg[t]]))))
    got = cringe_loss(Tensor(s), neg, k, np.random.default_rng(11)).item()
    assert got == pytest.approx(np.mean(expected), abs=1e-14)


def test_cringe_positive_never_the_negative():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(50, 6))
    neg = rng.integers(0, 6, size=50)
    pos = sample_cringe_positives(logits[None], neg[None], np.ones((1, 50), bool), 3, rng)[0]
    assert np.all(pos != neg)
    for t in range(50):
        s = logits[t].copy()
        s[neg[t]] = -np.inf
        assert pos[t] in np.argsort(-s)[:3]


def test_cringe_step_lowers_negative_probability():
    logits = Tensor(np.random.default_rng(4).normal(size=(3, 5)), requires_grad=True)
    neg = np.array([1, 3, 0])
    before = ag.softmax(Tensor(logits.data)).data[np.arange(3), neg]
    with Tape() as tape:
        loss = cringe_loss(logits, neg, 2, np.random.default_rng(0))
    ag.backward(loss, tape)
    logits.data -= 0.1 * logits.grad
    after = ag.softmax(Tensor(logits.data)).data[np.arange(3), neg]
    assert np.all(after < before)


def test_cringe_errors():
    with pytest.raises(ValueError):
        cringe_loss(Tensor(np.zeros((2, 1))), [0, 0], 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        cringe_loss(Tensor(np.zeros((2, 3))), [0, 0], 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        cringe_loss(Tensor(np.zeros((2, 3))), [0], 1, np.random.default_rng(0))


# -------------------------------------------------------------- P2D on gold


def _direct_p2d_ce(model, proto, daughter, reflex):
    v = model.vocab
    enc = encode(model.p2d, [encode_p2d_input(proto, daughter, v)])
    tgt = [target_ids(reflex, v)]
    return sequence_ce(teacher_forced_logits(model.p2d, enc, tgt)[0], tgt).data[0]


@pytest.mark.parametrize("arch", ARCHS)
def test_p2d_gold_is_mean_over_daughters(arch):
    m = _model(arch, seed=3)
    two, one = ITEMS[0], ITEMS[1]
    got = p2d_loss_from_gold([two, one], m).data
    a = _direct_p2d_ce(m, two.protoform, "A", two.reflexes["A"])
    b = _direct_p2d_ce(m, two.protoform, "B", two.reflexes["B"])
    c = _direct_p2d_ce(m, one.protoform, "A", one.reflexes["A"])
    np.testing.assert_allclose(got, [(a + b) / 2, c], atol=1e-10)


# ------------------------------------------------------ prediction path


def test_unlabeled_item_never_gets_cringe():
    m = _model("gru", seed=1)
    for seed in range(3):
        _, cringe, bridge, _ = item_prediction_losses(ITEMS[2], m, LossWeights(), np.random.default_rng(seed))
        assert cringe is None
        assert np.isfinite(bridge.item())


def test_correct_prediction_has_no_cringe_wrong_one_does():
    m = _model("gru", seed=1)
    m.d2p.classifier.b.data[EOS] = 1e6  # greedy always emits just EOS
    right = CognateSet("r", {"A": ("p",)}, ())
    wrong = CognateSet("w", {"A": ("p",)}, ("p",))
    ce, cringe, bridge, pred = item_prediction_losses(right, m, LossWeights(), np.random.default_rng(0))
    assert pred == [EOS] and cringe is None
    assert np.isfinite(ce.item()) and np.isfinite(bridge.item())
    _, cringe, _, _ = item_prediction_losses(wrong, m, LossWeights(), np.random.default_rng(0))
    assert cringe is not None and cringe.item() > 0


def test_strict_cringe_variant_needs_correct_reflex():
    m = _model("gru", seed=1)
    m.d2p.classifier.b.data[EOS] = 1e6
    m.p2d.classifier.b.data[EOS] = 1e6  # P2D never reproduces a non-empty reflex
    wrong = CognateSet("w", {"A": ("p",)}, ("p",))
    w = LossWeights(cringe_only_correct_reflex=True)
    assert item_prediction_losses(wrong, m, w, np.random.default_rng(0))[1] is None


# ----------------------------------------------------------------- totals


def test_total_of_unit_components_is_five():
    b = LossBundle(**{c: Tensor(1.0) for c in COMPONENTS})
    w = LossWeights(1.0, 1.0, 1.0, 1.0, cringe_alpha=1.0)
    assert assemble_total(b, w).total.item() == 5.0
    assert b.active


@given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.lists(st.floats(0, 3), min_size=5, max_size=5),
       st.lists(st.booleans(), min_size=5, max_size=5))
def test_total_is_weighted_sum_of_present(vals, ws, present):
    b = LossBundle(**{c: Tensor(v) for c, v, p in zip(COMPONENTS, vals, present) if p})
    w = LossWeights(w_d2p=ws[0], w_p2d_gold=ws[1], w_p2d_pred=ws[2], cringe_alpha=ws[3], w_bridge=ws[4])
    expected = sum(w.for_component(c) * v for c, v, p in zip(COMPONENTS, vals, present) if p)
    assert assemble_total(b, w).total.item() == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert b.active == any(p and w.for_component(c) > 0 for c, p in zip(COMPONENTS, present))


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(w_bridge=-1.0)
    with pytest.raises(ValueError):
        LossWeights(w_d2p=float("inf"))
    with pytest.raises(ValueError):
        LossWeights(cringe_top_k=0)


@pytest.mark.parametrize("arch", ARCHS)
def test_unlabeled_batch_lacks_supervised_terms(arch):
    m = _model(arch, seed=2)
    b = dpd_total_loss([ITEMS[2], ITEMS[2].with_protoform(None)], m, LossWeights(), np.random.default_rng(0))
    assert b.l_d2p is None and b.l_p2d_gold is None and b.l_p2d_cr_pred is None
    assert b.l_p2d_ce_pred is not None and b.l_bridge is not None


def test_supervised_only_weights_reduce_to_d2p():
    m = _model("gru", seed=2)
    w = LossWeights(w_d2p=0.7, w_bridge=0, w_p2d_gold=0, w_p2d_pred=0, cringe_alpha=0)
    b = dpd_total_loss(ITEMS, m, w, np.random.default_rng(0))
    assert b.total.item() == pytest.approx(0.7 * b.l_d2p.item(), rel=1e-14)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        dpd_total_loss([], _model("gru"), LossWeights(), np.random.default_rng(0))


@pytest.mark.parametrize("arch", ARCHS)
def test_unlabeled_losses_reach_d2p_encoder(arch):
    m = _model(arch, seed=5)
    unlabeled = [ITEMS[0].with_protoform(None), ITEMS[2]]
    w = LossWeights(w_d2p=0.0)
    with Tape() as tape:
        b = dpd_total_loss(unlabeled, m, w, np.random.default_rng(0))
    ag.backward(b.total, tape)
    enc_grads = [p.grad for n, p in m.named_parameters() if n.startswith("d2p.enc")]
    assert enc_grads and any(g is not None and np.any(g != 0) for g in enc_grads)
