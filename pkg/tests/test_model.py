import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gazfusion import checkpoint, nn
from gazfusion.checkpoint import CheckpointError
from gazfusion.corpus import Sentence, TagScheme
from gazfusion.gazetteer import Gazetteer, GazetteerAnnotation, GazetteerSet
from gazfusion.model import (GROUPS, MODE_GROUPS, FusionModel, ModelConfig, ModelError,
                             Vocabulary, attention_weights, gazetteer_attention,
                             lookup_gazetteer_embedding, predict_corpus, unplug_gazetteer)

from oracles import dense_attention, finite_difference, max_relative_error

SCHEME = TagScheme(("A", "B"))
VOCAB = Vocabulary(["x", "y", "z"])
finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def tiny_model(mode, attention, seed=3, perturb=True, **kw):
    cfg = ModelConfig(mode=mode, attention=attention, h=4, d=2, window=1, encoder_window=2,
                      max_len=8, **kw)
    m = FusionModel(cfg, VOCAB, SCHEME, ["g1", "g2"], seed=seed)
    if perturb:
        # move off the init so biases and gains get nontrivial gradients
        rng = np.random.default_rng(1)
        for k in m.params:
            m.params[k] = m.params[k] + rng.normal(0, 0.3, m.params[k].shape)
    return m


def tiny_batch(model):
    rng = np.random.default_rng(0)
    sents = [Sentence(("x", "y", "q", "z", "x"), tuple(rng.integers(0, 9, 5))),
             Sentence(("y", "z", "x"), tuple(rng.integers(0, 9, 3)))]
    anns = [GazetteerAnnotation(rng.integers(0, 5, (2, len(s)))) for s in sents]
    return model.make_batch(sents, anns if model.uses_gazetteers else None)


# --- attention -----------------------------------------------------------------


@settings(max_examples=60)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 6)), elements=finite))
def test_gazetteer_attention_window_zero_is_identity(Eg):
    assert np.array_equal(gazetteer_attention(Eg, 0), Eg)


@settings(max_examples=60)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 6)), elements=finite),
       st.integers(0, 4))
def test_gazetteer_attention_full_window_matches_dense(Eg, extra):
    T, width = Eg.shape
    got = gazetteer_attention(Eg, T - 1 + extra)
    want = dense_attention(Eg, Eg, 1.0 / math.sqrt(width))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@settings(max_examples=60)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 6)), elements=finite),
       st.integers(0, 6))
def test_attention_weights_are_distributions_inside_window(Eg, w):
    weights = attention_weights(Eg, w)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
    T = Eg.shape[0]
    idx = np.arange(T)
    assert np.all(weights[np.abs(idx[:, None] - idx[None, :]) > w] == 0)


def test_query_valued_variant_returns_input():
    Eg = np.random.default_rng(0).normal(size=(5, 4))
    assert np.array_equal(gazetteer_attention(Eg, 2, value="query"), Eg)


def test_attention_mask_padding_and_diagonal():
    valid = np.array([[True, True, False]])
    allowed = nn.attention_mask(valid, None)
    assert allowed[0, 0].tolist() == [True, True, False]
    assert allowed[0, 2].tolist() == [True, True, True]


def test_gazetteer_embedding_lookup():
    table = np.arange(2 * 5 * 3, dtype=float).reshape(2, 5, 3)
    codes = np.array([[0, 4], [1, 2]])
    Eg = lookup_gazetteer_embedding(table, codes)
    assert Eg.shape == (2, 6)
    np.testing.assert_array_equal(Eg[1], np.concatenate([table[0, 4], table[1, 2]]))
    with pytest.raises(ModelError):
        lookup_gazetteer_embedding(table, codes[:1])


# --- gradients -----------------------------------------------------------------------


@pytest.mark.parametrize("attention", [False, True])
@pytest.mark.parametrize("mode", ["ner_only", "early", "late"])
def test_gradients_match_finite_differences(mode, attention):
    m = tiny_model(mode, attention)
    batch = tiny_batch(m)
    loss, grads = m.loss_and_gradients(batch, 0.1, np.random.default_rng(5))
    assert set(grads) == set(m.params)
    numeric = finite_difference(lambda: m.loss(batch, 0.1, np.random.default_rng(5)), m.params)
    for name in m.params:
        assert max_relative_error(numeric[name], grads[name]) < 1e-4, name


@pytest.mark.parametrize("fn", ["layer_norm", "gelu", "attend"])
def test_primitive_backward(fn):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    up = rng.normal(size=(3, 4))
    if fn == "layer_norm":
        g, b = rng.normal(size=4), rng.normal(size=4)
        f = lambda: float(np.sum(nn.layer_norm(x, g, b)[0] * up))  # noqa: E731
        _, cache = nn.layer_norm(x, g, b)
        dx, dg, db = nn.layer_norm_backward(up, cache)
        num = finite_difference(f, {"x": x, "g": g, "b": b})
        for a, want in ((dx, num["x"]), (dg, num["g"]), (db, num["b"])):
            assert max_relative_error(want, a) < 1e-6
    elif fn == "gelu":
        f = lambda: float(np.sum(nn.gelu(x)[0] * up))  # noqa: E731
        assert max_relative_error(finite_difference(f, {"x": x})["x"],
                                  nn.gelu_backward(up, nn.gelu(x)[1])) < 1e-6
    else:
        k, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        allowed = nn.window_mask(3, 1)
        f = lambda: float(np.sum(nn.attend(x, k, v, allowed, 0.5)[0] * up))  # noqa: E731
        dq, dk, dv = nn.attend_backward(up, nn.attend(x, k, v, allowed, 0.5)[1])
        num = finite_difference(f, {"q": x, "k": k, "v": v})
        for a, want in ((dq, num["q"]), (dk, num["k"]), (dv, num["v"])):
            assert max_relative_error(want, a) < 1e-6


# --- fusion semantics ---------------------------------------------------------------------


def test_late_fusion_is_elementwise_max():
    m = tiny_model("late", True)
    batch = tiny_batch(m)
    out, _ = m.run(batch)
    np.testing.assert_array_equal(out["logits"], np.maximum(out["o_r"], out["o_g"]))


def test_late_fusion_routes_gradient_to_the_winner():
    # a G branch that always loses: gradients equal the NER-only model's
    m = tiny_model("late", True)
    m.params["tagG_b2"] = m.params["tagG_b2"] - 1e3
    batch = tiny_batch(m)
    _, grads = m.loss_and_gradients(batch)
    for name in GROUPS["tagger_G"] + GROUPS["gazetteer_embeddings"]:
        assert not np.any(grads[name]), name
    r = unplug_gazetteer(m)
    _, rgrads = r.loss_and_gradients(tiny_batch(r))
    for name in rgrads:
        np.testing.assert_array_equal(grads[name], rgrads[name])


def test_late_fusion_ties_go_to_ner_branch():
    m = tiny_model("late", False)
    # both taggers reduce to the same bias, so every coordinate ties
    for name in ("tagR", "tagG"):
        m.params[f"{name}_W2"] = np.zeros_like(m.params[f"{name}_W2"])
        m.params[f"{name}_b2"] = np.linspace(-1, 1, 9)
    batch = tiny_batch(m)
    out, _ = m.run(batch)
    assert out["ner_wins"].all()
    _, grads = m.loss_and_gradients(batch)
    for name in GROUPS["tagger_G"] + GROUPS["gazetteer_embeddings"]:
        assert not np.any(grads[name]), name
    assert np.any(grads["tagR_b2"])


def test_early_fusion_input_width():
    m = tiny_model("early", True, perturb=False)
    assert m.params["tagRG_W1"].shape == (4 + 2 * 2, 4 + 2 * 2)


def test_constant_gazetteer_input_gives_constant_branch_output():
    m = tiny_model("late", True)
    sents = [Sentence(("x", "y", "z", "x"))]
    ann = [GazetteerAnnotation(np.zeros((2, 4), dtype=np.int8))]
    out, _ = m.run(m.make_batch(sents, ann))
    np.testing.assert_allclose(out["o_g"][0], np.broadcast_to(out["o_g"][0, 0], (4, 5 + 4)),
                               atol=1e-12)


def test_unplug_shares_ner_tensors():
    m = tiny_model("late", True)
    r = unplug_gazetteer(m)
    assert r.config.mode == "ner_only" and r.unplugged
    names = [n for g in MODE_GROUPS["ner_only"] for n in GROUPS[g]]
    assert sorted(r.params) == sorted(names)
    for n in names:
        assert r.params[n] is m.params[n]
    sent = ("x", "y", "q")
    ann = GazetteerAnnotation(np.array([[4, 0, 0], [0, 1, 3]], dtype=np.int8))
    np.testing.assert_array_equal(r.forward(sent).fused_logits, m.forward(sent, ann).ner_logits)
    with pytest.raises(ModelError):
        unplug_gazetteer(tiny_model("early", True))


def test_batch_validation():
    m = tiny_model("late", True)
    with pytest.raises(ModelError):
        m.make_batch([Sentence(tuple("x" * 9))], [GazetteerAnnotation(np.zeros((2, 9), int))])
    with pytest.raises(ModelError):
        m.make_batch([Sentence(("x",))], [GazetteerAnnotation(np.zeros((1, 1), int))])
    with pytest.raises(ModelError):
        m.make_batch([Sentence(("x",))], None)
    with pytest.raises(ModelError):
        ModelConfig(mode="middle")


def test_padding_does_not_change_predictions():
    m = tiny_model("late", True)
    a = Sentence(("x", "y"))
    b = Sentence(("z", "x", "y", "q", "x"))
    ann_a = GazetteerAnnotation(np.array([[1, 3], [0, 4]], dtype=np.int8))
    ann_b = GazetteerAnnotation(np.zeros((2, 5), dtype=np.int8))
    alone = m.predict_batch([a], [ann_a])[0]
    padded = m.predict_batch([a, b], [ann_a, ann_b])[0]
    np.testing.assert_allclose(alone.fused_logits, padded.fused_logits, atol=1e-12)


def test_prediction_distribution_matches_fused_logits():
    m = tiny_model("late", True)
    ann = GazetteerAnnotation(np.array([[1, 3, 0], [0, 0, 4]], dtype=np.int8))
    p = m.forward(("x", "y", "z"), ann)
    np.testing.assert_allclose(p.distribution, nn.softmax(np.maximum(p.ner_logits, p.gaz_logits)))
    np.testing.assert_allclose(p.distribution.sum(axis=-1), 1.0)
    assert p.tags.tolist() == np.argmax(p.fused_logits, axis=-1).tolist()


def test_vocabulary_min_count_and_unknown():
    v = Vocabulary.build([Sentence(("A", "a", "b")), Sentence(("c", "A"))], min_count=2)
    assert v.tokens[:2] == ["<pad>", "<unk>"]
    assert v.ids(["a", "B", "zzz"]) == [2, 1, 1]


def test_same_seed_same_parameters():
    a = tiny_model("late", True, seed=7, perturb=False)
    b = tiny_model("late", True, seed=7, perturb=False)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_predict_corpus_checks_gazetteer_names():
    from gazfusion.corpus import Corpus
    m = tiny_model("late", True)
    corpus = Corpus((Sentence(("x", "y"), (0, 0)),), SCHEME)
    wrong = GazetteerSet([Gazetteer("g2"), Gazetteer("g1")])
    with pytest.raises(ModelError):
        predict_corpus(m, corpus, wrong)
    right = GazetteerSet([Gazetteer("g1", ["x"]), Gazetteer("g2")])
    pred, preds = predict_corpus(m, corpus, right)
    assert len(pred) == 1 and len(preds[0]) == 2


# --- checkpoints --------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["ner_only", "early", "late"])
def test_checkpoint_round_trip_is_exact(mode, tmp_path):
    m = tiny_model(mode, True)
    path = checkpoint.save(m, tmp_path / "m.ckpt")
    back = checkpoint.load(path)
    assert back.config == m.config
    assert back.vocab.tokens == m.vocab.tokens
    assert back.gazetteer_names == m.gazetteer_names
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    assert checkpoint.dumps(back) == path.read_text(encoding="utf-8")
    assert checkpoint.digest(back) == checkpoint.digest(m)


def test_checkpoint_keeps_unplugged_flag():
    r = unplug_gazetteer(tiny_model("late", True))
    assert checkpoint.loads(checkpoint.dumps(r)).unplugged


def test_checkpoint_rejects_corruption():
    text = checkpoint.dumps(tiny_model("late", True))
    with pytest.raises(CheckpointError):
        checkpoint.loads("nonsense\n" + text)
    with pytest.raises(CheckpointError):
        checkpoint.loads(text.replace("format_version=1", "format_version=9"))
    with pytest.raises(CheckpointError):
        checkpoint.loads(text.replace("\nx\n", "\nw\n", 1))
