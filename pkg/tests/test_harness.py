import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazfusion import checkpoint
from gazfusion.corpus import normalize_mention
from gazfusion.evaluation import evaluate_unseen, seen_mentions
from gazfusion.harness import (ExperimentSpec, HarnessError, Runner, adaptation_curve,
                               explain, load_dataset, load_spec, make_mention_split, make_spec,
                               render_trace, run_ablation, run_compare, run_experiment,
                               run_low_resource, run_transfer, run_zero_shot, without_mentions)
from gazfusion.model import ModelError, predict_corpus
from gazfusion.synth import contains_mention
from gazfusion.training import TrainConfig, train

TINY = {
    "seeds": "0,1",
    "synth.vocab_size": "60", "synth.names_per_type": "12", "synth.sentences_train": "80",
    "synth.sentences_dev": "20", "synth.sentences_test": "40", "synth.filler_len_max": "6",
    "train.h": "8", "train.d": "4", "train.w": "2", "train.encoder_window": "2",
    "train.max_epochs": "2", "train.batch_size": "8",
}


def tiny_spec(tmp_path, **kw):
    return make_spec(TINY, out=str(tmp_path / "run"), **kw)


@pytest.fixture(scope="module")
def data():
    return load_dataset(make_spec(TINY))


# --- spec ------------------------------------------------------------------------


def test_spec_dump_load_round_trip(tmp_path):
    spec = tiny_spec(tmp_path, kind="ablation", r0g_epochs=3)
    path = tmp_path / "spec.cfg"
    path.write_text(spec.dump(), encoding="utf-8")
    back = load_spec(path)
    assert back == spec
    over = load_spec(path, {"train.h": "16", "seeds": "4"})
    assert over.train.h == 16 and over.seeds == (4,)


def test_spec_validation():
    with pytest.raises(HarnessError):
        ExperimentSpec(kind="nope")
    with pytest.raises(HarnessError):
        ExperimentSpec(seeds=())
    with pytest.raises(HarnessError):
        ExperimentSpec(fractions=(0.0,))
    with pytest.raises(HarnessError):
        ExperimentSpec(r0g_word_dropout=1.0)
    with pytest.raises(HarnessError):
        make_spec({"train.h": "many"})
    with pytest.raises(HarnessError):
        make_spec({"bogus": "1"})


# --- mention split -------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.floats(0.2, 0.8))
def test_mention_split_properties(data, seed, ratio):
    split = make_mention_split(data.train, ratio, seed, data.gazetteers, data.dev)
    lab, only = set(split.labelled_mentions), set(split.gazetteer_only_mentions)
    assert not lab & only
    assert lab | only == seen_mentions(data.train)
    assert len(lab) == round(ratio * len(lab | only))
    for s in split.train:
        assert not any(contains_mention(s.tokens, m) for m in only)
    entries = set().union(*(split.gazetteers[n].normalized_entries()
                            for n in split.gazetteers.names))
    assert only <= entries
    again = make_mention_split(data.train, ratio, seed, data.gazetteers, data.dev)
    assert again.labelled_mentions == split.labelled_mentions
    assert again.train.sentences == split.train.sentences


def test_mention_split_leaves_inputs_and_dev_alone(data):
    before = [len(data.gazetteers[n]) for n in data.gazetteers.names]
    base = without_mentions(data.gazetteers, data.held_out)
    split = make_mention_split(data.train, 0.7, 0, base, data.dev)
    assert [len(data.gazetteers[n]) for n in data.gazetteers.names] == before
    assert split.dev.sentences == data.dev.sentences
    filtered = make_mention_split(data.train, 0.7, 0, base, data.dev, filter_dev=True)
    for s in filtered.dev:
        assert not any(contains_mention(s.tokens, m) for m in filtered.gazetteer_only_mentions)


def test_degenerate_split_rejected(data):
    one = data.train.subset([i for i, s in enumerate(data.train) if any(s.tags)][:1])
    with pytest.raises(HarnessError, match="degenerate"):
        make_mention_split(one, 0.5, 0, data.gazetteers)
    with pytest.raises(HarnessError):
        make_mention_split(data.train, 1.0, 0, data.gazetteers)


def test_without_mentions_removes_held_out(data):
    base = without_mentions(data.gazetteers, data.held_out)
    held = {normalize_mention(m.tokens) for m in data.held_out}
    for name in base.names:
        full = data.gazetteers[name].normalized_entries()
        assert base[name].normalized_entries() == full - held


# --- hot-swap curve and explanations --------------------------------------------------


@pytest.fixture(scope="module")
def late_model(data):
    spec = make_spec(TINY)
    base = without_mentions(data.gazetteers, data.held_out)
    model, _ = train(spec.train, data.train, data.dev, base)
    return model, base


def test_adaptation_zero_point_is_the_base_evaluation(data, late_model):
    model, base = late_model
    seen = seen_mentions(data.train, data.dev)
    digest = checkpoint.digest(model)
    sizes = [len(base[n]) for n in base.names]
    pts = adaptation_curve(model, data.test, base, data.held_out, seen, [0.0, 0.5, 1.0], 0)
    ref = evaluate_unseen(predict_corpus(model, data.test, base)[0], data.test, seen)
    assert pts[0][1].record() == ref.record()
    assert [f for f, _ in pts] == [0.0, 0.5, 1.0]
    assert checkpoint.digest(model) == digest
    assert [len(base[n]) for n in base.names] == sizes
    full = adaptation_curve(model, data.test, data.gazetteers, [], seen, [0.0], 0)
    assert pts[-1][1].record() == full[0][1].record()


def test_explain_attributes_every_coordinate(data, late_model):
    model, base = late_model
    tokens = data.test[0].tokens
    trace = explain(model, tokens, data.gazetteers, top_k=2)
    pred = model.forward(tokens, data.gazetteers.annotate(tokens))
    assert [t.token for t in trace] == list(tokens)
    for t, tr in enumerate(trace):
        o_r, o_g = pred.ner_logits[t], pred.gaz_logits[t]
        np.testing.assert_array_equal(tr.fused_logits, np.maximum(o_r, o_g))
        for k, w in enumerate(tr.coordinate_winners):
            assert w == ("ner" if o_r[k] > o_g[k] else "gazetteer" if o_g[k] > o_r[k] else "tie")
        assert tr.winner == tr.coordinate_winners[model.scheme.id_of(tr.fused_tag)]
        assert len(tr.ner_top) == 2 and tr.ner_top[0][1] >= tr.ner_top[1][1]
        assert set(tr.codes) == set(data.gazetteers.names)
    text = render_trace(trace)
    assert text.splitlines()[0].split()[0] == "token"
    assert len(text.splitlines()) == len(tokens) + 2


def test_explain_rejects_fused_single_tagger(data):
    model, _ = train(TrainConfig(mode="early", h=8, d=4, w=2, max_epochs=1, encoder_window=2),
                     data.train, None, data.gazetteers)
    with pytest.raises(ModelError):
        explain(model, ["a"], data.gazetteers)


# --- experiments ------------------------------------------------------------------------


def test_compare_writes_outputs_and_resumes(tmp_path):
    spec = tiny_spec(tmp_path)
    res = run_experiment(spec)
    out = tmp_path / "run"
    assert set(res.means) == {"ner_only", "early", "early_att", "late", "late_att"}
    assert all(len(v) == 2 for v in res.per_seed.values())
    recs = [json.loads(l) for l in (out / "results.jsonl").read_text().splitlines()]
    assert sum(1 for r in recs if not r.get("summary")) == 10
    assert (out / "compare_table.txt").read_text().startswith("config")
    assert load_spec(out / "spec.cfg") == spec
    assert len(list((out / "checkpoints").glob("*.ckpt"))) == 10
    first = (out / "results.jsonl").read_bytes()
    again = run_compare(spec, runner=Runner(spec))
    assert again.means == res.means
    assert (out / "results.jsonl").read_bytes() == first


def test_ablation_with_curve(tmp_path):
    spec = tiny_spec(tmp_path, kind="one_shot", seeds=(0,), r0g_epochs=2, r0g_word_dropout=0.3)
    res = run_experiment(spec)
    assert set(res.per_seed) == {"R0", "RG", "R", "R0G"}
    assert res.shared_ner_branch and res.digests_unchanged
    assert [f for f, _ in res.curve] == list(spec.inclusion_fractions)
    assert (tmp_path / "run" / "adaptation_curve.dat").exists()
    log = (tmp_path / "run" / "logs" / "abl_R0G_s0.jsonl").read_text().splitlines()
    assert len(log) == 2
    r0 = checkpoint.load(tmp_path / "run" / "checkpoints" / "abl_R0_s0.ckpt")
    r0g = checkpoint.load(tmp_path / "run" / "checkpoints" / "abl_R0G_s0.ckpt")
    for k in r0.params:
        assert np.array_equal(r0.params[k], r0g.params[k]), k


def test_zero_shot_low_resource_and_transfer(tmp_path):
    spec = tiny_spec(tmp_path, seeds=(0,), fractions=(0.5, 1.0))
    zs = run_zero_shot(spec, runner=Runner(spec, tmp_path / "zs"))
    assert len(zs.baseline) == len(zs.fusion) == 1
    assert zs.delta == pytest.approx(zs.fusion[0] - zs.baseline[0])
    lr = run_low_resource(spec, runner=Runner(spec, tmp_path / "lr"))
    assert set(lr.baseline) == {0.5, 1.0}
    lines = (tmp_path / "lr" / "low_resource_gap.dat").read_text().splitlines()
    assert [float(l.split()[0]) for l in lines] == [0.5, 1.0]
    tr = run_transfer(spec, runner=Runner(spec, tmp_path / "tr"))
    assert set(tr.cells) == {(a, b) for a in ("source", "target") for b in ("source", "target")}


def test_run_explain_lists_disagreements(tmp_path):
    spec = tiny_spec(tmp_path, kind="explain", seeds=(0,), explain_sentences=2)
    text = run_experiment(spec)
    assert text.count("sentence ") <= 2
    assert (tmp_path / "run" / "explain_table.txt").exists()


def test_runs_are_shared_by_content_and_retrained_on_change(tmp_path):
    spec = tiny_spec(tmp_path, seeds=(0,), fractions=(0.2,), zero_shot_fraction=0.2)
    out = tmp_path / "shared"
    run_zero_shot(spec, runner=Runner(spec, out))
    logs = sorted((out / "logs").glob("*.jsonl"))
    stamps = [p.stat().st_mtime_ns for p in logs]
    run_low_resource(spec, runner=Runner(spec, out))
    assert sorted((out / "logs").glob("*.jsonl")) == logs
    assert [p.stat().st_mtime_ns for p in logs] == stamps
    changed = make_spec({**TINY, "train.h": "6"}, seeds=(0,), fractions=(0.2,))
    run_low_resource(changed, runner=Runner(changed, out))
    assert checkpoint.load(out / "checkpoints" / "late_att_f0.2_s0.ckpt").config.h == 6
