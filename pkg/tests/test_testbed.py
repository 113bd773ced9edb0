import warnings

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from emosteer.errors import ConfigurationError, InputError, IntegrityError
from emosteer.evaluation.metrics import wer
from emosteer.pipeline import split_corpus
from emosteer.testbed.checkpoint import load_checkpoint, save_checkpoint
from emosteer.testbed.corpus import (
    CorpusSpec,
    EmotionSet,
    build_mixed_eval_set,
    build_synthetic_corpus,
    default_prosody_table,
    read_corpus,
    read_corpus_meta,
    sample_prosody,
    split_speakers,
    write_corpus,
)
from emosteer.testbed.diagnostic import FLOW_DRIVEN, SLM_DRIVEN, DiagnosticSettings, cross_condition_diagnose
from emosteer.testbed.model import ModelConfig
from emosteer.testbed.renderer import Renderer
from emosteer.testbed.toy import TrainConfig, generate, generate_batch, init_model, train_toy_model

TINY = ModelConfig(n_layers=4, d_model=32, n_heads=2, d_mlp=64)


# ---------------------------------------------------------------- corpus


def test_minimal_corpus():
    c = build_synthetic_corpus(CorpusSpec(emotions=("neutral", "happy"), num_speakers=1, transcripts_per_speaker=1,
                                          prosody_vocab=4))
    assert len(c.utterances) == 2
    assert {u.emotion.name for u in c.utterances} == {"neutral", "happy"}
    assert len({u.group_key for u in c.utterances}) == 1


def test_corpus_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        c = build_synthetic_corpus(CorpusSpec(num_speakers=3, transcripts_per_speaker=4, rng_seed=11))
        write_corpus(tmp_path / f"{name}.jsonl", c.utterances, {"corpus_spec": c.spec.snapshot()})
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_corpus_file_roundtrip(tmp_path, small_corpus):
    path = tmp_path / "c.jsonl"
    write_corpus(path, small_corpus.utterances, {"corpus_spec": small_corpus.spec.snapshot()})
    assert read_corpus(path, small_corpus.emotions) == small_corpus.utterances
    assert read_corpus(path) == small_corpus.utterances
    assert CorpusSpec.from_snapshot(read_corpus_meta(path)["corpus_spec"]).snapshot() == small_corpus.spec.snapshot()
    (tmp_path / "bad.jsonl").write_text('{"id": 1\n')
    with pytest.raises(InputError):
        read_corpus(tmp_path / "bad.jsonl")


def _tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@pytest.mark.parametrize("lexical_mass", [0.0, 0.3])
def test_prosody_histograms_follow_the_generator(lexical_mass):
    spec = CorpusSpec(lexical_mass=lexical_mass)
    c = build_synthetic_corpus(spec)
    assert len(c.utterances) == 2000
    P = spec.prosody_vocab
    for e in c.emotions:
        utts = [u for u in c.utterances if u.emotion == e]
        hist = np.bincount([p for u in utts for p in u.prosody], minlength=P) / sum(len(u.prosody) for u in utts)
        lexical = np.bincount([t % P for u in utts for t in u.transcript], minlength=P) / hist.sum()
        lexical /= lexical.sum()
        expected = (1 - lexical_mass) * spec.prosody_probs[e.index] + lexical_mass * lexical
        assert _tv(hist, expected) <= 0.05


@given(st.lists(st.integers(0, 31), min_size=1, max_size=20), st.floats(0, 0.99), st.integers(0, 2 ** 16))
def test_sample_prosody_range(transcript, mass, seed):
    probs = default_prosody_table(5, 16)[2]
    out = sample_prosody(np.random.default_rng(seed), transcript, probs, mass)
    assert len(out) == len(transcript) and all(0 <= p < 16 for p in out)


def test_corpus_spec_validation():
    with pytest.raises(ConfigurationError):
        build_synthetic_corpus(CorpusSpec(prosody_vocab=3))
    bad = np.full((5, 16), 1 / 16)
    bad[0, 0] += 0.1
    with pytest.raises(ConfigurationError):
        build_synthetic_corpus(CorpusSpec(prosody_probs=bad))
    with pytest.raises(ConfigurationError):
        EmotionSet(("happy", "neutral"))


def test_speaker_split_is_disjoint_and_stable():
    parts = split_speakers([f"s{i}" for i in range(10)], seed=4)
    flat = parts["train"] + parts["val"] + parts["test"]
    assert sorted(flat) == sorted(set(flat)) and len(flat) == 10
    assert parts == split_speakers([f"s{i}" for i in reversed(range(10))], seed=4)


def test_mixed_eval_set_has_multi_emotion_consensus(small_corpus):
    mixed = build_mixed_eval_set(small_corpus, small_corpus.utterances, seed=2)
    assert mixed
    for u in mixed:
        names = {e.name for e in u.rater_labels}
        assert len(names - {"neutral"}) >= 2 and u.prosody is not None


# ---------------------------------------------------------------- model, training, decoding


def test_model_rejects_bad_config():
    with pytest.raises(ConfigurationError):
        ModelConfig(n_layers=2)
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=30, n_heads=4)


def test_training_is_deterministic(small_corpus):
    tc = TrainConfig(epochs=2, seed=5, check=False)
    a = train_toy_model(small_corpus.utterances, TINY, tc)
    b = train_toy_model(small_corpus.utterances, TINY, tc)
    assert a.history["final_loss"] == pytest.approx(b.history["final_loss"], abs=1e-6)
    for (k, x), (_, y) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
        assert torch.equal(x, y), k


def test_single_emotion_corpus_trains(small_corpus):
    neutral = [u for u in small_corpus.utterances if u.emotion.index == 0]
    cfg = ModelConfig(n_layers=4, d_model=32, n_heads=2, d_mlp=64, num_emotions=1)
    model = train_toy_model(neutral, cfg, TrainConfig(epochs=1, max_wer=10.0),
                            heldout=neutral)
    assert model.history["degenerate"] is True
    outs = generate_batch(model, [neutral[0].transcript], [0])
    assert outs[0].tokens
    with pytest.raises(InputError):
        generate_batch(model, [neutral[0].transcript], [1])


def test_trained_model_copies_transcripts(pipeline_model, pipeline_run):
    assert pipeline_model.history["wer"] <= 0.05
    corpus_utts = [u for u in read_corpus(pipeline_run["dir"] / "corpus.jsonl") if u.emotion.index == 0]
    test = split_corpus(corpus_utts, 0).test[:40]
    outs = generate_batch(pipeline_model, [u.transcript for u in test], [0] * len(test))
    assert np.mean([wer(u.transcript, o.content) for u, o in zip(test, outs)]) == 0.0


def test_decoding_determinism_and_grammar(untrained_model, small_corpus):
    ts = [u.transcript for u in small_corpus.utterances[:6]]
    conds = [u.emotion.index for u in small_corpus.utterances[:6]]
    for temp in (0.0, 1.0):
        a = generate_batch(untrained_model, ts, conds, seed=3, temperature=temp)
        b = generate_batch(untrained_model, ts, conds, seed=3, temperature=temp)
        assert [o.tokens for o in a] == [o.tokens for o in b]
    vocab = untrained_model.vocab
    for o in a:
        body = [t for t in o.tokens if t != vocab.eos]
        # prosody and content alternate, prosody first
        assert all(vocab.is_prosody(t) for t in body[0::2]) and all(vocab.is_content(t) for t in body[1::2])
    with pytest.raises(InputError):
        generate_batch(untrained_model, ts, conds, top_p=0.0)


def test_truncation_is_flagged(untrained_model, small_corpus):
    t = small_corpus.utterances[0].transcript
    assert generate_batch(untrained_model, [t], [0], max_new_tokens=3)[0].truncated
    with pytest.warns(RuntimeWarning):
        assert generate(untrained_model, t, 0, max_new_tokens=3).truncated


def test_checkpoint_roundtrip(tmp_path, untrained_model, small_corpus):
    ts = [u.transcript for u in small_corpus.utterances[:4]]
    for name in ("m.bin", "m.json"):
        save_checkpoint(untrained_model, tmp_path / name, {"note": 1})
        back = load_checkpoint(tmp_path / name)
        assert back.meta == {"note": 1}
        assert [o.tokens for o in generate_batch(back, ts, [1] * 4)] == \
               [o.tokens for o in generate_batch(untrained_model, ts, [1] * 4)]
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "x.bin")


# ---------------------------------------------------------------- renderer and diagnostic


def test_renderer_blend_extremes():
    r0 = Renderer.default(5, 16, lambda_render=0.0)
    r1 = Renderer.default(5, 16, lambda_render=1.0)
    toks = (1, 4, 9, 2)
    a, b = r0.render(toks, 1), r0.render(toks, 3)
    assert np.array_equal(a.f0, b.f0) and a.speaking_rate == b.speaking_rate
    for c1, c2 in ((1, 3), (2, 2)):
        x, y = r1.render(toks, c1), r1.render(toks, c2)
        differ = not np.array_equal(r1.condition_params[c1], r1.condition_params[c2])
        assert (not np.array_equal(x.f0, y.f0)) == differ
    m = Renderer.default(5, 16)
    assert np.array_equal(m.render(toks, 0).f0, m.render(toks, 0).f0)
    with pytest.raises(InputError):
        m.render(toks, 7)
    with pytest.raises(InputError):
        Renderer.default(5, 16, lambda_render=1.5)


def test_diagnostic_at_zero_lambda(pipeline_model, pipeline_run):
    utts = split_corpus(read_corpus(pipeline_run["dir"] / "corpus.jsonl"), 0).test
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = cross_condition_diagnose(pipeline_model, utts, DiagnosticSettings(lambda_render=0.0, max_groups=10))
    assert rep.value(FLOW_DRIVEN, "f0_ccc") == pytest.approx(1.0, abs=1e-9)
    assert rep.value(SLM_DRIVEN, "f0_ccc") < rep.value(FLOW_DRIVEN, "f0_ccc")


def test_diagnostic_skips_incomplete_groups(untrained_model, small_corpus):
    utts = [u for u in small_corpus.utterances if not (u.speaker == "spk00" and u.emotion.name == "sad")]
    with pytest.warns(UserWarning, match="skipped"):
        rep = cross_condition_diagnose(untrained_model, utts, DiagnosticSettings(max_groups=None))
    assert rep.skipped and all(r["speaker"] != "spk00" for r in rep.groups)
    assert rep.aggregate[SLM_DRIVEN]["f0_ccc"]["count"] == len(rep.groups)


def test_diagnostic_single_emotion_has_zero_rate_spread(small_corpus):
    model = init_model(ModelConfig(n_layers=4, d_model=32, n_heads=2, d_mlp=64, num_emotions=1), 0)
    neutral = [u for u in small_corpus.utterances if u.emotion.index == 0]
    rep = cross_condition_diagnose(model, neutral, DiagnosticSettings(max_groups=3))
    assert rep.value(SLM_DRIVEN, "sr_std") == 0.0 and rep.value(FLOW_DRIVEN, "sr_std") == 0.0
