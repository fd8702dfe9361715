import itertools

import numpy as np
import pytest

from reslm import corpus as C
from reslm.fusion import (
    VARIANTS,
    BeamConfig,
    FusionMethod,
    MissingComponentError,
    ModelBundle,
    beam_search,
    benchmark,
    decode_corpus,
    default_max_len,
    format_transcripts,
    greedy_search,
    parse_speed_report,
    read_transcripts,
    rescore_nbest,
    score_sequence,
    speed_report,
    step_score,
)
from reslm.models import counters as model_counters
from reslm.models import AsrModel, asr_log_prob, lm_sequence_logprob, teacher_forcing
from reslm.numerics import Tensor
from toys import toy_bundle, toy_frames


# -- step_score -------------------------------------------------------------------

def test_step_score_examples():
    assert step_score(FusionMethod("shallow"), -1.0, ext_logp=-2.0) == pytest.approx(-2.2)
    assert step_score(FusionMethod("density_ratio"), -1.0, ext_logp=-2.0, src_logp=-2.5) == pytest.approx(-1.45)
    assert step_score(FusionMethod("residual"), -1.0, res_score=0.5) == pytest.approx(-0.7)
    assert step_score(FusionMethod("ilme"), -1.0, ext_logp=-2.0, ilm_logp=-3.0) == pytest.approx(-1.0 + 0.9 - 1.2)
    assert step_score(FusionMethod("none"), -1.0) == -1.0


def test_step_score_all_zero_weights_reduce_to_asr():
    for v in VARIANTS:
        m = FusionMethod(v, 0.0, 0.0, 0.0)
        assert step_score(m, -1.3, -2.0, -2.5, -0.7, 0.9) == -1.3


def test_step_score_missing_component():
    with pytest.raises(MissingComponentError):
        step_score(FusionMethod("density_ratio"), -1.0, ext_logp=-2.0)
    with pytest.raises(MissingComponentError):
        step_score(FusionMethod("residual"), -1.0, ext_logp=-2.0)


def test_fusion_method_validation():
    with pytest.raises(ValueError):
        FusionMethod("bogus")
    with pytest.raises(ValueError):
        FusionMethod("shallow", lambda_lm=-0.1)
    with pytest.raises(ValueError):
        BeamConfig(beam=0)


def test_bundle_must_supply_required_models():
    b = toy_bundle()
    with pytest.raises(MissingComponentError):
        beam_search(toy_frames(), ModelBundle(b.asr, b.ext_lm), FusionMethod("density_ratio"))
    with pytest.raises(MissingComponentError):
        beam_search(toy_frames(), ModelBundle(b.asr), FusionMethod("residual"))


def test_token_independent_shift_of_residual_scores_keeps_ranking():
    rng = np.random.default_rng(0)
    a = np.log(rng.dirichlet(np.ones(8)))
    f = rng.normal(size=8)
    m = FusionMethod("residual")
    base = step_score(m, a, res_score=f)
    for c in (-3.0, 0.5, 12.0):
        shifted = step_score(m, a, res_score=f + c)
        assert np.array_equal(np.argsort(-base, kind="stable"), np.argsort(-shifted, kind="stable"))
        assert np.allclose(shifted - base, m.lambda_lm * c)


# -- beam search ------------------------------------------------------------------

def test_beam_one_equals_greedy():
    for seed in range(4):
        b = toy_bundle(K=5, seed=seed)
        f = toy_frames(8, seed)
        for v in VARIANTS:
            m = FusionMethod(v)
            g = greedy_search(f, b, m)
            r = beam_search(f, b, m, BeamConfig(beam=1))
            assert r.best.tokens == g.tokens and r.best.score == pytest.approx(g.score, abs=1e-12)


def test_zero_weights_make_all_variants_byte_identical():
    b = toy_bundle(K=5, seed=3)
    ds = C.Dataset(C.make_utterances([[0, 1, 2], [3, 4], [1, 1, 0, 2]], "u", "T"), np.random.default_rng(0).normal(size=(5, 4)), 0.3, 1)
    vocab = C.Vocab.default(5)
    outs = {
        v: format_transcripts(decode_corpus(ds, b, FusionMethod(v, 0.0, 0.0, 0.0), BeamConfig(beam=4)), vocab)
        for v in VARIANTS
    }
    assert len(set(outs.values())) == 1


def _exhaustive_best(frames, bundle, method, max_len):
    K = bundle.asr.K
    best = None
    for n in range(max_len):
        for body in itertools.product(range(K), repeat=n):
            y = list(body) + [K]
            a = asr_log_prob(bundle.asr, frames, y)
            if method.variant == "shallow":
                s = a + method.lambda_lm * lm_sequence_logprob(bundle.ext_lm, list(body))
            else:
                inputs, targets, _ = teacher_forcing([list(body)], K)
                f = bundle.residual.sequence_scores(inputs).data[0]
                s = a + method.lambda_lm * float(sum(f[i, t] for i, t in enumerate(targets[0])))
            key = (-s, tuple(y))
            if best is None or key < best:
                best = key
    return -best[0], best[1]


@pytest.mark.parametrize("variant", ["shallow", "residual"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_exhaustive_enumeration_oracle(variant, seed):
    K, max_len = 3, 4
    b = toy_bundle(K=K, seed=seed, scale=1.0)
    f = toy_frames(5, seed)
    m = FusionMethod(variant)
    score, tokens = _exhaustive_best(f, b, m, max_len)
    r = beam_search(f, b, m, BeamConfig(beam=(K + 1) ** max_len, max_len=max_len))
    assert r.best.tokens == tokens
    assert r.best.score == pytest.approx(score, abs=1e-9)


def test_score_additivity_and_finished_flag():
    for seed in range(3):
        b = toy_bundle(K=6, seed=seed)
        f = toy_frames(9, seed)
        for v in VARIANTS:
            m = FusionMethod(v, ilme_smoothing=(seed == 2))
            r = beam_search(f, b, m, BeamConfig(beam=5, nbest=5))
            for h in r.nbest:
                assert h.finished == (h.tokens[-1] == b.asr.K)
                assert abs(h.score - score_sequence(f, b, m, h.tokens)) <= 1e-9
            scores = [h.score for h in r.nbest]
            assert scores == sorted(scores, reverse=True)


def test_unfinished_search_returns_flagged_best():
    b = toy_bundle(K=4, seed=1)
    eos = b.asr.K
    # forbid eos by making it hugely unlikely in the recognizer
    p = dict(b.asr.params)
    bias = p["out_b"].data.copy()
    bias[eos] = -1e3
    p["out_b"] = Tensor(bias)
    asr = b.asr.with_params(p)
    r = beam_search(toy_frames(), ModelBundle(asr), FusionMethod("none"), BeamConfig(beam=3, max_len=3))
    assert r.flagged and not r.best.finished and len(r.best.tokens) == 3


def test_tie_break_prefers_lexicographically_smaller_sequence():
    # untrained models: every sequence of a given length scores the same
    asr = AsrModel.create(3, feat_dim=4, H=8, emb_dim=4, att_dim=6)
    r = beam_search(toy_frames(), ModelBundle(asr), FusionMethod("none"), BeamConfig(beam=2, max_len=3, nbest=2))
    # eos (id 3) loses every tie, so nothing finishes
    assert r.flagged and [h.tokens for h in r.nbest] == [(0, 0, 0), (0, 0, 1)]
    r = beam_search(toy_frames(), ModelBundle(asr), FusionMethod("none"), BeamConfig(beam=4, max_len=3, nbest=4))
    assert not r.flagged and r.best.tokens == (3,)
    assert [h.tokens for h in r.nbest] == [(3,), (0, 3), (0, 0, 3)]


def test_decoder_pass_counters():
    b = toy_bundle(K=5, seed=0)
    f = toy_frames(7)
    per_expansion = {}
    for v in ("none", "shallow", "ilme", "residual"):
        before = model_counters["asr_decoder_rows"]
        r = beam_search(f, b, FusionMethod(v), BeamConfig(beam=4))
        rows = model_counters["asr_decoder_rows"] - before
        per_expansion[v] = rows / r.stats["expansions"]
        if v == "residual":
            assert r.stats["residual_normalizers"] == 0
    assert per_expansion["ilme"] == 2
    assert per_expansion["residual"] == 1
    assert per_expansion["shallow"] == 1


def test_default_max_len():
    assert default_max_len(9) == 7
    assert default_max_len(1) == 3


def test_rescore_nbest_orders_by_fused_score():
    b = toy_bundle(K=4, seed=2)
    f = toy_frames()
    hyps = [[0, 4], [1, 2, 4], [3, 4], [4]]
    out = rescore_nbest(f, b, FusionMethod("shallow"), hyps)
    assert [s for s, _ in out] == sorted((s for s, _ in out), reverse=True)
    assert {h for _, h in out} == {tuple(h) for h in hyps}


# -- corpus decoding ----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_dataset():
    vocab = C.Vocab.default(5)
    g = C.build_grammar(0, 5)
    utts = C.make_utterances(C.sample_corpus(g, 6, 2, 5, 0), "t", "T")
    return C.Dataset(utts, np.random.default_rng(0).normal(size=(5, 4)), 0.3, 2), vocab


def test_no_fusion_runs_without_any_lm(toy_dataset):
    ds, vocab = toy_dataset
    asr = toy_bundle(K=5).asr
    dec = decode_corpus(ds, ModelBundle(asr), FusionMethod("none"), BeamConfig(beam=3))
    assert len(dec.hyps) == len(ds) and dec.total_s > 0


def test_decode_deterministic_and_transcript_format(toy_dataset, tmp_path):
    ds, vocab = toy_dataset
    b = toy_bundle(K=5, seed=4)
    m = FusionMethod("residual")
    t1 = format_transcripts(decode_corpus(ds, b, m, BeamConfig(beam=3)), vocab)
    t2 = format_transcripts(decode_corpus(ds, b, m, BeamConfig(beam=3), workers=3), vocab)
    assert t1 == t2
    for line, u in zip(t1.splitlines(), ds.utterances):
        uid, score, text = line.split("\t")
        assert uid == u.uid and float(score) < 0
        assert all(s in vocab.symbols for s in text.split())
    (tmp_path / "h.txt").write_text(t1)
    back = read_transcripts(tmp_path / "h.txt", vocab)
    assert list(back) == [u.uid for u in ds.utterances]


def test_speed_report_format(toy_dataset):
    ds, _ = toy_dataset
    b = toy_bundle(K=5)
    times = benchmark(ds, b, {m: FusionMethod(m) for m in ("shallow", "ilme", "residual")}, BeamConfig(beam=2), repeats=1)
    text = speed_report(times)
    lines = text.splitlines()
    assert [l.split()[1] for l in lines] == ["shallow", "ilme", "residual"]
    for l in lines:
        parts = l.split()
        assert parts[0] == "method" and parts[2] == "total_s" and parts[4] == "rel_speed"
    parsed = parse_speed_report(text)
    assert parsed["shallow"][1] == 1.0
    for name, (t, rel) in parsed.items():
        assert rel == pytest.approx(parsed["shallow"][0] / t, rel=1e-5)
    with pytest.raises(ValueError):
        parse_speed_report("method x total_s 1\n")
