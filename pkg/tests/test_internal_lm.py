import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reslm import numerics as nx
from reslm.internal_lm import internal_lm_log_prob, internal_lm_logits, internal_lm_logits_batch, smooth
from reslm.models import AsrModel

K = 7


@pytest.fixture(scope="module")
def asr():
    m = AsrModel.create(K, feat_dim=4, H=8, emb_dim=4, att_dim=6, seed=3)
    rng = np.random.default_rng(0)
    return m.with_params({k: nx.Tensor(v.data + 0.4 * rng.normal(size=v.shape)) for k, v in m.params.items()})


def test_internal_lm_never_consults_audio(asr):
    y = [1, 5, 2, K]
    a = internal_lm_logits(asr, y)
    # encoding unrelated audio in between must not matter either
    asr.encode(np.random.default_rng(1).normal(size=(6, 4)))
    b = internal_lm_logits(asr, y)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (len(y), K + 1)


def test_internal_lm_differs_from_audio_conditioned_decoder(asr):
    y = [1, 5, 2, K]
    enc = asr.encode_batch([np.random.default_rng(2).normal(size=(9, 4))])
    inputs = np.array([[K + 1] + y[:-1]])
    audio = asr.teacher_forced_logits(enc, inputs).data[0]
    assert not np.allclose(audio, internal_lm_logits(asr, y))


def test_internal_lm_batch_matches_single(asr):
    seqs = [[1, 2], [3, 4, 5, 6], [0]]
    logits, targets, mask = internal_lm_logits_batch(asr, seqs)
    for b, s in enumerate(seqs):
        single = internal_lm_logits(asr, s + [K])
        assert np.allclose(logits[b, : len(s) + 1], single, atol=1e-12)


def test_untrained_internal_lm_is_uniform():
    m = AsrModel.create(K, feat_dim=4, H=8, emb_dim=4, att_dim=6)
    z = internal_lm_logits(m, [2, 3, K])
    assert np.array_equal(z, np.zeros_like(z))
    assert internal_lm_log_prob(m, [2, 3, K]) == pytest.approx(-3 * math.log(K + 1), abs=1e-12)


def test_internal_lm_log_prob_matches_stepwise_loop(asr):
    y = [4, 0, 6, K]
    enc = asr.zero_encoder(1, 1)
    state = asr.init_state(1)
    prev, total = K + 1, 0.0
    for t in y:
        z, state = asr.decoder_step(enc, state, [prev])
        zz = z.data[0]
        total += zz[t] - math.log(np.exp(zz).sum())
        prev = t
    assert internal_lm_log_prob(asr, y) == pytest.approx(total, abs=1e-12)


def test_internal_lm_requires_eos(asr):
    with pytest.raises(ValueError):
        internal_lm_logits(asr, [1, 2])


# -- smoothing -------------------------------------------------------------------

def test_smooth_t1_eps0_is_softmax():
    z = np.array([0.5, -1.0, 3.0, 0.0])
    e = np.exp(z - z.max())
    assert np.allclose(smooth(z, 1.0, 0.0), e / e.sum(), atol=1e-15)


def test_smooth_large_temperature_is_flat():
    z = np.array([5.0, -3.0, 0.2])
    assert np.allclose(smooth(z, 1e6, 1e-3), 1 / 3 + 1e-3, atol=1e-6)


def test_smooth_two_entries_high_precision_value():
    p = smooth(np.array([2.0, 0.0]), 2.0, 0.01)
    assert p[0] == pytest.approx(0.74105857863000487925, abs=1e-15)
    assert p[1] == pytest.approx(0.27894142136999512075, abs=1e-15)


def test_smooth_rejects_bad_parameters():
    with pytest.raises(ValueError):
        smooth(np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        smooth(np.zeros(3), 2.0, -1e-3)


logits = arrays(np.float64, st.integers(2, 10), elements=st.floats(-30, 30))


@settings(max_examples=100, deadline=None)
@given(logits, st.floats(1.0, 50.0), st.floats(1.0, 50.0))
def test_higher_temperature_never_sharpens(z, t1, t2):
    assume(np.ptp(z) > 1e-9)
    lo, hi = sorted((t1, t2))
    assert smooth(z, hi, 0.0).max() <= smooth(z, lo, 0.0).max() + 1e-15


@settings(max_examples=100, deadline=None)
@given(logits, st.floats(1.0, 10.0), st.floats(0.0, 0.1))
def test_smoothed_floor_and_total_mass(z, T, eps):
    p = smooth(z, T, eps)
    assert p.min() >= eps
    assert abs(p.sum() - (1 + len(z) * eps)) < 1e-10
