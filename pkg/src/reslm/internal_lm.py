"""Internal LM of the recognizer, estimated with a zero-filled encoder output."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .models import AsrModel, teacher_forcing

# Attention over one zero vector yields a zero context at every step.
ZERO_ENCODER_LENGTH = 1


def internal_lm_logits_batch(asr: AsrModel, seqs: Sequence[Sequence[int]]):
    """Teacher-forced decoder logits with zeroed encoder states.

    ``seqs`` are token sequences without eos. Returns ``(logits (B, L+1, V),
    targets, mask)``; no audio is ever consulted.
    """
    inputs, targets, mask = teacher_forcing(seqs, asr.K)
    enc = asr.zero_encoder(len(seqs), ZERO_ENCODER_LENGTH)
    logits = asr.teacher_forced_logits(enc, inputs).data
    return logits, targets, mask


def internal_lm_logits(asr: AsrModel, y: Sequence[int]) -> np.ndarray:
    """Per-position internal-LM logits ``(len(y), V)``; ``y`` must end with eos."""
    y = list(y)
    if not y or y[-1] != asr.K:
        raise ValueError("sequence must end with eos")
    logits, _, _ = internal_lm_logits_batch(asr, [y[:-1]])
    return logits[0]


def internal_lm_log_prob(asr: AsrModel, y: Sequence[int]) -> float:
    z = internal_lm_logits(asr, y)
    logp = nx.log_softmax(z, axis=-1).data
    return float(sum(logp[i, t] for i, t in enumerate(y)))


def smooth(z, T: float = 2.0, eps: float = 1e-7) -> np.ndarray:
    """Temperature-softened distribution ``softmax(z / T) + eps`` along the last axis."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    return nx.softmax(z / T, axis=-1).data + eps
