"""Error rates, perplexity and the results table."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        # empty reference: insertions are reported against a length of 1
        return self.errors / max(self.ref_len, 1)

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_len + other.ref_len,
        )


def edit_distance(ref: Sequence, hyp: Sequence) -> ErrorCounts:
    """Minimal Levenshtein alignment counts.

    Among alignments with the same total cost, the one with the most
    substitutions is chosen (a substitution beats a deletion+insertion pair).
    """
    n, m = len(ref), len(hyp)
    # cell = (cost, -subs, dels, ins); lexicographic min implements the tie rule
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        r = ref[i - 1]
        for j in range(1, m + 1):
            c, s, d, ins = prev[j - 1]
            if r == hyp[j - 1]:
                best = (c, s, d, ins)
            else:
                best = (c + 1, s - 1, d, ins)
            c, s, d, ins = prev[j]
            cand = (c + 1, s, d + 1, ins)
            if cand < best:
                best = cand
            c, s, d, ins = cur[j - 1]
            cand = (c + 1, s, d, ins + 1)
            if cand < best:
                best = cand
            cur.append(best)
        prev = cur
    _, s, d, ins = prev[m]
    return ErrorCounts(-s, d, ins, n)


def corpus_counts(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> ErrorCounts:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = ErrorCounts()
    for r, h in zip(refs, hyps):
        total = total + edit_distance(r, h)
    return total


def corpus_wer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Pooled error rate: total errors over total reference length."""
    return corpus_counts(refs, hyps).wer


def perplexity(lm, corpus: Sequence[Sequence[int]], batch_size: int = 256) -> float:
    """``exp`` of the mean per-token negative log-probability, eos included."""
    from .models import teacher_forcing

    corpus = list(corpus)
    if not corpus:
        raise ValueError("perplexity of an empty corpus")
    nll, count = 0.0, 0
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i : i + batch_size]
        inputs, targets, mask = teacher_forcing(chunk, lm.K)
        logp = lm.sequence_log_probs(inputs, mask).data
        picked = np.take_along_axis(logp, targets[:, :, None], axis=-1)[:, :, 0]
        nll -= float(np.sum(picked * mask))
        count += int(mask.sum())
    return math.exp(nll / count)


def grammar_entropy_rate(transitions: np.ndarray, sequences: Iterable[Sequence[int]]) -> float:
    """Mean per-token conditional entropy (nats) of a bigram grammar along ``sequences``.

    Averaging the true conditional entropies over the visited states gives the
    expected log-perplexity of a grammar-matched model on that corpus.
    """
    P = transitions
    K = P.shape[1] - 1
    H = -np.sum(np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0), axis=1)
    total, count = 0.0, 0
    for seq in sequences:
        state = K
        for tok in list(seq) + [K]:
            total += H[state]
            count += 1
            state = tok
    return total / count


def format_results_table(rows: Sequence[tuple]) -> str:
    """Aligned ``method | WER | rel_speed`` table; rows are (method, wer%, rel_speed|None)."""
    header = ("method", "WER", "rel_speed")
    cells = [header] + [
        (str(m), f"{w:.2f}", "---" if s is None else f"x{s:.2f}") for m, w, s in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(3)]
    lines = []
    for k, r in enumerate(cells):
        lines.append(" | ".join(c.ljust(widths[i]) for i, c in enumerate(r)).rstrip())
        if k == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def parse_results_table(text: str) -> List[tuple]:
    rows = []
    for line in text.strip().splitlines()[2:]:
        m, w, s = (c.strip() for c in line.split("|"))
        rows.append((m, float(w), None if s == "---" else float(s.lstrip("x"))))
    return rows
