"""Beam search with pluggable LM fusion.

Per output token the fused increment is

============== =============================================
none           ``a``
shallow        ``a + lm * e``
density_ratio  ``a - dr * s + lm * e``
ilme           ``a - ilm * i + lm * e``
residual       ``a + lm * f``
============== =============================================

with ``a`` the recognizer log-posterior, ``e``/``s`` target/source LM
log-probabilities, ``i`` the zero-encoder internal LM and ``f`` the raw
residual-network score.
"""

from __future__ import annotations

import concurrent.futures as cf
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .internal_lm import ZERO_ENCODER_LENGTH, smooth
from .models import AsrModel, DecoderState, EncoderOutput, NeuralLm, ResidualNet
from .numerics import Tensor

VARIANTS = ("none", "shallow", "density_ratio", "ilme", "residual")

_REQUIRES = {
    "none": (),
    "shallow": ("ext_lm",),
    "density_ratio": ("ext_lm", "src_lm"),
    "ilme": ("ext_lm",),
    "residual": ("residual",),
}


class MissingComponentError(ValueError):
    pass


@dataclass(frozen=True)
class FusionMethod:
    variant: str = "none"
    lambda_lm: float = 0.6
    lambda_dr: float = 0.3
    lambda_ilm: float = 0.3
    ilme_smoothing: bool = False
    temperature: float = 2.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}")
        if min(self.lambda_lm, self.lambda_dr, self.lambda_ilm) < 0:
            raise ValueError("fusion weights must be non-negative")

    @property
    def requires(self) -> tuple:
        return _REQUIRES[self.variant]


@dataclass
class ModelBundle:
    asr: AsrModel
    ext_lm: Optional[NeuralLm] = None
    src_lm: Optional[NeuralLm] = None
    residual: Optional[ResidualNet] = None

    def check(self, method: FusionMethod) -> None:
        for name in method.requires:
            if getattr(self, name) is None:
                raise MissingComponentError(f"fusion {method.variant!r} needs {name}")


@dataclass(frozen=True)
class BeamConfig:
    beam: int = 10
    max_len: Optional[int] = None
    nbest: int = 1

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.nbest < 1:
            raise ValueError("nbest must be >= 1")


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    score: float
    finished: bool

    def text(self, eos: int) -> List[int]:
        return [t for t in self.tokens if t != eos]


@dataclass
class DecodeResult:
    nbest: List[Hypothesis]
    flagged: bool = False  # no hypothesis reached eos within max_len
    stats: Counter = field(default_factory=Counter)

    @property
    def best(self) -> Hypothesis:
        return self.nbest[0]


def step_score(method: FusionMethod, asr_logp, ext_logp=None, src_logp=None, ilm_logp=None, res_score=None):
    """Fused score increment; works on scalars or same-shape arrays."""
    v = method.variant

    def need(x, name):
        if x is None:
            raise MissingComponentError(f"fusion {v!r} needs {name}")
        return x

    if v == "none":
        return asr_logp
    if v == "shallow":
        return asr_logp + method.lambda_lm * need(ext_logp, "ext_logp")
    if v == "density_ratio":
        return asr_logp - method.lambda_dr * need(src_logp, "src_logp") + method.lambda_lm * need(ext_logp, "ext_logp")
    if v == "ilme":
        return asr_logp - method.lambda_ilm * need(ilm_logp, "ilm_logp") + method.lambda_lm * need(ext_logp, "ext_logp")
    if v == "residual":
        return asr_logp + method.lambda_lm * need(res_score, "res_score")
    raise ValueError(v)


def default_max_len(n_frames: int) -> int:
    """Twice the token-count estimate (about 3 frames per token), plus eos."""
    return 2 * max(1, math.ceil(n_frames / 3)) + 1


def _gather(state, idx: np.ndarray):
    if isinstance(state, Tensor):
        return Tensor._wrap(state.data[idx])
    if isinstance(state, DecoderState):
        return DecoderState(_gather(state.s, idx), _gather(state.c, idx))
    if isinstance(state, list):
        return [_gather(s, idx) for s in state]
    raise TypeError(type(state))


class _Scorers:
    """Batched per-step evaluation of every component a fusion variant uses."""

    def __init__(self, bundle: ModelBundle, method: FusionMethod, stats: Counter):
        bundle.check(method)
        self.b = bundle
        self.m = method
        self.stats = stats
        v = method.variant
        self.use_ext = v in ("shallow", "density_ratio", "ilme")
        self.use_src = v == "density_ratio"
        self.use_ilm = v == "ilme"
        self.use_res = v == "residual"

    def init(self, n: int) -> dict:
        st = {"asr": self.b.asr.init_state(n)}
        if self.use_ext:
            st["ext"] = self.b.ext_lm.init_state(n)
        if self.use_src:
            st["src"] = self.b.src_lm.init_state(n)
        if self.use_ilm:
            st["ilm"] = self.b.asr.init_state(n)
        if self.use_res:
            st["res"] = self.b.residual.init_state(n)
        return st

    def step(self, enc: EncoderOutput, states: dict, tokens: np.ndarray):
        n = len(tokens)
        self.stats["expansions"] += n
        asr = self.b.asr
        z, asr_state = asr.decoder_step(enc, states["asr"], tokens)
        new = {"asr": asr_state}
        a = nx.log_softmax(z, axis=-1).data
        e = s = i = f = None
        if self.use_ext:
            lp, new["ext"] = self.b.ext_lm.step(states["ext"], tokens)
            e = lp.data
        if self.use_src:
            lp, new["src"] = self.b.src_lm.step(states["src"], tokens)
            s = lp.data
        if self.use_ilm:
            zi, new["ilm"] = asr.decoder_step(asr.zero_encoder(n, ZERO_ENCODER_LENGTH), states["ilm"], tokens)
            if self.m.ilme_smoothing:
                i = np.log(smooth(zi.data, self.m.temperature, self.m.epsilon))
            else:
                i = nx.log_softmax(zi, axis=-1).data
        if self.use_res:
            before = nx.counters["normalizer"]
            fs, new["res"] = self.b.residual.step(states["res"], tokens)
            self.stats["residual_normalizers"] += nx.counters["normalizer"] - before
            f = fs.data
        return step_score(self.m, a, e, s, i, f), new


def gather_states(states: dict, idx: np.ndarray) -> dict:
    return {k: _gather(v, idx) for k, v in states.items()}


def beam_search(frames: np.ndarray, bundle: ModelBundle, method: FusionMethod, cfg: BeamConfig = BeamConfig()) -> DecodeResult:
    """Fused beam search over one utterance.

    Each step expands every alive hypothesis by all ``K + 1`` outputs and keeps
    the ``beam`` best expansions; those ending in eos leave the beam as
    finished. Equal scores are broken by the lexicographically smaller token
    sequence.
    """
    asr = bundle.asr
    eos, sos = asr.K, asr.K + 1
    stats: Counter = Counter()
    scorers = _Scorers(bundle, method, stats)
    frames = np.asarray(frames, dtype=np.float64)
    enc1 = asr.encode_batch([frames])
    max_len = cfg.max_len if cfg.max_len is not None else default_max_len(len(frames))

    prefixes: List[Tuple[int, ...]] = [()]
    scores = np.zeros(1)
    states = scorers.init(1)
    last = np.array([sos])
    finished: List[Hypothesis] = []
    V = asr.n_outputs
    for step in range(max_len):
        n = len(prefixes)
        enc = enc1.repeat(np.zeros(n, dtype=np.int64))
        inc, new_states = scorers.step(enc, states, last)
        neg = -(scores[:, None] + inc).ravel()
        if neg.size > cfg.beam:
            # keep everything tied with the beam-th best so the tie rule stays exact
            kth = np.partition(neg, cfg.beam - 1)[cfg.beam - 1]
            sel = np.nonzero(neg <= kth)[0]
        else:
            sel = np.arange(neg.size)
        keys = sorted(
            (float(neg[j]), prefixes[j // V] + (int(j % V),), int(j // V)) for j in sel
        )[: cfg.beam]
        keep_rows, keep_tok, keep_pref, keep_scores = [], [], [], []
        for neg, pref, r in keys:
            if pref[-1] == eos:
                finished.append(Hypothesis(pref, -neg, True))
            else:
                keep_rows.append(r)
                keep_tok.append(pref[-1])
                keep_pref.append(pref)
                keep_scores.append(-neg)
        if not keep_rows:
            prefixes = []
            break
        idx = np.array(keep_rows, dtype=np.int64)
        states = gather_states(new_states, idx)
        prefixes = keep_pref
        scores = np.array(keep_scores)
        last = np.array(keep_tok, dtype=np.int64)

    flagged = False
    if finished:
        pool = finished
    else:
        flagged = True
        pool = [Hypothesis(p, float(s), False) for p, s in zip(prefixes, scores)]
    pool.sort(key=lambda h: (-h.score, h.tokens))
    return DecodeResult(pool[: cfg.nbest], flagged, stats)


def greedy_search(frames: np.ndarray, bundle: ModelBundle, method: FusionMethod, max_len: Optional[int] = None) -> Hypothesis:
    """Pick the best increment at every step (smallest token id on ties)."""
    asr = bundle.asr
    eos = asr.K
    scorers = _Scorers(bundle, method, Counter())
    frames = np.asarray(frames, dtype=np.float64)
    enc = asr.encode_batch([frames])
    max_len = max_len if max_len is not None else default_max_len(len(frames))
    states = scorers.init(1)
    tok = asr.K + 1
    out: List[int] = []
    total = 0.0
    for _ in range(max_len):
        inc, states = scorers.step(enc, states, np.array([tok]))
        tok = int(np.argmax(inc[0]))
        total += float(inc[0, tok])
        out.append(tok)
        if tok == eos:
            return Hypothesis(tuple(out), total, True)
    return Hypothesis(tuple(out), total, False)


def score_sequence(frames: np.ndarray, bundle: ModelBundle, method: FusionMethod, tokens: Sequence[int]) -> float:
    """Teacher-forced sum of fused increments along ``tokens``."""
    asr = bundle.asr
    scorers = _Scorers(bundle, method, Counter())
    enc = asr.encode_batch([np.asarray(frames, dtype=np.float64)])
    states = scorers.init(1)
    prev = asr.K + 1
    total = 0.0
    for t in tokens:
        inc, states = scorers.step(enc, states, np.array([prev]))
        total += float(inc[0, t])
        prev = t
    return total


def rescore_nbest(frames, bundle: ModelBundle, method: FusionMethod, hyps: Sequence[Sequence[int]]) -> List[Tuple[float, Tuple[int, ...]]]:
    """Rescore token sequences with ``method`` and sort best-first."""
    scored = [(score_sequence(frames, bundle, method, h), tuple(h)) for h in hyps]
    scored.sort(key=lambda x: (-x[0], x[1]))
    return scored


# ---------------------------------------------------------------------------
# corpus decoding
# ---------------------------------------------------------------------------

@dataclass
class CorpusDecode:
    method: str
    uids: List[str]
    hyps: List[List[int]]
    scores: List[float]
    flagged: List[bool]
    total_s: float
    stats: Counter


def decode_corpus(dataset, bundle: ModelBundle, method: FusionMethod, cfg: BeamConfig = BeamConfig(), workers: int = 1) -> CorpusDecode:
    """Decode every utterance of a featured dataset; wall-clock time is recorded."""
    bundle.check(method)
    utts = dataset.utterances
    feats = [dataset.features(u) for u in utts]
    eos = bundle.asr.K
    t0 = time.perf_counter()
    if workers > 1:
        with cf.ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda f: beam_search(f, bundle, method, cfg), feats))
    else:
        results = [beam_search(f, bundle, method, cfg) for f in feats]
    elapsed = time.perf_counter() - t0
    stats: Counter = Counter()
    for r in results:
        stats.update(r.stats)
    return CorpusDecode(
        method.variant,
        [u.uid for u in utts],
        [r.best.text(eos) for r in results],
        [r.best.score for r in results],
        [r.flagged for r in results],
        elapsed,
        stats,
    )


def format_transcripts(dec: CorpusDecode, vocab) -> str:
    return "".join(
        f"{uid}\t{score:.6f}\t{' '.join(vocab.decode(h))}\n" for uid, score, h in zip(dec.uids, dec.scores, dec.hyps)
    )


def read_transcripts(path, vocab) -> Dict[str, Tuple[float, List[int]]]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected <id>\\t<score>\\t<symbols>")
            out[parts[0]] = (float(parts[1]), vocab.encode(parts[2].split()))
    return out


def speed_report(times: Dict[str, float], base: str = "shallow") -> str:
    """``method <name> total_s <v> rel_speed <v>`` lines, relative to ``base``."""
    ref = times[base]
    return "".join(f"method {m} total_s {t:.6f} rel_speed {ref / t:.6f}\n" for m, t in times.items())


def parse_speed_report(text: str) -> Dict[str, Tuple[float, float]]:
    out = {}
    for line in text.strip().splitlines():
        parts = line.split()
        if len(parts) != 6 or parts[0] != "method" or parts[2] != "total_s" or parts[4] != "rel_speed":
            raise ValueError(f"malformed speed line: {line!r}")
        out[parts[1]] = (float(parts[3]), float(parts[5]))
    return out


def benchmark(dataset, bundle: ModelBundle, methods: Dict[str, FusionMethod], cfg: BeamConfig = BeamConfig(), repeats: int = 3) -> Dict[str, float]:
    """Single-threaded decode time per method; the fastest of ``repeats`` runs is kept.

    Runs are interleaved across methods so slow drifts in machine load hit
    every method alike.
    """
    best = {name: float("inf") for name in methods}
    for _ in range(repeats):
        for name, m in methods.items():
            best[name] = min(best[name], decode_corpus(dataset, bundle, m, cfg).total_s)
    return best
