"""Synthetic two-domain corpora: bigram grammars, token sampling, pseudo-acoustics.

Token ids ``0..K-1`` are emitting symbols, ``K`` is end-of-sentence and
``K+1`` is the input-only start symbol. A grammar is a ``(K+1, K+1)`` matrix
whose rows ``0..K-1`` are "previous token" states and whose last row is the
sentence-start state; columns ``0..K-1`` are next tokens and column ``K`` is
eos.
"""

from __future__ import annotations

import io
import string
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

MAGIC = "RLMCORPUS 1"
DOMAINS = ("S", "T")


class CorpusFormatError(ValueError):
    """Malformed corpus or grammar file; ``lineno`` is 1-based."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class Vocab:
    """Bijective symbol/id map with reserved eos and sos ids."""

    symbols: tuple

    EOS_SYMBOL = "<eos>"
    SOS_SYMBOL = "<sos>"

    @classmethod
    def default(cls, size: int) -> "Vocab":
        pool = list(string.ascii_lowercase) + list(string.digits)
        if size <= len(pool):
            syms = pool[:size]
        else:
            syms = [f"t{i}" for i in range(size)]
        return cls(tuple(syms))

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")
        for s in self.symbols:
            if not s or any(c.isspace() for c in s) or s in (self.EOS_SYMBOL, self.SOS_SYMBOL):
                raise ValueError(f"invalid vocabulary symbol {s!r}")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def eos(self) -> int:
        return len(self.symbols)

    @property
    def sos(self) -> int:
        return len(self.symbols) + 1

    @property
    def n_outputs(self) -> int:
        """Output classes of every model: the K symbols plus eos."""
        return len(self.symbols) + 1

    def id(self, symbol: str) -> int:
        if symbol == self.EOS_SYMBOL:
            return self.eos
        if symbol == self.SOS_SYMBOL:
            return self.sos
        return self._index[symbol]

    def symbol(self, idx: int) -> str:
        if idx == self.eos:
            return self.EOS_SYMBOL
        if idx == self.sos:
            return self.SOS_SYMBOL
        return self.symbols[idx]

    def encode(self, symbols: Iterable[str]) -> List[int]:
        return [self._index[s] for s in symbols]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.symbols[i] for i in ids if i < len(self.symbols)]


@dataclass
class Grammar:
    transitions: np.ndarray
    seed: int
    concentration: float
    one_hot: bool = False

    @property
    def vocab_size(self) -> int:
        return self.transitions.shape[1] - 1

    @property
    def start_row(self) -> np.ndarray:
        return self.transitions[-1]

    def unigram(self, n: int = 20000, seed: int = 0) -> np.ndarray:
        """Empirical token unigram from ``n`` unconstrained sentences."""
        counts = np.zeros(self.vocab_size)
        for seq in sample_corpus(self, n, 1, 200, seed):
            np.add.at(counts, seq, 1)
        return counts / counts.sum()


@dataclass
class Utterance:
    uid: str
    tokens: List[int]
    domain: str = "T"


def build_grammar(
    seed: int,
    K: int,
    concentration: float = 0.5,
    eos_prob: float = 0.12,
    one_hot: bool = False,
    popularity: Optional[float] = 2.0,
) -> Grammar:
    """Draw a row-stochastic bigram grammar.

    A per-grammar token popularity ``w ~ Dirichlet(popularity)`` is drawn
    first; each token row is then ``Dirichlet(concentration * K * w)``, so
    grammars with different seeds favour different tokens (a unigram shift)
    while keeping distinct bigram structure. ``popularity=None`` uses the
    symmetric ``Dirichlet(concentration)``. The self transition is removed
    (repeated tokens would be acoustically unresolvable) and token rows are
    scaled by ``1 - eos_prob``. ``one_hot=True`` is the concentration -> 0
    limit: the deterministic cycle 0 -> 1 -> ... -> K-1 -> 0.
    """
    if K < 2:
        raise ValueError("grammar needs K >= 2")
    if not one_hot and concentration <= 0:
        raise ValueError("concentration must be positive")
    if not 0.0 <= eos_prob < 1.0:
        raise ValueError("eos_prob must lie in [0, 1)")
    P = np.zeros((K + 1, K + 1))
    if one_hot:
        for i in range(K):
            P[i, (i + 1) % K] = 1.0 - eos_prob
            P[i, K] = eos_prob
        P[K, 0] = 1.0
        return Grammar(P, seed, concentration, True)
    rng = np.random.default_rng(seed)
    if popularity is None:
        alpha = np.full(K, concentration)
    else:
        alpha = concentration * K * rng.dirichlet(np.full(K, popularity)) + 1e-3
    for i in range(K + 1):
        row = rng.dirichlet(alpha)
        if i < K:
            row[i] = 0.0
        total = row.sum()
        if total <= 0:
            # all mass fell on the removed self loop
            row = np.ones(K)
            if i < K:
                row[i] = 0.0
            total = row.sum()
        row = row / total
        if i < K:
            P[i, :K] = row * (1.0 - eos_prob)
            P[i, K] = eos_prob
        else:
            P[i, :K] = row
    P = P / P.sum(axis=1, keepdims=True)
    return Grammar(P, seed, concentration, False)


def sample_corpus(g: Grammar, n: int, len_min: int, len_max: int, seed: int) -> List[List[int]]:
    """Sample ``n`` token sequences (without eos) of length in ``[len_min, len_max]``.

    eos is masked out below ``len_min`` and forced at ``len_max``.
    """
    if len_min < 1 or len_max < len_min:
        raise ValueError("need 1 <= len_min <= len_max")
    K = g.vocab_size
    P = g.transitions
    rng = np.random.default_rng(seed)
    cdf_full = np.cumsum(P, axis=1)
    no_eos = P[:, :K] / P[:, :K].sum(axis=1, keepdims=True)
    cdf_noeos = np.cumsum(no_eos, axis=1)
    out = []
    for _ in range(n):
        seq: List[int] = []
        state = K
        while True:
            u = rng.random()
            if len(seq) < len_min:
                c = cdf_noeos[state]
                nxt = int(min(np.searchsorted(c, u * c[-1], side="right"), K - 1))
            else:
                c = cdf_full[state]
                nxt = int(min(np.searchsorted(c, u * c[-1], side="right"), K))
            if nxt == K:
                break
            seq.append(nxt)
            state = nxt
            if len(seq) >= len_max:
                break
        out.append(seq)
    return out


def build_codebook(
    K: int,
    dim: int = 16,
    seed: int = 0,
    group_size: int = 2,
    spread: float = 0.45,
    scale: float = 1.0,
) -> np.ndarray:
    """One code vector per token.

    Tokens are grouped into confusable clusters of ``group_size``: members of a
    cluster sit ``spread`` apart around a shared random centre, so acoustics
    alone cannot always tell them apart and linguistic context matters.
    """
    rng = np.random.default_rng(seed)
    n_groups = -(-K // group_size)
    centres = rng.normal(0.0, scale, size=(n_groups, dim))
    codes = np.zeros((K, dim))
    for k in range(K):
        gidx, member = divmod(k, group_size)
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        codes[k] = centres[gidx] + 0.5 * spread * direction
    return codes


def utterance_seed(uid: str, seed: int) -> list:
    return [int(seed), zlib.crc32(uid.encode("utf-8"))]


def synthesize_features(
    y: Sequence[int],
    codebook: np.ndarray,
    noise_std: float,
    seed: Union[int, Sequence[int]],
    min_frames: int = 2,
    max_frames: int = 4,
) -> np.ndarray:
    """Frames for token sequence ``y``: each token repeats its code 2-4 times plus noise."""
    K = codebook.shape[0]
    for t in y:
        if not 0 <= t < K:
            raise ValueError(f"token id {t} outside codebook of size {K}")
    rng = np.random.default_rng(seed)
    counts = rng.integers(min_frames, max_frames + 1, size=len(y))
    idx = np.repeat(np.asarray(y, dtype=np.int64), counts)
    frames = codebook[idx]
    if noise_std > 0:
        frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
    return frames


# serialization -------------------------------------------------------------------

def write_corpus(path: Union[str, Path], utterances: Sequence[Utterance], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u in utterances:
            if u.domain not in DOMAINS:
                raise ValueError(f"unknown domain tag {u.domain!r}")
            f.write(f"{u.uid}\t{u.domain}\t{' '.join(vocab.decode(u.tokens))}\n")


def read_corpus(path: Union[str, Path], vocab: Vocab) -> List[Utterance]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusFormatError(path, lineno, "expected <id>\\t<domain>\\t<symbols>")
            uid, domain, text = parts
            if not uid:
                raise CorpusFormatError(path, lineno, "empty utterance id")
            if domain not in DOMAINS:
                raise CorpusFormatError(path, lineno, f"unknown domain tag {domain!r}")
            syms = text.split()
            try:
                tokens = vocab.encode(syms)
            except KeyError as e:
                raise CorpusFormatError(path, lineno, f"unknown symbol {e.args[0]!r}") from None
            out.append(Utterance(uid, tokens, domain))
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix_file(path: Union[str, Path], kind: str, matrix: np.ndarray, meta: dict) -> None:
    """Structured text: magic header, ``key value`` metadata, then matrix rows."""
    buf = io.StringIO()
    buf.write(MAGIC + "\n")
    buf.write(f"kind {kind}\n")
    for k in sorted(meta):
        buf.write(f"{k} {meta[k]}\n")
    buf.write(f"rows {matrix.shape[0]} {matrix.shape[1]}\n")
    for row in matrix:
        buf.write(" ".join(_fmt(v) for v in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_matrix_file(path: Union[str, Path]):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise CorpusFormatError(path, 1, f"missing header {MAGIC!r}")
    meta = {}
    kind = None
    i = 1
    while i < len(lines):
        key, _, val = lines[i].partition(" ")
        if key == "rows":
            break
        if key == "kind":
            kind = val
        else:
            meta[key] = val
        i += 1
    if i >= len(lines):
        raise CorpusFormatError(path, i, "missing rows line")
    try:
        nr, nc = (int(v) for v in lines[i].split()[1:3])
    except ValueError:
        raise CorpusFormatError(path, i + 1, "bad rows line") from None
    rows = []
    for j in range(nr):
        lineno = i + 2 + j
        if lineno - 1 >= len(lines):
            raise CorpusFormatError(path, lineno, "truncated matrix")
        try:
            vals = [float(v) for v in lines[lineno - 1].split()]
        except ValueError:
            raise CorpusFormatError(path, lineno, "non-numeric matrix entry") from None
        if len(vals) != nc:
            raise CorpusFormatError(path, lineno, f"expected {nc} values, got {len(vals)}")
        rows.append(vals)
    return kind, meta, np.array(rows, dtype=np.float64).reshape(nr, nc)


def write_grammar(path, g: Grammar) -> None:
    write_matrix_file(
        path,
        "grammar",
        g.transitions,
        {"concentration": _fmt(g.concentration), "one_hot": int(g.one_hot), "seed": g.seed},
    )


def read_grammar(path) -> Grammar:
    kind, meta, P = read_matrix_file(path)
    if kind != "grammar":
        raise CorpusFormatError(path, 2, f"expected kind grammar, got {kind!r}")
    return Grammar(P, int(meta["seed"]), float(meta["concentration"]), bool(int(meta["one_hot"])))


def write_codebook(path, codebook: np.ndarray, seed: int, noise_std: float) -> None:
    write_matrix_file(path, "codebook", codebook, {"noise_std": _fmt(noise_std), "seed": seed})


def read_codebook(path):
    kind, meta, C = read_matrix_file(path)
    if kind != "codebook":
        raise CorpusFormatError(path, 2, f"expected kind codebook, got {kind!r}")
    return C, int(meta["seed"]), float(meta["noise_std"])


@dataclass
class Dataset:
    """Utterances plus what is needed to regenerate their features."""

    utterances: List[Utterance]
    codebook: Optional[np.ndarray] = None
    noise_std: float = 0.3
    feature_seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.utterances)

    def features(self, u: Utterance) -> np.ndarray:
        if self.codebook is None:
            raise ValueError("text-only dataset has no features")
        f = self._cache.get(u.uid)
        if f is None:
            f = synthesize_features(
                u.tokens, self.codebook, self.noise_std, utterance_seed(u.uid, self.feature_seed)
            )
            self._cache[u.uid] = f
        return f

    @property
    def texts(self) -> List[List[int]]:
        return [u.tokens for u in self.utterances]


def make_utterances(seqs: Sequence[Sequence[int]], prefix: str, domain: str) -> List[Utterance]:
    return [Utterance(f"{prefix}{i:06d}", list(s), domain) for i, s in enumerate(seqs)]
