"""Toy recognizer, recurrent LM and residual network.

All three share the same conventions: inputs are token ids in
``0..K-1`` plus the start symbol ``K+1``; outputs cover the ``K`` symbols and
eos (``V = K + 1`` classes). Output projections start at zero, so the
untrained recognizer and LM are exactly uniform and the untrained residual
network scores every token with 0.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .numerics import Tensor

# "asr_decoder_rows": hypotheses pushed through AsrModel.decoder_step.
counters: Counter = Counter()

Params = Dict[str, Tensor]


def _init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _gru_params(rng, prefix: str, n_in: int, H: int) -> Params:
    return {
        f"{prefix}_wx": _init(rng, (n_in, 3 * H), H),
        f"{prefix}_wh": _init(rng, (H, 3 * H), H),
        f"{prefix}_bx": _zeros((3 * H,)),
        f"{prefix}_bh": _zeros((3 * H,)),
    }


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def teacher_forcing(seqs: Sequence[Sequence[int]], K: int):
    """Inputs ``[sos, y_1..y_L]`` and targets ``[y_1..y_L, eos]`` with a mask."""
    inputs, _ = pad_batch([[K + 1] + list(s) for s in seqs], pad=K + 1)
    targets, mask = pad_batch([list(s) + [K] for s in seqs], pad=K)
    return inputs, targets, mask


def _masked_update(h_prev: Tensor, h_new: Tensor, m: Optional[np.ndarray]) -> Tensor:
    if m is None or m.all():
        return h_new
    return h_prev + (h_new - h_prev) * m[:, None]


# ---------------------------------------------------------------------------
# LM / residual backbone
# ---------------------------------------------------------------------------

@dataclass
class Backbone:
    """Embedding, stacked GRU layers and a linear head with no normalization."""

    K: int
    H: int = 64
    layers: int = 1
    emb_dim: int = 32
    params: Params = field(default_factory=dict)

    kind = "backbone"

    @classmethod
    def create(cls, K: int, H: int = 64, layers: int = 1, emb_dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        p: Params = {"emb": Tensor(rng.normal(0.0, 0.3, size=(K + 2, emb_dim)), requires_grad=True)}
        n_in = emb_dim
        for layer in range(layers):
            p.update(_gru_params(rng, f"rnn{layer}", n_in, H))
            n_in = H
        p["out_w"] = _zeros((H, K + 1))
        p["out_b"] = _zeros((K + 1,))
        return cls(K, H, layers, emb_dim, p)

    @property
    def n_outputs(self) -> int:
        return self.K + 1

    def meta(self) -> dict:
        return {"K": self.K, "H": self.H, "layers": self.layers, "emb_dim": self.emb_dim}

    def with_params(self, params: Params):
        return type(self)(self.K, self.H, self.layers, self.emb_dim, dict(params))

    def _check(self, tokens: np.ndarray) -> None:
        if np.any(tokens < 0) or np.any(tokens > self.K + 1) or np.any(tokens == self.K):
            raise ValueError("invalid input token id (eos is not an input)")

    def init_state(self, batch: int) -> List[Tensor]:
        return [Tensor._wrap(np.zeros((batch, self.H))) for _ in range(self.layers)]

    def raw_step(self, state: List[Tensor], tokens) -> Tuple[Tensor, List[Tensor]]:
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check(tokens)
        p = self.params
        x = nx.take_rows(p["emb"], tokens)
        new = []
        for layer, h in enumerate(state):
            xp = x @ p[f"rnn{layer}_wx"] + p[f"rnn{layer}_bx"]
            x = nx.gru_cell(xp, h, p[f"rnn{layer}_wh"], p[f"rnn{layer}_bh"])
            new.append(x)
        return x @ p["out_w"] + p["out_b"], new

    def raw_sequence(self, inputs: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
        """Teacher-forced head outputs, shape ``(B, L, V)``."""
        self._check(inputs)
        p = self.params
        B, L = inputs.shape
        x = nx.take_rows(p["emb"], inputs)
        for layer in range(self.layers):
            xp = x @ p[f"rnn{layer}_wx"] + p[f"rnn{layer}_bx"]
            h = Tensor._wrap(np.zeros((B, self.H)))
            outs = []
            for t in range(L):
                hn = nx.gru_cell(xp[:, t, :], h, p[f"rnn{layer}_wh"], p[f"rnn{layer}_bh"])
                h = _masked_update(h, hn, None if mask is None else mask[:, t])
                outs.append(h)
            x = nx.stack(outs, axis=1)
        return x @ p["out_w"] + p["out_b"]


class NeuralLm(Backbone):
    kind = "lm"

    def step(self, state, tokens) -> Tuple[Tensor, List[Tensor]]:
        raw, new = self.raw_step(state, tokens)
        return nx.log_softmax(raw, axis=-1), new

    def sequence_log_probs(self, inputs, mask=None) -> Tensor:
        return nx.log_softmax(self.raw_sequence(inputs, mask), axis=-1)


class ResidualNet(Backbone):
    kind = "residual"

    def step(self, state, tokens) -> Tuple[Tensor, List[Tensor]]:
        return self.raw_step(state, tokens)

    def sequence_scores(self, inputs, mask=None) -> Tensor:
        return self.raw_sequence(inputs, mask)


def lm_step(model: NeuralLm, state, token):
    return model.step(state, token)


def residual_step(model: ResidualNet, state, token):
    return model.step(state, token)


# ---------------------------------------------------------------------------
# attention encoder-decoder recognizer
# ---------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    states: Tensor  # (B, T, H), layer-normalized
    keys: Tensor  # (B, T, A), precomputed attention keys
    bias: np.ndarray  # (B, T), 0 for real frames and -1e9 for padding

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    def repeat(self, index) -> "EncoderOutput":
        idx = np.asarray(index, dtype=np.int64)
        return EncoderOutput(
            Tensor._wrap(self.states.data[idx]), Tensor._wrap(self.keys.data[idx]), self.bias[idx]
        )


@dataclass
class DecoderState:
    s: Tensor  # (B, H) recurrent state
    c: Tensor  # (B, H) previous attention context


@dataclass
class AsrModel:
    """Bidirectional GRU encoder + layer norm, GRU decoder with additive attention.

    Logits are ``s @ W_s + c @ W_c + b``: a decoder-state (linguistic) term
    plus an acoustic-context term, both zero at initialization.
    """

    K: int
    feat_dim: int = 16
    H: int = 64
    emb_dim: int = 32
    att_dim: int = 32
    params: Params = field(default_factory=dict)

    kind = "asr"

    @classmethod
    def create(cls, K: int, feat_dim: int = 16, H: int = 64, emb_dim: int = 32, att_dim: int = 32, seed: int = 0):
        if H % 2:
            raise ValueError("hidden size must be even (two encoder directions)")
        rng = np.random.default_rng(seed)
        He = H // 2
        p: Params = {}
        p.update(_gru_params(rng, "enc_f", feat_dim, He))
        p.update(_gru_params(rng, "enc_b", feat_dim, He))
        p["emb"] = Tensor(rng.normal(0.0, 0.3, size=(K + 2, emb_dim)), requires_grad=True)
        p.update(_gru_params(rng, "dec", emb_dim + H, H))
        p["att_q"] = _init(rng, (H, att_dim), H)
        p["att_k"] = _init(rng, (H, att_dim), H)
        p["att_b"] = _zeros((att_dim,))
        p["att_v"] = _init(rng, (att_dim,), att_dim)
        p["out_ws"] = _zeros((H, K + 1))
        p["out_wc"] = _zeros((H, K + 1))
        p["out_b"] = _zeros((K + 1,))
        return cls(K, feat_dim, H, emb_dim, att_dim, p)

    @property
    def n_outputs(self) -> int:
        return self.K + 1

    def meta(self) -> dict:
        return {"K": self.K, "feat_dim": self.feat_dim, "H": self.H, "emb_dim": self.emb_dim, "att_dim": self.att_dim}

    def with_params(self, params: Params) -> "AsrModel":
        return AsrModel(self.K, self.feat_dim, self.H, self.emb_dim, self.att_dim, dict(params))

    # encoder ---------------------------------------------------------------
    def _run_gru(self, prefix: str, xp: Tensor, mask: np.ndarray, reverse: bool) -> List[Tensor]:
        p = self.params
        B, T = mask.shape
        h = Tensor._wrap(np.zeros((B, self.H // 2)))
        outs: List[Optional[Tensor]] = [None] * T
        order = range(T - 1, -1, -1) if reverse else range(T)
        for t in order:
            hn = nx.gru_cell(xp[:, t, :], h, p[f"{prefix}_wh"], p[f"{prefix}_bh"])
            h = _masked_update(h, hn, mask[:, t])
            outs[t] = h
        return outs

    def encode_batch(self, frames: Sequence[np.ndarray]) -> EncoderOutput:
        if len(frames) == 0 or any(len(f) == 0 for f in frames):
            raise ValueError("encoder needs at least one frame per utterance")
        p = self.params
        T = max(len(f) for f in frames)
        B = len(frames)
        x = np.zeros((B, T, self.feat_dim))
        mask = np.zeros((B, T))
        for i, f in enumerate(frames):
            x[i, : len(f)] = f
            mask[i, : len(f)] = 1.0
        xt = Tensor._wrap(x)
        fwd = self._run_gru("enc_f", xt @ p["enc_f_wx"] + p["enc_f_bx"], mask, False)
        bwd = self._run_gru("enc_b", xt @ p["enc_b_wx"] + p["enc_b_bx"], mask, True)
        hs = nx.concat([nx.stack(fwd, axis=1), nx.stack(bwd, axis=1)], axis=-1)
        hs = nx.layer_norm(hs)
        return EncoderOutput(hs, hs @ p["att_k"], np.where(mask > 0, 0.0, -1e9))

    def encode(self, frames: np.ndarray) -> Tensor:
        """Encoder states ``(T, H)`` for one utterance."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or len(frames) == 0:
            raise ValueError("encoder needs a non-empty (T, F) frame matrix")
        return Tensor._wrap(self.encode_batch([frames]).states.data[0])

    def zero_encoder(self, batch: int, length: int = 1) -> EncoderOutput:
        """Zero-filled encoder block used for internal-LM estimation."""
        z = Tensor._wrap(np.zeros((batch, length, self.H)))
        return EncoderOutput(z, z @ self.params["att_k"], np.zeros((batch, length)))

    # decoder -----------------------------------------------------------------
    def init_state(self, batch: int) -> DecoderState:
        zero = Tensor._wrap(np.zeros((batch, self.H)))
        return DecoderState(zero, zero)

    def decoder_step(self, enc: EncoderOutput, state: DecoderState, tokens) -> Tuple[Tensor, DecoderState]:
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if np.any(tokens < 0) or np.any(tokens > self.K + 1) or np.any(tokens == self.K):
            raise ValueError("invalid decoder input token id")
        counters["asr_decoder_rows"] += len(tokens)
        p = self.params
        x = nx.concat([nx.take_rows(p["emb"], tokens), state.c], axis=-1)
        s = nx.gru_cell(x @ p["dec_wx"] + p["dec_bx"], state.s, p["dec_wh"], p["dec_bh"])
        q = s @ p["att_q"] + p["att_b"]
        e = nx.tanh(enc.keys + nx.reshape(q, (q.shape[0], 1, q.shape[1]))) @ p["att_v"]
        alpha = nx.softmax(e + enc.bias, axis=-1)
        B, T = alpha.shape
        c = nx.tsum(enc.states * nx.reshape(alpha, (B, T, 1)), axis=1)
        z = s @ p["out_ws"] + c @ p["out_wc"] + p["out_b"]
        return z, DecoderState(s, c)

    def teacher_forced_logits(self, enc: EncoderOutput, inputs: np.ndarray) -> Tensor:
        """Logits ``(B, L, V)`` feeding ``inputs`` (starting with sos)."""
        state = self.init_state(inputs.shape[0])
        outs = []
        for t in range(inputs.shape[1]):
            z, state = self.decoder_step(enc, state, inputs[:, t])
            outs.append(z)
        return nx.stack(outs, axis=1)


def decoder_step(model: AsrModel, enc: EncoderOutput, prev_state: DecoderState, token):
    return model.decoder_step(enc, prev_state, token)


def asr_log_prob(model: AsrModel, frames: np.ndarray, y: Sequence[int]) -> float:
    """Teacher-forced ``log p(y | x)``; ``y`` must end with eos."""
    y = list(y)
    if not y or y[-1] != model.K:
        raise ValueError("sequence must end with eos")
    enc = model.encode_batch([np.asarray(frames, dtype=np.float64)])
    inputs = np.array([[model.K + 1] + y[:-1]])
    logp = nx.log_softmax(model.teacher_forced_logits(enc, inputs), axis=-1).data[0]
    return float(sum(logp[i, t] for i, t in enumerate(y)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class OptimConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    seed: int = 0


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / (total + 1e-12)
    return {k: g * scale for k, g in grads.items()}


def loss_and_grads(params: Params, loss_fn: Callable[[Params], Tensor]):
    with nx.Tape() as tape:
        loss = loss_fn(params)
    g = nx.backward(loss, tape, params.values())
    return float(loss.data), {k: g[v] for k, v in params.items()}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def masked_token_nll(logp: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    onehot = np.zeros(logp.shape)
    B, L = targets.shape
    onehot[np.arange(B)[:, None], np.arange(L)[None, :], targets] = 1.0
    onehot *= mask[:, :, None]
    return -nx.tsum(logp * onehot) * (1.0 / mask.sum())


def _fit(model, n: int, cfg: OptimConfig, batch_loss, on_epoch=None):
    rng = np.random.default_rng(cfg.seed)
    state = nx.AdamState()
    params = dict(model.params)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(n, cfg.batch_size, rng):
            value, grads = loss_and_grads(params, lambda p: batch_loss(model.with_params(p), idx))
            grads = clip_gradients(grads, cfg.clip)
            params = nx.adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += value * len(idx)
            count += len(idx)
        model = model.with_params(params)
        history.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, model, history[-1])
    return model, history


def asr_batch_loss(model: AsrModel, frames: Sequence[np.ndarray], seqs: Sequence[Sequence[int]]) -> Tensor:
    enc = model.encode_batch(frames)
    inputs, targets, mask = teacher_forcing(seqs, model.K)
    logp = nx.log_softmax(model.teacher_forced_logits(enc, inputs), axis=-1)
    return masked_token_nll(logp, targets, mask)


def lm_batch_loss(model: NeuralLm, seqs: Sequence[Sequence[int]]) -> Tensor:
    inputs, targets, mask = teacher_forcing(seqs, model.K)
    return masked_token_nll(model.sequence_log_probs(inputs, mask), targets, mask)


def train_asr(dataset, cfg: OptimConfig, model: Optional[AsrModel] = None, on_epoch=None, **arch):
    """Cross-entropy training on paired (features, tokens) data.

    ``dataset`` is a :class:`reslm.corpus.Dataset` with a codebook.
    """
    utts = dataset.utterances
    if not utts:
        raise ValueError("empty training set")
    if model is None:
        K = dataset.codebook.shape[0]
        model = AsrModel.create(K, feat_dim=dataset.codebook.shape[1], seed=cfg.seed, **arch)
    feats = [dataset.features(u) for u in utts]
    seqs = [u.tokens for u in utts]

    def batch_loss(m, idx):
        return asr_batch_loss(m, [feats[i] for i in idx], [seqs[i] for i in idx])

    return _fit(model, len(utts), cfg, batch_loss, on_epoch)


def train_lm(texts: Sequence[Sequence[int]], K: int, cfg: OptimConfig, model: Optional[NeuralLm] = None, on_epoch=None, **arch):
    if len(texts) == 0:
        raise ValueError("empty training corpus")
    if model is None:
        model = NeuralLm.create(K, seed=cfg.seed, **arch)
    texts = list(texts)

    def batch_loss(m, idx):
        return lm_batch_loss(m, [texts[i] for i in idx])

    return _fit(model, len(texts), cfg, batch_loss, on_epoch)


def lm_sequence_logprob(lm: NeuralLm, seq: Sequence[int]) -> float:
    inputs, targets, mask = teacher_forcing([seq], lm.K)
    logp = lm.sequence_log_probs(inputs).data[0]
    return float(sum(logp[i, t] for i, t in enumerate(targets[0])))


def greedy_lm_sample(lm: NeuralLm, max_len: int = 50) -> List[int]:
    state = lm.init_state(1)
    tok = lm.K + 1
    out = []
    for _ in range(max_len):
        logp, state = lm.step(state, [tok])
        tok = int(np.argmax(logp.data[0]))
        if tok == lm.K:
            break
        out.append(tok)
    return out
