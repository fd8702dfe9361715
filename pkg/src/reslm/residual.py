"""Training target and loss for the residual network.

For each position the smoothed target is ``r = log q* - gamma * log p~`` where
``q*`` is the label-smoothed reference and ``p~`` the temperature-softened
internal LM. It splits into a normalized part ``log q = log_softmax(r)`` and
a scalar bias ``log N = logsumexp(r)``. Cross-entropy fits the softmax of the
network scores to ``q``; a squared error pins ``logsumexp(f)`` to the
hard-label bias ``-gamma * log p~[y]``.
"""

from __future__ import annotations

import concurrent.futures as cf
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .internal_lm import internal_lm_logits_batch, smooth
from .models import AsrModel, OptimConfig, ResidualNet, clip_gradients, teacher_forcing
from .numerics import Tensor

OBJECTIVES = ("integrated", "elementwise_mse")


@dataclass
class TrainConfig:
    gamma: float = 0.3
    omega: float = 0.01
    temperature: float = 2.0
    epsilon: float = 1e-7
    eta: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 5.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.omega < 1.0:
            raise ValueError("omega must lie in [0, 1)")
        if self.temperature < 1.0:
            raise ValueError("temperature must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


@dataclass
class TargetDecomposition:
    r_tilde: np.ndarray
    log_q: np.ndarray
    log_N: np.ndarray
    gamma: float


def smoothed_label(true_id, K: int, omega: float) -> np.ndarray:
    """``(1 - omega) * onehot(true_id) + omega / K``; vectorized over ``true_id``."""
    if not 0.0 <= omega < 1.0:
        raise ValueError("omega must lie in [0, 1)")
    ids = np.asarray(true_id, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= K):
        raise ValueError(f"label id outside vocabulary of size {K}")
    q = np.full(ids.shape + (K,), omega / K)
    np.put_along_axis(q, ids[..., None], (1.0 - omega) + omega / K, axis=-1)
    return q


def build_target(q_star, p_tilde, gamma: float) -> np.ndarray:
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    if np.any(p_tilde <= 0):
        raise ValueError("smoothed internal-LM probabilities must be positive")
    with np.errstate(divide="ignore"):
        # omega = 0 gives log 0 = -inf off the reference token
        log_q_star = np.log(np.asarray(q_star, dtype=np.float64))
    return log_q_star - gamma * np.log(p_tilde)


def decompose(r_tilde, gamma: float = float("nan")) -> TargetDecomposition:
    r = np.asarray(r_tilde, dtype=np.float64)
    log_N = nx.logsumexp(r, axis=-1).data
    return TargetDecomposition(r, r - np.expand_dims(log_N, -1), log_N, gamma)


def bias_closed_form(q_star, p_tilde, gamma: float) -> np.ndarray:
    """``log sum_k q*_k / p~_k**gamma``, evaluated directly."""
    return np.log(np.sum(np.asarray(q_star) / np.asarray(p_tilde) ** gamma, axis=-1))


def _reduce(per_pos: Tensor, mask, reduction: str) -> Tensor:
    if mask is not None:
        per_pos = per_pos * np.asarray(mask, dtype=np.float64)
        n = float(np.sum(mask))
    else:
        n = float(per_pos.size)
    total = nx.tsum(per_pos)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / n)
    raise ValueError(f"unknown reduction {reduction!r}")


def ce_loss(log_q, f, mask=None, reduction: str = "sum") -> Tensor:
    """``-sum_pos sum_k q_k * log_softmax(f)_k`` with ``q = exp(log_q)``."""
    f = nx.as_tensor(f)
    log_q = np.asarray(log_q, dtype=np.float64)
    if log_q.shape != f.shape:
        raise ValueError(f"target shape {log_q.shape} does not match scores {f.shape}")
    per_pos = -nx.tsum(nx.log_softmax(f, axis=-1) * np.exp(log_q), axis=-1)  # exp(-inf) = 0
    return _reduce(per_pos, mask, reduction)


def mse_loss(f, p_true, gamma: float, mask=None, reduction: str = "mean") -> Tensor:
    """Squared bias residual ``(logsumexp(f) + gamma * log p~[y])**2`` per position."""
    f = nx.as_tensor(f)
    log_p = np.log(np.asarray(p_true, dtype=np.float64))
    if log_p.shape != f.shape[:-1]:
        raise ValueError("one internal-LM probability per position is required")
    resid = nx.logsumexp(f, axis=-1) + gamma * log_p
    return _reduce(resid * resid, mask, reduction)


def total_loss(ce, mse, eta: float):
    if eta < 0:
        raise ValueError("eta must be >= 0")
    return ce + eta * mse


def elementwise_mse_loss(r_tilde, f, mask=None, reduction: str = "mean") -> Tensor:
    """Plain squared distance to every target entry; a negative control only."""
    f = nx.as_tensor(f)
    diff = f - np.asarray(r_tilde, dtype=np.float64)
    per_pos = nx.mean(diff * diff, axis=-1)
    return _reduce(per_pos, mask, reduction)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class SentenceTargets:
    inputs: np.ndarray  # (L,) sos + tokens
    targets: np.ndarray  # (L,) tokens + eos
    log_q: np.ndarray  # (L, V)
    r_tilde: np.ndarray  # (L, V)
    p_true: np.ndarray  # (L,) smoothed internal-LM probability of the reference


def prepare_targets(texts: Sequence[Sequence[int]], asr: AsrModel, cfg: TrainConfig, chunk: int = 256) -> List[SentenceTargets]:
    """Internal-LM pass over every sentence, computed once (the recognizer is frozen)."""
    V = asr.n_outputs
    out = []
    for i in range(0, len(texts), chunk):
        seqs = [list(s) for s in texts[i : i + chunk]]
        logits, targets, mask = internal_lm_logits_batch(asr, seqs)
        inputs, _, _ = teacher_forcing(seqs, asr.K)
        for b, seq in enumerate(seqs):
            L = len(seq) + 1
            tgt = targets[b, :L]
            p_tilde = smooth(logits[b, :L], cfg.temperature, cfg.epsilon)
            r = build_target(smoothed_label(tgt, V, cfg.omega), p_tilde, cfg.gamma)
            dec = decompose(r, cfg.gamma)
            out.append(
                SentenceTargets(inputs[b, :L].copy(), tgt.copy(), dec.log_q, r, p_tilde[np.arange(L), tgt])
            )
    return out


def _stack_batch(items: Sequence[SentenceTargets], K: int):
    L = max(len(t.targets) for t in items)
    B = len(items)
    V = items[0].log_q.shape[1]
    inputs = np.full((B, L), K + 1, dtype=np.int64)
    mask = np.zeros((B, L))
    log_q = np.full((B, L, V), -np.log(V))
    r = np.zeros((B, L, V))
    p_true = np.ones((B, L))
    for b, t in enumerate(items):
        n = len(t.targets)
        inputs[b, :n] = t.inputs
        mask[b, :n] = 1.0
        log_q[b, :n] = t.log_q
        r[b, :n] = t.r_tilde
        p_true[b, :n] = t.p_true
    return inputs, mask, log_q, r, p_true


def residual_batch_losses(model: ResidualNet, items: Sequence[SentenceTargets], cfg: TrainConfig, n_tokens: float, objective: str = "integrated"):
    """(ce, mse, total) as sums over ``items`` divided by ``n_tokens``.

    Dividing by the full batch's token count makes the partition losses add
    up to the batch loss, so partition gradients can simply be summed.
    """
    inputs, mask, log_q, r, p_true = _stack_batch(items, model.K)
    f = model.sequence_scores(inputs, mask)
    scale = 1.0 / n_tokens
    if objective == "integrated":
        ce = ce_loss(log_q, f, mask, "sum") * scale
        mse = mse_loss(f, p_true, cfg.gamma, mask, "sum") * scale
        return ce, mse, total_loss(ce, mse, cfg.eta)
    if objective == "elementwise_mse":
        loss = elementwise_mse_loss(r, f, mask, "sum") * scale
        return loss, loss, loss
    raise ValueError(f"unknown objective {objective!r}")


def accumulate_gradients(parts: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for g in parts:
        for k, v in g.items():
            out[k] = out[k] + v if k in out else np.array(v, copy=True)
    return out


def partition_gradients(model: ResidualNet, items, cfg: TrainConfig, n_parts: int, objective: str = "integrated", executor=None):
    """Per-partition tapes; returns ``(values, grads)`` with values ``(ce, mse, total)``."""
    n_tokens = float(sum(len(t.targets) for t in items))
    chunks = [c for c in np.array_split(np.arange(len(items)), max(1, n_parts)) if len(c)]
    params = model.params

    def work(idx):
        with nx.Tape() as tape:
            ce, mse, total = residual_batch_losses(model, [items[i] for i in idx], cfg, n_tokens, objective)
        g = nx.backward(total, tape, params.values())
        return (float(ce.data), float(mse.data), float(total.data)), {k: g[v] for k, v in params.items()}

    if executor is not None and len(chunks) > 1:
        results = list(executor.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    values = tuple(sum(r[0][i] for r in results) for i in range(3))
    return values, accumulate_gradients([r[1] for r in results])


def format_epoch_line(epoch: int, ce: float, mse: float, total: float) -> str:
    return f"epoch {epoch} ce {ce:.6f} mse {mse:.6f} total {total:.6f}"


def train_residual(
    texts: Sequence[Sequence[int]],
    asr: AsrModel,
    cfg: TrainConfig,
    model: Optional[ResidualNet] = None,
    on_epoch: Optional[Callable] = None,
    objective: str = "integrated",
    **arch,
):
    """Fit a :class:`ResidualNet` on target-domain text with the recognizer frozen.

    ``objective="elementwise_mse"`` regresses every score onto the raw target
    and exists only as a negative control. Returns ``(model, history)`` where
    history holds one ``{"ce", "mse", "total"}`` dict per epoch (token means).
    """
    if len(texts) == 0:
        raise ValueError("empty training corpus")
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if model is None:
        model = ResidualNet.create(asr.K, seed=cfg.seed, **arch)
    items = prepare_targets(texts, asr, cfg)
    rng = np.random.default_rng(cfg.seed)
    state = nx.AdamState()
    history = []
    executor = cf.ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            sums = np.zeros(3)
            tokens = 0.0
            order = rng.permutation(len(items))
            for start in range(0, len(items), cfg.batch_size):
                batch = [items[i] for i in order[start : start + cfg.batch_size]]
                n = float(sum(len(t.targets) for t in batch))
                values, grads = partition_gradients(model, batch, cfg, cfg.workers, objective, executor)
                grads = clip_gradients(grads, cfg.clip)
                params = nx.adam_step(model.params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                model = model.with_params(params)
                sums += np.array(values) * n
                tokens += n
            ce, mse, total = sums / tokens
            history.append({"ce": ce, "mse": mse, "total": total})
            if on_epoch is not None:
                on_epoch(epoch, model, history[-1])
    finally:
        if executor is not None:
            executor.shutdown()
    return model, history


def bias_residuals(model: ResidualNet, items: Sequence[SentenceTargets], gamma: float) -> np.ndarray:
    """``|logsumexp(f) + gamma * log p~[y]|`` for every position of ``items``."""
    out = []
    for start in range(0, len(items), 256):
        chunk = items[start : start + 256]
        inputs, mask, _, _, p_true = _stack_batch(chunk, model.K)
        f = model.sequence_scores(inputs, mask).data
        resid = np.abs(nx.logsumexp(f, axis=-1).data + gamma * np.log(p_true))
        out.append(resid[mask > 0])
    return np.concatenate(out)


def optim_from(cfg: TrainConfig) -> OptimConfig:
    return OptimConfig(cfg.epochs, cfg.batch_size, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip, cfg.seed)
