"""Label-smoothed cross-entropy, frame-level alignment CE and CTC.

Smoothing puts mass ``epsilon`` uniformly over all ``V`` classes, so the
target is ``1 - eps + eps/V`` on the gold class and ``eps/V`` elsewhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import grad as G
from .grad import NEG_INF, Tensor

log = logging.getLogger(__name__)

IGNORE = -1


@dataclass(frozen=True)
class SmoothedCESpec:
    epsilon: float
    vocab_size: int

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")

    def target_distribution(self, target: int) -> np.ndarray:
        q = np.full(self.vocab_size, self.epsilon / self.vocab_size)
        q[target] += 1.0 - self.epsilon
        return q


@dataclass(frozen=True)
class CTCSpec:
    vocab_size: int

    @property
    def blank_id(self) -> int:
        return self.vocab_size


def smoothed_targets(targets: np.ndarray, vocab_size: int, epsilon: float) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    q = np.full(targets.shape + (vocab_size,), epsilon / vocab_size)
    safe = np.where(targets < 0, 0, targets)
    np.put_along_axis(q, safe[..., None], 1.0 - epsilon + epsilon / vocab_size, axis=-1)
    return q


def smoothed_ce(log_probs: Tensor, targets, mask=None, epsilon: float = 0.0) -> Tensor:
    """Mean of ``-sum_k q_k log p_k`` over unmasked positions.

    ``log_probs`` is ``[N, V]`` (plain masked mean) or ``[B, N, V]``; for the
    batched form each sequence is averaged over its own valid positions and the
    batch loss is the mean of those per-sequence means.  Targets equal to
    ``IGNORE`` are always masked.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    targets = np.asarray(targets, dtype=np.int64)
    V = log_probs.shape[-1]
    if targets.shape != log_probs.shape[:-1]:
        raise G.ShapeError(f"smoothed_ce: targets {targets.shape} vs log_probs {log_probs.shape}")
    if targets.size and targets.max() >= V:
        raise ValueError(f"target id {targets.max()} out of range for {V} classes")
    valid = targets >= 0
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    q = smoothed_targets(targets, V, epsilon)
    per_pos = G.scale(G.sum(G.mul(log_probs, Tensor(q)), axis=-1), -1.0)
    if per_pos.ndim == 1:
        return G.masked_mean(per_pos, valid)
    per_seq = G.masked_mean(per_pos, valid, axis=-1)
    return G.scale(G.sum(per_seq), 1.0 / per_seq.shape[0])


def linear_head(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Projection + log-softmax over the last axis."""
    logits = G.matmul(x, weight)
    logits = G.add(logits, G.expand(bias, logits.shape))
    return G.log_softmax(logits, axis=-1)


def frame_alignment_ce(
    layer_output: Tensor,
    labels,
    weight: Tensor,
    bias: Tensor,
    epsilon: float = 0.5,
    lengths=None,
) -> Tensor:
    """Frame-synchronous CE of a linear classifier head against alignment labels.

    ``layer_output`` is ``[T, D]`` with ``labels`` of length ``T``, or
    ``[B, T, D]`` with ``labels`` padded to ``[B, T]`` and true ``lengths``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if layer_output.ndim == 2:
        if labels.shape != (layer_output.shape[0],):
            raise ValueError(
                f"alignment length {labels.shape[0]} != frame count {layer_output.shape[0]}"
            )
        return smoothed_ce(linear_head(layer_output, weight, bias), labels, epsilon=epsilon)
    B, T = layer_output.shape[:2]
    if labels.shape != (B, T):
        raise ValueError(f"alignment shape {labels.shape} != frames {(B, T)}")
    mask = None
    if lengths is not None:
        mask = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return smoothed_ce(linear_head(layer_output, weight, bias), labels, mask, epsilon=epsilon)


# ---------------------------------------------------------------- CTC


def ctc_min_frames(targets) -> int:
    targets = list(targets)
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    m = np.where(m <= NEG_INF, 0.0, m)
    with np.errstate(divide="ignore"):
        out = m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))
    return np.maximum(out, NEG_INF)


def _extend(targets: list[list[int]], blank: int):
    S = max(2 * len(t) + 1 for t in targets)
    B = len(targets)
    ext = np.full((B, S), blank, dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)
    lens = np.zeros(B, dtype=np.int64)
    for b, t in enumerate(targets):
        n = len(t)
        lens[b] = 2 * n + 1
        ext[b, 1 : 2 * n : 2] = t
        for s in range(3, 2 * n, 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    return ext, skip, lens


def ctc_forward_backward(log_probs: np.ndarray, targets, input_lengths=None, blank=None):
    """Batched log-space CTC recursion.

    Returns ``(nll[B], grad[B, T, C], feasible[B])`` where ``grad`` is the
    derivative of each sequence NLL with respect to its own log-probabilities.
    Infeasible sequences get ``nll = 0`` and zero gradient.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    B, T, C = lp.shape
    blank = C - 1 if blank is None else blank
    targets = [list(map(int, t)) for t in targets]
    if input_lengths is None:
        input_lengths = np.full(B, T)
    input_lengths = np.asarray(input_lengths, dtype=np.int64)
    for t in targets:
        if not t:
            raise ValueError("CTC target sequences must be non-empty")
        if any(x < 0 or x >= C or x == blank for x in t):
            raise ValueError(f"CTC target ids must lie in [0, {C}) and avoid blank {blank}")
    feasible = np.array(
        [input_lengths[b] >= ctc_min_frames(targets[b]) for b in range(B)], dtype=bool
    )

    ext, skip, slen = _extend(targets, blank)
    S = ext.shape[1]
    valid_state = np.arange(S)[None, :] < slen[:, None]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid_state[:, None, :], emit, NEG_INF)
    neg = np.full((B, 1), NEG_INF)
    neg2 = np.full((B, 2), NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    a0 = np.full((B, S), NEG_INF)
    a0[:, 0] = emit[:, 0, 0]
    a0[:, 1] = np.where(slen > 1, emit[:, 0, 1], NEG_INF)
    alpha[:, 0] = a0
    for t in range(1, T):
        prev = alpha[:, t - 1]
        s1 = np.concatenate([neg, prev[:, :-1]], axis=1)
        s2 = np.where(skip, np.concatenate([neg2, prev[:, :-2]], axis=1), NEG_INF)
        cur = _lse3(prev, s1, s2) + emit[:, t]
        alpha[:, t] = np.where(valid_state, np.maximum(cur, NEG_INF), NEG_INF)

    last = input_lengths - 1
    a_last = alpha[np.arange(B), last]
    end1 = np.take_along_axis(a_last, (slen - 1)[:, None], axis=1)[:, 0]
    end2 = np.take_along_axis(a_last, np.maximum(slen - 2, 0)[:, None], axis=1)[:, 0]
    end2 = np.where(slen > 1, end2, NEG_INF)
    logp = np.logaddexp(end1, end2)

    # beta includes the emission at its own frame
    beta = np.full((B, T, S), NEG_INF)
    skip_next = np.concatenate([skip[:, 2:], np.zeros((B, 2), dtype=bool)], axis=1)
    is_final = (np.arange(S)[None, :] == (slen - 1)[:, None]) | (
        (np.arange(S)[None, :] == (slen - 2)[:, None]) & (slen[:, None] > 1)
    )
    nxt = np.full((B, S), NEG_INF)
    for t in range(T - 1, -1, -1):
        n1 = np.concatenate([nxt[:, 1:], neg], axis=1)
        n2 = np.where(skip_next, np.concatenate([nxt[:, 2:], neg2], axis=1), NEG_INF)
        rec = _lse3(nxt, n1, n2) + emit[:, t]
        init = np.where(is_final, emit[:, t], NEG_INF)
        at_end = (t == last)[:, None]
        inside = (t < last)[:, None]
        cur = np.where(at_end, init, np.where(inside, rec, NEG_INF))
        cur = np.where(valid_state, np.maximum(cur, NEG_INF), NEG_INF)
        beta[:, t] = cur
        nxt = cur

    ok = feasible & (logp > NEG_INF / 2)
    safe_logp = np.where(ok, logp, 0.0)
    gamma = alpha + beta - emit - safe_logp[:, None, None]
    occ = np.where(ok[:, None, None] & (gamma > NEG_INF / 2), np.exp(np.minimum(gamma, 0.0)), 0.0)
    tmask = np.arange(T)[None, :, None] < input_lengths[:, None, None]
    occ = occ * tmask
    onehot = np.zeros((B, S, C))
    np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
    onehot *= valid_state[:, :, None]
    grad = -np.einsum("bts,bsc->btc", occ, onehot)
    nll = np.where(ok, -logp, 0.0)
    return nll, grad, ok


def ctc_loss(
    log_probs: Tensor,
    targets,
    input_lengths=None,
    events: list | None = None,
    reduction: str = "mean",
) -> Tensor:
    """CTC negative log-likelihood; blank is the last class.

    ``log_probs`` is ``[T, V+1]`` with a single target sequence, or
    ``[B, T, V+1]`` with a list of sequences.  ``reduction`` is ``"mean"``
    (over the batch), ``"sum"`` or ``"none"`` (per-sequence vector).
    Infeasible sequences contribute 0 and are appended to ``events``.
    """
    single = log_probs.ndim == 2
    lp = log_probs.value[None] if single else log_probs.value
    tg = [targets] if single else targets
    nll, grad, ok = ctc_forward_backward(lp, tg, input_lengths)
    for b in np.flatnonzero(~ok):
        msg = f"ctc: skipped sequence {b} (needs {ctc_min_frames(tg[b])} frames)"
        log.warning(msg)
        if events is not None:
            events.append(msg)

    def vjp(g):
        full = grad * np.asarray(g).reshape(-1, 1, 1)
        return (full[0] if single else full,)

    per_seq = G.custom(nll[0] if single else nll, (log_probs,), vjp)
    if single or reduction == "none":
        return per_seq
    total = G.sum(per_seq)
    if reduction == "sum":
        return total
    return G.scale(total, 1.0 / len(tg))
