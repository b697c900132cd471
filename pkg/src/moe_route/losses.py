"""Training objectives: CTC, expert-diversity KL, classification CE,
routing MSE, and their weighted combinations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Combination weights: alpha scales the KL diversity term, beta the
    classification CE term, gamma the routing MSE term."""

    alpha: float = 5.0
    beta: float = 0.1
    gamma: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


def ctc_min_frames(target) -> int:
    """Shortest frame count that admits an alignment: one frame per label
    plus a separating blank between adjacent repeats."""
    target = list(target)
    repeats = sum(1 for i in range(len(target) - 1) if target[i] == target[i + 1])
    return len(target) + repeats


def ctc_feasible(num_frames: int, target) -> bool:
    return num_frames >= ctc_min_frames(target)


def _ctc_forward_backward(log_probs: np.ndarray, target) -> tuple:
    """Log-space forward-backward over the blank-extended label sequence.
    Returns (loss, grad wrt logits) using the posterior formulation."""
    T, V = log_probs.shape
    blank = V - 1
    U = len(target)
    ext = np.empty(2 * U + 1, dtype=np.int64)
    ext[0::2] = blank
    ext[1::2] = target
    S = ext.size
    # skip transition s-2 -> s allowed for non-blank labels that differ from
    # the label two slots back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = log_probs[:, ext]  # T x S
    NEG = -np.inf

    alpha = np.full((T, S), NEG)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = np.logaddexp(prev, np.concatenate(([NEG], prev[:-1])))
        jump = np.concatenate(([NEG, NEG], prev[:-2]))
        alpha[t] = np.where(skip, np.logaddexp(stay, jump), stay) + emit[t]

    tail = alpha[T - 1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alpha[T - 1, S - 2])
    loss = -tail
    if not np.isfinite(loss):
        return np.inf, np.zeros_like(log_probs)

    beta = np.full((T, S), NEG)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_fwd = np.zeros(S, dtype=bool)
    skip_fwd[:-2] = (ext[:-2] != blank) & (ext[:-2] != ext[2:])
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = np.logaddexp(nxt, np.concatenate((nxt[1:], [NEG])))
        jump = np.concatenate((nxt[2:], [NEG, NEG]))
        beta[t] = np.where(skip_fwd, np.logaddexp(stay, jump), stay) + emit[t]

    # occupancy divided by the emission counted twice, normalized by P
    log_occ = alpha + beta - emit + loss  # -logP == loss
    occ = np.exp(log_occ)

    grad = np.exp(log_probs)  # softmax probabilities
    rows = np.repeat(np.arange(T), S)
    cols = np.tile(ext, T)
    np.subtract.at(grad, (rows, cols), occ.ravel())
    return float(loss), grad


def ctc_loss(logits: Tensor, target) -> Tensor:
    """Negative log-probability of all alignments collapsing to the target,
    with blank id V-1. Targets longer than the frame count admit no
    alignment: the loss is +inf with zero gradient so callers can skip the
    utterance."""
    logits = ad.as_tensor(logits)
    if len(logits.shape) != 2 or logits.shape[1] < 2:
        raise ValueError(f"ctc_loss: need T x V logits with V >= 2, got {logits.shape}")
    T, V = logits.shape
    target = [int(t) for t in target]
    if not target:
        raise ValueError("ctc_loss: empty target")
    if min(target) < 0 or max(target) >= V - 1:
        raise ValueError(f"ctc_loss: target ids must lie in [0, {V - 1}), got {target}")
    if not ctc_feasible(T, target):
        return Tensor(np.inf)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss, grad = _ctc_forward_backward(log_probs, target)
    if not np.isfinite(loss):
        return Tensor(np.inf)
    return Tensor(loss, (logits,), lambda g: ad._acc(logits, g * grad))


KL_PAIR_CAP = 2.0


def kl_diversity_loss(expert_outputs, cap: float = KL_PAIR_CAP) -> Tensor:
    """Negated sum over ordered expert pairs (i != j) of the KL divergence
    between their per-frame feature-axis softmax distributions, averaged
    over frames. Always <= 0; exactly 0 when all experts coincide.

    Each pair's frame-averaged divergence saturates at `cap`: the diversity
    reward is unbounded in the experts' output scale and otherwise runs away
    with the whole objective, while the penalty only needs to act near
    similarity (divergences well below the cap).

    The pair matrix comes from one Gram product: with P_i the flattened
    softmax rows and L_j the flattened log-softmax rows,
    D(i||j) = (sum P_i*L_i - sum P_i*L_j) / T = (M_ii - M_ij) / T.
    """
    outs = [ad.as_tensor(a) for a in expert_outputs]
    if len(outs) < 2:
        return Tensor(0.0)
    shape = outs[0].shape
    for a in outs:
        if a.shape != shape:
            raise ValueError(f"kl_diversity_loss: expert shapes differ: {shape} vs {a.shape}")
    n = len(outs)
    frames = shape[0]
    flat = shape[0] * shape[1]
    p_rows = ad.concat([ad.reshape(ad.softmax(a, axis=1), (1, flat)) for a in outs],
                       axis=0)
    l_rows = ad.concat([ad.reshape(ad.log_softmax(a, axis=1), (1, flat)) for a in outs],
                       axis=0)
    gram = ad.matmul(p_rows, ad.transpose(l_rows))          # M_ij = sum P_i * L_j
    own = ad.tsum(ad.mul(gram, Tensor(np.eye(n))), axis=1)  # M_ii
    own_col = ad.matmul(ad.reshape(own, (n, 1)), Tensor(np.ones((1, n))))
    d = ad.mul(ad.sub(own_col, gram), 1.0 / frames)         # D_ii == 0 exactly
    capped = ad.neg(ad.clamp_min(ad.neg(d), -float(cap)))   # min(D, cap)
    return ad.neg(ad.tsum(capped))


def ce_loss(logits: Tensor, label: int) -> Tensor:
    """Cross entropy of a single class label against rank-1 logits."""
    logits = ad.as_tensor(logits)
    if len(logits.shape) != 1 or logits.shape[0] < 2:
        raise ValueError(f"ce_loss: need rank-1 logits with K >= 2, got {logits.shape}")
    k = logits.shape[0]
    label = int(label)
    if not 0 <= label < k:
        raise ValueError(f"ce_loss: label {label} out of range for {k} classes")
    picked = ad.narrow(ad.log_softmax(logits, axis=0), 0, label, label + 1)
    return ad.neg(ad.reshape(picked, ()))


def mse_routing_loss(r_pred, r_target) -> Tensor:
    """Mean squared error between routing vectors of equal length."""
    r_pred = ad.as_tensor(r_pred)
    r_target = ad.as_tensor(r_target)
    if r_pred.shape != r_target.shape or len(r_pred.shape) != 1:
        raise ValueError(
            f"mse_routing_loss: length mismatch {r_pred.shape} vs {r_target.shape}")
    d = ad.sub(r_pred, r_target)
    return ad.tmean(ad.mul(d, d))


def _require_finite(name: str, value: Tensor) -> Tensor:
    value = ad.as_tensor(value)
    if value.shape != ():
        raise ValueError(f"{name} must be scalar, got shape {value.shape}")
    if not np.isfinite(value.data):
        raise ValueError(f"{name} is not finite")
    return value


def combined_batch_loss(ctc, kl, ce, weights: LossWeights = LossWeights()) -> Tensor:
    """ctc + alpha * kl + beta * ce."""
    ctc = _require_finite("ctc loss", ctc)
    kl = _require_finite("kl loss", kl)
    ce = _require_finite("ce loss", ce)
    return ad.add(ctc, ad.add(ad.mul(kl, weights.alpha), ad.mul(ce, weights.beta)))


def combined_onfly_loss(ctc, kl, ce, mse, weights: LossWeights = LossWeights()) -> Tensor:
    """ctc + alpha * kl + beta * ce + gamma * mse."""
    mse = _require_finite("mse loss", mse)
    return ad.add(combined_batch_loss(ctc, kl, ce, weights), ad.mul(mse, weights.gamma))
