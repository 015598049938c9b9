"""Training objectives: CTC, cross-entropy, L1 feature distance, the
least-squares adversarial pair, and the stage composites that mix them.

All losses are scalar tensors on the active tape. CTC carries a hand-derived
backward rule (forward-backward occupancy); everything else is composed from
the primitive ops and differentiates through the tape automatically.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeMismatch,
    Tensor,
    TensorError,
    active_tape,
    add,
    as_tensor,
    log_softmax_last,
    mean_op,
    mul,
    mul_scalar,
    relu,
    square,
    sub,
    sum_op,
)

NEG_INF = -np.inf

# Test hook: "ctc-no-skip" disables the repeated-label skip transition so the
# brute-force oracle in the selftest visibly catches a broken recursion.
_MUTATION = os.environ.get("JEPKD_MUTATE", "")


class TargetError(TensorError):
    """Raised for out-of-vocabulary or out-of-range target tokens."""


@dataclass(frozen=True)
class LsGanConfig:
    """Least-squares adversarial targets: real/fake for D, the generator's
    own target for G."""

    real_target: float = 1.0
    fake_target: float = 0.0
    gen_target: float = 1.0


@dataclass(frozen=True)
class StageLossWeights:
    """Mixing weights for the stage composites; the cross-entropy term takes
    the remaining 1 - ctc_weight - l1_weight mass."""

    ctc_weight: float = 0.3
    l1_weight: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.ctc_weight <= 1.0 and 0.0 <= self.l1_weight <= 1.0):
            raise ValueError(f"stage weights out of [0,1]: {self}")
        if self.ctc_weight + self.l1_weight > 1.0 + 1e-12:
            raise ValueError(f"ctc_weight + l1_weight exceeds 1: {self}")

    @property
    def ce_weight(self) -> float:
        return 1.0 - self.ctc_weight - self.l1_weight


# ---------------------------------------------------------------------------
# CTC


def _logaddexp3(a, b, c=None):
    stack = [a, b] if c is None else [a, b, c]
    arr = np.stack(stack, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        m = arr.max(axis=0)
        safe_m = np.where(np.isneginf(m), 0.0, m)
        out = safe_m + np.log(np.exp(arr - safe_m).sum(axis=0))
    return np.where(np.isneginf(m), NEG_INF, out)


def ctc_feasible(n_frames: int, target: Sequence[int]) -> bool:
    """A target fits in n_frames iff frames cover every label plus one blank
    between each adjacent repeated pair."""
    target = list(target)
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return n_frames >= len(target) + repeats


def _extended_labels(targets: np.ndarray) -> np.ndarray:
    """Blank-interleave each row of (B, U) targets into (B, 2U+1)."""
    b, u = targets.shape
    ext = np.zeros((b, 2 * u + 1), dtype=np.int64)
    ext[:, 1::2] = targets
    return ext


def _ctc_forward_backward(log_probs: np.ndarray, targets: np.ndarray):
    """Vectorized log-space forward/backward over a same-length target batch.

    log_probs: (B, T, K) with blank at index 0; targets: (B, U) with labels
    in 1..K-1. Returns (per-sample -log P, gradient w.r.t. log_probs,
    feasible mask). Infeasible rows get +inf loss and zero gradient.
    """
    b, t_len, k = log_probs.shape
    u = targets.shape[1]
    ext = _extended_labels(targets)
    s_len = ext.shape[1]

    repeats = (targets[:, 1:] == targets[:, :-1]).sum(axis=1) if u > 1 else np.zeros(b, dtype=np.int64)
    feasible = t_len >= u + repeats

    # skip transition allowed where the extended label differs from the one
    # two slots back and is not blank
    can_skip = np.zeros((b, s_len), dtype=bool)
    if s_len > 2:
        can_skip[:, 2:] = (ext[:, 2:] != 0) & (ext[:, 2:] != ext[:, :-2])
    if _MUTATION == "ctc-no-skip":
        can_skip[:] = False

    # gather emissions per (t, s): emits[b, t, s] = log_probs[b, t, ext[b, s]]
    emits = log_probs[np.arange(b)[:, None, None],
                      np.arange(t_len)[None, :, None],
                      ext[:, None, :]]

    alpha = np.full((t_len, b, s_len), NEG_INF)
    alpha[0, :, 0] = emits[:, 0, 0]
    if s_len > 1:
        alpha[0, :, 1] = emits[:, 0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        shift1 = np.full_like(prev, NEG_INF)
        shift1[:, 1:] = prev[:, :-1]
        shift2 = np.full_like(prev, NEG_INF)
        shift2[:, 2:] = prev[:, :-2]
        shift2 = np.where(can_skip, shift2, NEG_INF)
        alpha[t] = _logaddexp3(prev, shift1, shift2) + emits[:, t, :]

    tail = alpha[t_len - 1, :, s_len - 1]
    if s_len > 1:
        tail = _logaddexp3(tail, alpha[t_len - 1, :, s_len - 2])
    log_p = np.where(feasible, tail, NEG_INF)
    losses = np.where(feasible, -log_p, np.inf)

    beta = np.full((t_len, b, s_len), NEG_INF)
    beta[t_len - 1, :, s_len - 1] = emits[:, t_len - 1, s_len - 1]
    if s_len > 1:
        beta[t_len - 1, :, s_len - 2] = emits[:, t_len - 1, s_len - 2]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        shift1 = np.full_like(nxt, NEG_INF)
        shift1[:, :-1] = nxt[:, 1:]
        shift2 = np.full_like(nxt, NEG_INF)
        if s_len > 2:
            shift2[:, :-2] = np.where(can_skip[:, 2:], nxt[:, 2:], NEG_INF)
        beta[t] = _logaddexp3(nxt, shift1, shift2) + emits[:, t, :]

    grad = np.zeros_like(log_probs)
    if feasible.any():
        with np.errstate(invalid="ignore"):
            # occupancy of state s at time t: alpha + beta double-counts the
            # emission, and normalizing by log P turns it into a posterior
            post = np.exp(
                np.transpose(alpha + beta, (1, 0, 2))
                - emits
                - log_p[:, None, None]
            )
        post = np.where(np.isfinite(post), post, 0.0)
        for s in range(s_len):
            np.add.at(
                grad,
                (np.arange(b)[:, None], np.arange(t_len)[None, :], ext[:, s][:, None]),
                post[:, :, s],
            )
        grad = -grad
        grad[~feasible] = 0.0
    return losses, grad, feasible


def _check_log_probs(values: np.ndarray, k: int):
    m = values.max(axis=-1, keepdims=True)
    mass = m[..., 0] + np.log(np.exp(values - m).sum(axis=-1))
    if np.abs(mass).max() > 1e-3:
        raise ShapeMismatch(
            "ctc_loss expects normalized log-probabilities per frame "
            f"(worst log-mass {np.abs(mass).max():.2e})"
        )


def _check_targets(targets: np.ndarray, k: int):
    if targets.size and (targets.min() < 1 or targets.max() > k - 1):
        raise TargetError(
            f"target tokens must lie in 1..{k - 1}, got range "
            f"[{targets.min()}, {targets.max()}]"
        )


def ctc_loss_batch(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean CTC negative log-likelihood over the feasible rows of a batch.

    log_probs: (B, T, K) tensor of per-frame log-probabilities (blank = 0);
    targets: (B, U) int array, one shared target length per batch. Rows whose
    target cannot fit in T frames are excluded from the mean; if no row is
    feasible the loss is +inf and ``meta['infeasible']`` is set.
    """
    log_probs = as_tensor(log_probs)
    if log_probs.values.ndim != 3:
        raise ShapeMismatch(f"ctc_loss_batch wants (B, T, K), got {log_probs.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 2 or targets.shape[0] != log_probs.shape[0]:
        raise ShapeMismatch(
            f"targets {targets.shape} do not match batch of {log_probs.shape[0]}"
        )
    k = log_probs.shape[-1]
    _check_targets(targets, k)
    _check_log_probs(log_probs.values, k)

    losses, grad, feasible = _ctc_forward_backward(log_probs.values, targets)
    n_ok = int(feasible.sum())
    if n_ok == 0:
        out = Tensor(np.inf, _allow_nonfinite=True)
        out.meta = {"infeasible": True, "n_infeasible": len(losses)}
        return out
    value = losses[feasible].mean()

    def backward_fn(g):
        return (float(g) * grad / n_ok,)

    out = Tensor(value)
    tape = active_tape()
    if tape is not None and log_probs.grad_enabled:
        out.grad_enabled = True
        tape._record("ctc", (log_probs,), out, backward_fn,
                     lambda: np.asarray(_ctc_forward_backward(log_probs.values, targets)[0][feasible].mean()))
    if n_ok < len(losses):
        out.meta = {"n_infeasible": len(losses) - n_ok}
    return out


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """-log P(target | log_probs) by the log-space forward algorithm over the
    blank-interleaved label sequence. Infeasible targets give +inf with
    ``meta['infeasible']`` instead of an error so batch code can skip them.
    """
    log_probs = as_tensor(log_probs)
    if log_probs.values.ndim != 2:
        raise ShapeMismatch(f"ctc_loss wants (T, K) log-probs, got {log_probs.shape}")
    target = np.asarray(list(target), dtype=np.int64).reshape(1, -1)
    _check_targets(target, log_probs.shape[-1])
    if not ctc_feasible(log_probs.shape[0], target[0]):
        out = Tensor(np.inf, _allow_nonfinite=True)
        out.meta = {"infeasible": True}
        return out
    _check_log_probs(log_probs.values, log_probs.shape[-1])
    losses, grad, _ = _ctc_forward_backward(log_probs.values[None], target)
    value = losses[0]

    def backward_fn(g):
        return (float(g) * grad[0],)

    out = Tensor(value)
    tape = active_tape()
    if tape is not None and log_probs.grad_enabled:
        out.grad_enabled = True
        tape._record("ctc", (log_probs,), out, backward_fn,
                     lambda: np.asarray(_ctc_forward_backward(log_probs.values[None], target)[0][0]))
    return out


# ---------------------------------------------------------------------------
# cross-entropy


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over positions of -log softmax(logits)[target].

    logits: (U, V) or batched (B, U, V); targets: matching int index array
    with values in 0..V-1.
    """
    logits = as_tensor(logits)
    if logits.values.ndim not in (2, 3):
        raise ShapeMismatch(f"cross_entropy wants (U, V) or (B, U, V), got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"targets {t.shape} do not match logits {logits.shape}")
    v = logits.shape[-1]
    if t.size == 0:
        raise ShapeMismatch("cross_entropy of zero positions")
    if t.min() < 0 or t.max() >= v:
        raise TargetError(f"target index out of range 0..{v - 1}: [{t.min()}, {t.max()}]")
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    picked = sum_op(mul(log_softmax_last(logits), Tensor(onehot)))
    return mul_scalar(picked, -1.0 / t.size)


# ---------------------------------------------------------------------------
# feature distance


def l1_distance(g: Tensor, a: Tensor) -> Tensor:
    """Mean absolute difference over all entries (|x| = relu(x) + relu(-x))."""
    g, a = as_tensor(g), as_tensor(a)
    if g.shape != a.shape:
        raise ShapeMismatch(f"l1_distance: shapes differ {g.shape} vs {a.shape}")
    diff = sub(g, a)
    return mean_op(add(relu(diff), relu(mul_scalar(diff, -1.0))))


# ---------------------------------------------------------------------------
# least-squares adversarial pair


def lsgan_d_loss(d_real: Tensor, d_fake: Tensor, cfg: LsGanConfig = LsGanConfig()) -> Tensor:
    """0.5 * mean((d_real - real_target)^2) + 0.5 * mean((d_fake - fake_target)^2)."""
    d_real, d_fake = as_tensor(d_real), as_tensor(d_fake)
    if d_real.size == 0 or d_fake.size == 0:
        raise ShapeMismatch("lsgan_d_loss: empty discriminator outputs")
    real_term = mean_op(square(sub(d_real, Tensor(cfg.real_target))))
    fake_term = mean_op(square(sub(d_fake, Tensor(cfg.fake_target))))
    return add(mul_scalar(real_term, 0.5), mul_scalar(fake_term, 0.5))


def lsgan_g_loss(d_fake: Tensor, l1_term: Tensor, cfg: LsGanConfig = LsGanConfig()) -> Tensor:
    """0.5 * mean((d_fake - gen_target)^2) + l1_term."""
    d_fake = as_tensor(d_fake)
    if d_fake.size == 0:
        raise ShapeMismatch("lsgan_g_loss: empty discriminator outputs")
    adv = mul_scalar(mean_op(square(sub(d_fake, Tensor(cfg.gen_target)))), 0.5)
    return add(adv, as_tensor(l1_term))


# ---------------------------------------------------------------------------
# stage composites


def stage1_loss(ctc: Tensor, l1: Tensor, ce: Tensor, w: StageLossWeights) -> Tensor:
    """Warm-up composite: ctc_weight*CTC + l1_weight*L1 + remainder*CE."""
    return add(
        add(mul_scalar(as_tensor(ctc), w.ctc_weight), mul_scalar(as_tensor(l1), w.l1_weight)),
        mul_scalar(as_tensor(ce), w.ce_weight),
    )


def stage3_loss(ctc: Tensor, ce: Tensor, w: StageLossWeights) -> Tensor:
    """Refinement composite: ctc_weight*CTC + (1 - ctc_weight)*CE."""
    return add(
        mul_scalar(as_tensor(ctc), w.ctc_weight),
        mul_scalar(as_tensor(ce), 1.0 - w.ctc_weight),
    )
