"""CTC loss over blank-interleaved label sequences, plus greedy decoding.

The loss marginalizes over every monotonic frame-to-label alignment with
the usual dynamic program over the extended sequence
(blank, y1, blank, y2, ..., yL, blank), entirely in log space. Gradients
come from the forward/backward state posteriors, so the whole loss is a
single tape operation differentiable with respect to the input
log-probabilities.

Token id 0 is reserved for the blank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, custom_op

BLANK_ID = 0
NEG_INF = -np.inf


@dataclass(frozen=True)
class CTCTarget:
    tokens: tuple[int, ...]

    def __post_init__(self):
        for tok in self.tokens:
            if tok == BLANK_ID:
                raise ValueError("targets may not contain the blank id")
            if tok < 0:
                raise ValueError("token ids must be nonnegative")

    def __len__(self):
        return len(self.tokens)

    @property
    def min_frames(self) -> int:
        """Shortest feasible alignment: one frame per token plus one blank
        frame between adjacent repeats."""
        repeats = sum(a == b for a, b in zip(self.tokens, self.tokens[1:]))
        return len(self.tokens) + repeats


def _as_targets(targets) -> list[CTCTarget]:
    return [t if isinstance(t, CTCTarget) else CTCTarget(tuple(t))
            for t in targets]


def _extended(target: CTCTarget) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target.tokens
    return ext


def ctc_losses(log_probs: Tensor, targets: Sequence,
               frame_lengths) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-item negative alignment log-probabilities.

    Returns (loss Tensor [batch], loss values, infeasible flags). An item
    whose frame budget cannot fit its target yields +inf loss and a raised
    flag rather than an exception; its gradient contribution is zero.
    """
    batch, total_time, vocab = log_probs.shape
    tgt = _as_targets(targets)
    if len(tgt) != batch:
        raise ValueError(f"{len(tgt)} targets for batch of {batch}")
    lens = np.asarray(frame_lengths, dtype=np.int64)
    if lens.shape != (batch,):
        raise ValueError("frame_lengths must have one entry per item")
    if np.any(lens < 1) or np.any(lens > total_time):
        raise ValueError("frame_lengths must lie in [1, time]")
    for t in tgt:
        if t.tokens and max(t.tokens) >= vocab:
            raise ValueError("target token id outside vocabulary")

    smax = max(2 * len(t) + 1 for t in tgt)
    slen = np.array([2 * len(t) + 1 for t in tgt])
    ext = np.zeros((batch, smax), dtype=np.int64)
    svalid = np.arange(smax)[None, :] < slen[:, None]
    for i, t in enumerate(tgt):
        ext[i, :slen[i]] = _extended(t)
    infeasible = np.array([t.min_frames > lens[i] for i, t in enumerate(tgt)])

    lp = log_probs.values
    items = np.arange(batch)
    # emission log-prob of each extended state at each frame: [B, T, S]
    emit = lp[items[:, None, None], np.arange(total_time)[None, :, None],
              ext[:, None, :]]

    # the skip transition s-2 -> s is allowed into a label state that
    # differs from the label two states back
    skip_ok = np.zeros((batch, smax), dtype=bool)
    skip_ok[:, 2:] = (ext[:, 2:] != BLANK_ID) & (ext[:, 2:] != ext[:, :-2])
    skip_ok &= svalid

    def shift_up(a, by):
        out = np.full_like(a, NEG_INF)
        out[:, by:] = a[:, :-by]
        return out

    # forward pass; alpha[t, s] includes the emission at frame t, and rows
    # freeze once an item's frames run out so alphas[-1] holds every
    # item's final-frame values
    alphas = np.full((total_time, batch, smax), NEG_INF)
    a0 = np.full((batch, smax), NEG_INF)
    a0[:, 0] = emit[:, 0, 0]
    has_label = slen > 1
    a0[has_label, 1] = emit[has_label, 0, 1]
    alphas[0] = a0
    for t in range(1, total_time):
        prev = alphas[t - 1]
        cand = np.logaddexp(prev, shift_up(prev, 1))
        cand = np.where(skip_ok, np.logaddexp(cand, shift_up(prev, 2)), cand)
        a_t = np.where(svalid, cand + emit[:, t, :], NEG_INF)
        alphas[t] = np.where((t < lens)[:, None], a_t, prev)

    final = alphas[-1]
    end_main = final[items, slen - 1]
    end_alt = np.where(slen >= 2, final[items, np.maximum(slen - 2, 0)],
                       NEG_INF)
    log_total = np.logaddexp(end_main, end_alt)
    per_item = np.where(infeasible, np.inf, -log_total)

    # end-state initialization of the backward variable (emission at the
    # current frame excluded): 0 at the last two states
    fresh = np.full((batch, smax), NEG_INF)
    fresh[items, slen - 1] = 0.0
    idx2 = np.maximum(slen - 2, 0)
    fresh[items, idx2] = np.where(slen >= 2, 0.0, fresh[items, idx2])

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        scale = np.where(np.isfinite(log_total) & ~infeasible, g, 0.0)
        grad = np.zeros_like(lp)
        beta = fresh.copy()
        frame_of = np.empty((batch, smax), dtype=np.int64)
        for t in range(total_time - 1, -1, -1):
            # state posterior at frame t; alpha counts the emission, beta
            # does not, so their sum counts it exactly once
            with np.errstate(invalid="ignore"):
                w = np.exp(alphas[t] + beta - log_total[:, None])
            w = np.where(svalid & (t < lens)[:, None], w, 0.0)
            w *= -scale[:, None]
            frame_of.fill(t)
            np.add.at(grad, (items[:, None], frame_of, ext), w)
            if t == 0:
                break
            # roll back: beta[t-1](s) = logsumexp over s' in {s, s+1, s+2}
            # of emit[t](s') + beta[t](s'), skip transitions permitting
            b_emit = np.where(svalid, beta + emit[:, t, :], NEG_INF)

            def shift_down(a, by):
                out = np.full_like(a, NEG_INF)
                out[:, :-by] = a[:, by:]
                return out

            nxt = np.logaddexp(b_emit, shift_down(b_emit, 1))
            nxt = np.logaddexp(
                nxt, shift_down(np.where(skip_ok, b_emit, NEG_INF), 2))
            # an item whose last frame is at or beyond t-1 keeps the
            # end-state initialization until its recurrence region starts
            beta = np.where((t >= lens)[:, None], fresh, nxt)
        return (grad,)

    out = custom_op("ctc", (log_probs,), per_item, backward)
    return out, per_item.copy(), infeasible


def ctc_loss(log_probs: Tensor, targets: Sequence, frame_lengths) -> Tensor:
    """Batch-mean CTC loss.

    Per-item losses are summed in sorted order, which makes the reduction
    bitwise invariant to batch permutations.
    """
    per_item, values, _ = ctc_losses(log_probs, targets, frame_lengths)
    batch = values.shape[0]
    total = 0.0
    for i in np.argsort(values, kind="stable"):
        total += values[i]
    loss_value = np.asarray(total / batch)

    def backward(g):
        return (np.full(batch, float(g) / batch),)

    return custom_op("ctc_mean", (per_item,), loss_value, backward)


def ctc_greedy_decode(log_probs, frame_lengths) -> list[list[int]]:
    """Frame-wise argmax, collapse repeats, drop blanks."""
    lp = log_probs.values if isinstance(log_probs, Tensor) \
        else np.asarray(log_probs)
    lens = np.asarray(frame_lengths, dtype=np.int64)
    best = lp.argmax(axis=2)
    decoded: list[list[int]] = []
    for i in range(lp.shape[0]):
        seq: list[int] = []
        prev = -1
        for t in range(lens[i]):
            tok = int(best[i, t])
            if tok != prev and tok != BLANK_ID:
                seq.append(tok)
            prev = tok
        decoded.append(seq)
    return decoded
