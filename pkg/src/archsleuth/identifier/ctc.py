"""CTC loss, gradient, prefix-search decoding and forced alignment.

Class 0 is the blank; layer kinds occupy classes 1..7 in ``KINDS`` order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..graph import KINDS, LayerKind

BLANK = 0
N_CLASSES = len(KINDS) + 1
NEG_INF = -np.inf
_LOG_FLOOR = -700.0


class CTCError(ValueError):
    pass


def encode(seq: Sequence[LayerKind | str]) -> list[int]:
    return [KINDS.index(LayerKind(k)) + 1 for k in seq]


def decode_labels(labels: Sequence[int]) -> list[LayerKind]:
    return [KINDS[i - 1] for i in labels]


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    """Remove consecutive repeats, then blanks."""
    out, prev = [], None
    for c in path:
        if c != prev and c != blank:
            out.append(int(c))
        prev = c
    return out


def min_frames(target: Sequence[int]) -> int:
    """Shortest input length that can emit ``target`` (repeats need a blank between)."""
    reps = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + reps


def _logsumexp(*xs: np.ndarray) -> np.ndarray:
    m = xs[0]
    for x in xs[1:]:
        m = np.maximum(m, x)
    safe = np.where(np.isfinite(m), m, 0.0)
    acc = sum(np.exp(x - safe) for x in xs)
    with np.errstate(divide="ignore"):
        return np.log(acc) + safe


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


@dataclass
class _Lattice:
    ext: np.ndarray  # (B, S) extended labels, padded with blank
    s_len: np.ndarray  # (B,)
    t_len: np.ndarray  # (B,)
    skip: np.ndarray  # (B, S) s-2 -> s transition allowed
    valid: np.ndarray  # (B, S) state inside the extended target


def _lattice(targets: Sequence[Sequence[int]], t_len: np.ndarray) -> _Lattice:
    b = len(targets)
    s_max = 2 * max((len(z) for z in targets), default=0) + 1
    ext = np.zeros((b, s_max), dtype=np.int64)
    s_len = np.zeros(b, dtype=np.int64)
    for i, z in enumerate(targets):
        if any(not 1 <= c < N_CLASSES for c in z):
            raise CTCError(f"label out of range in target {i}")
        if min_frames(z) > t_len[i]:
            raise CTCError(
                f"target longer than representable: {len(z)} labels need "
                f"{min_frames(z)} frames, have {int(t_len[i])}")
        ext[i, 1:2 * len(z):2] = z
        s_len[i] = 2 * len(z) + 1
    idx = np.arange(s_max)
    valid = idx[None, :] < s_len[:, None]
    skip = np.zeros_like(valid)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    return _Lattice(ext, s_len, t_len.astype(np.int64), skip & valid, valid)


def _emissions(logp: np.ndarray, lat: _Lattice) -> np.ndarray:
    """(T, B, S) log-probability of each lattice state's label per frame."""
    e = np.take_along_axis(logp, lat.ext[:, None, :], axis=2)  # (B, T, S)
    e = np.where(lat.valid[:, None, :], e, NEG_INF)
    return np.transpose(e, (1, 0, 2))


def _forward(em: np.ndarray, lat: _Lattice) -> np.ndarray:
    t_max, b, s = em.shape
    alpha = np.full((t_max, b, s), NEG_INF)
    alpha[0, :, 0] = em[0, :, 0]
    if s > 1:
        alpha[0, :, 1] = em[0, :, 1]
    ninf = np.full((b, 1), NEG_INF)
    ninf2 = np.full((b, 2), NEG_INF)
    for t in range(1, t_max):
        a = alpha[t - 1]
        a1 = np.concatenate([ninf, a[:, :-1]], axis=1)
        a2 = np.where(lat.skip, np.concatenate([ninf2, a[:, :-2]], axis=1)[:, :s], NEG_INF)
        alpha[t] = _logsumexp(a, a1, a2) + em[t]
    return alpha


def _backward(em: np.ndarray, lat: _Lattice) -> np.ndarray:
    """beta[t, s]: log-prob of frames after t given state s at t (emission at t excluded)."""
    t_max, b, s = em.shape
    beta = np.full((t_max, b, s), NEG_INF)
    init = np.full((b, s), NEG_INF)
    rows = np.arange(b)
    init[rows, lat.s_len - 1] = 0.0
    init[rows, np.maximum(lat.s_len - 2, 0)] = 0.0
    ninf = np.full((b, 1), NEG_INF)
    ninf2 = np.full((b, 2), NEG_INF)
    skip_next = np.concatenate([lat.skip[:, 2:], np.zeros((b, 2), bool)], axis=1)[:, :s]
    for t in range(t_max - 1, -1, -1):
        if t < t_max - 1:
            nb = beta[t + 1] + em[t + 1]
            n1 = np.concatenate([nb[:, 1:], ninf], axis=1)
            n2 = np.where(skip_next, np.concatenate([nb[:, 2:], ninf2], axis=1)[:, :s], NEG_INF)
            beta[t] = _logsumexp(nb, n1, n2)
        last = lat.t_len - 1 == t
        beta[t, last] = init[last]
    return beta


def _loglik(alpha: np.ndarray, lat: _Lattice) -> np.ndarray:
    rows = np.arange(len(lat.s_len))
    fin = alpha[lat.t_len - 1, rows]
    last = fin[rows, lat.s_len - 1]
    prev = np.where(lat.s_len >= 2, fin[rows, np.maximum(lat.s_len - 2, 0)], NEG_INF)
    return _logsumexp(last, prev)


def _check_batch(logp: np.ndarray, t_len) -> np.ndarray:
    if logp.ndim != 3 or logp.shape[2] != N_CLASSES:
        raise CTCError(f"expected (B, T, {N_CLASSES}) scores, got {logp.shape}")
    t_len = np.full(logp.shape[0], logp.shape[1]) if t_len is None else np.asarray(t_len)
    if logp.shape[1] == 0 or np.any(t_len < 1) or np.any(t_len > logp.shape[1]):
        raise CTCError("input length must be at least 1 frame")
    return t_len


def ctc_loss(probs: np.ndarray, target: Sequence[int]) -> float:
    """-log P(target | probs) for one (T, C) row-stochastic matrix."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or len(probs) == 0:
        raise CTCError("expected a non-empty (T, C) probability matrix")
    with np.errstate(divide="ignore"):
        logp = np.log(probs)[None]
    return float(ctc_loss_batch(logp, [list(target)])[0])


def ctc_loss_batch(logp: np.ndarray, targets, t_len=None) -> np.ndarray:
    t_len = _check_batch(logp, t_len)
    lat = _lattice(targets, t_len)
    alpha = _forward(_emissions(logp, lat), lat)
    return np.maximum(-_loglik(alpha, lat), 0.0)


def ctc_loss_and_grad(logits: np.ndarray, targets, t_len=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence loss and d(loss)/d(logits) for softmax outputs.

    ``logits`` is (B, T, C); frames at or beyond a sequence's length get
    zero gradient.
    """
    t_len = _check_batch(logits, t_len)
    logp = log_softmax(logits)
    lat = _lattice(targets, t_len)
    em = _emissions(logp, lat)
    alpha = _forward(em, lat)
    beta = _backward(em, lat)
    ll = _loglik(alpha, lat)
    if np.any(~np.isfinite(ll)):
        raise CTCError("target has zero probability under the model")
    occ = np.exp(alpha + beta - ll[None, :, None])  # (T, B, S)
    occ = np.nan_to_num(occ)
    onehot = np.zeros(lat.ext.shape + (N_CLASSES,))
    np.put_along_axis(onehot, lat.ext[..., None], 1.0, axis=2)
    onehot *= lat.valid[..., None]
    post = np.einsum("tbs,bsc->btc", occ, onehot)
    grad = np.exp(logp) - post
    mask = np.arange(logits.shape[1])[None, :] < t_len[:, None]
    grad *= mask[..., None]
    return -ll, grad


# ---------------------------------------------------------------- decoding


def greedy_decode(probs: np.ndarray) -> list[int]:
    return collapse(np.asarray(probs).argmax(axis=1).tolist())


def _safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p), _LOG_FLOOR)


def _scan(log_new: np.ndarray, log_y: np.ndarray) -> np.ndarray:
    """Solve a_t = y_t * (new_t + a_{t-1}), a_0 = 0, in log space for all t.

    Columns are independent recurrences. Returns a with a leading a_0 row.
    """
    c = np.cumsum(log_y, axis=0)
    c_prev = np.vstack([np.zeros((1,) + c.shape[1:]), c[:-1]])
    acc = np.logaddexp.accumulate(log_new - c_prev, axis=0)
    a = c + acc
    return np.vstack([np.full((1,) + a.shape[1:], NEG_INF), a])


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)), clamped at -inf when b >= a."""
    if b >= a or not np.isfinite(a):
        return NEG_INF
    with np.errstate(divide="ignore"):
        return float(a + np.log1p(-np.exp(b - a)))


@dataclass
class _Prefix:
    labels: tuple[int, ...]
    log_n: np.ndarray  # (T+1,) ends in a label after t frames
    log_b: np.ndarray  # (T+1,) ends in blank after t frames
    log_prefix: float  # log P(labels ...)

    @property
    def log_full(self) -> float:
        return float(np.logaddexp(self.log_n[-1], self.log_b[-1]))


def beam_decode(probs: np.ndarray, beam_width: int | None = 8) -> list[int]:
    """Best-first CTC prefix search.

    Prefixes are expanded in order of the probability mass of all labellings
    that start with them; the search ends as soon as the best complete
    labelling found outweighs every prefix still on the frontier. With
    ``beam_width=None`` the frontier is unbounded and the result is the most
    probable collapsed labelling. A finite width keeps only that many
    frontier prefixes.
    """
    if beam_width is not None and beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    probs = np.asarray(probs, dtype=float)
    t_max, n_cls = probs.shape
    if t_max == 0:
        return []
    ly = _safe_log(probs)
    labels = np.arange(1, n_cls)
    blank_b = np.concatenate([[0.0], np.cumsum(ly[:, BLANK])])
    empty = _Prefix((), np.full(t_max + 1, NEG_INF), blank_b, 0.0)
    best = empty
    frontier = [empty]
    while frontier:
        frontier.sort(key=lambda p: -p.log_prefix)
        cur = frontier.pop(0)
        if cur.log_prefix <= best.log_full:
            break
        remaining = cur.log_prefix
        # new_t: mass that can start a fresh label k at frame t.
        prev_b = cur.log_b[:-1]
        prev_n = cur.log_n[:-1]
        new = np.repeat(np.logaddexp(prev_b, prev_n)[:, None], len(labels), axis=1)
        if cur.labels:
            new[:, cur.labels[-1] - 1] = prev_b
        ly_k = ly[:, 1:]
        log_n = _scan(new, ly_k)
        log_b = _scan(log_n[:-1], np.repeat(ly[:, BLANK:BLANK + 1], len(labels), axis=1))
        pref = np.logaddexp.reduce(new + ly_k, axis=0)
        for j in np.argsort(-pref, kind="stable"):
            child = _Prefix(cur.labels + (int(labels[j]),), log_n[:, j], log_b[:, j], float(pref[j]))
            if child.log_full > best.log_full:
                best = child
            if child.log_prefix > best.log_full:
                frontier.append(child)
            remaining = _log_sub(remaining, child.log_prefix)
            if remaining <= best.log_full:
                break
        if beam_width is not None and len(frontier) > beam_width:
            frontier.sort(key=lambda p: -p.log_prefix)
            del frontier[beam_width:]
    return list(best.labels)


# --------------------------------------------------------------- alignment


def viterbi_align(probs: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Most probable frame alignment of ``target``.

    Returns, per frame, the index of the target label it is assigned to.
    Blank frames attach to the preceding label; leading blanks to label 0.
    """
    probs = np.asarray(probs, dtype=float)
    t_max = len(probs)
    if t_max == 0:
        raise CTCError("cannot align an empty input")
    if not len(target):
        raise CTCError("cannot align an empty target")
    lat = _lattice([list(target)], np.array([t_max]))
    with np.errstate(divide="ignore"):
        em = _emissions(np.log(probs)[None], lat)[:, 0, :]
    s = em.shape[1]
    skip = lat.skip[0]
    score = np.full((t_max, s), NEG_INF)
    back = np.zeros((t_max, s), dtype=np.int64)
    score[0, :2] = em[0, :2]
    idx = np.arange(s)
    for t in range(1, t_max):
        prev = score[t - 1]
        c0 = prev
        c1 = np.concatenate([[NEG_INF], prev[:-1]])
        c2 = np.where(skip, np.concatenate([[NEG_INF, NEG_INF], prev[:-2]]), NEG_INF)
        stack = np.vstack([c0, c1, c2])
        arg = stack.argmax(axis=0)
        score[t] = stack[arg, idx] + em[t]
        back[t] = idx - arg
    ends = [s - 1, s - 2]
    end = max(ends, key=lambda e: score[-1, e])
    if not np.isfinite(score[-1, end]):
        raise CTCError("no feasible alignment: target has zero probability")
    states = np.empty(t_max, dtype=np.int64)
    states[-1] = end
    for t in range(t_max - 1, 0, -1):
        states[t - 1] = back[t, states[t]]
    pos = np.empty(t_max, dtype=np.int64)
    cur = 0
    for t, st in enumerate(states):
        if st % 2 == 1:
            cur = st // 2
        pos[t] = cur
    return pos
