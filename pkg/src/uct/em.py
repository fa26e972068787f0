"""Hard stepwise EM for the emission channel.

Decoding runs over the cascade LM o channel o acceptor(x).  Besides the
generic route through :func:`uct.fst.compose`, this module has a direct
dynamic program over lattice layers (source position j, delay, LM state)
which visits exactly the same paths; the generic route is kept for small
inputs and as a cross-check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .channel import ChannelFst, EmissionParams, OpCounts, PriorSpec, build_channel, map_update, prior_mean
from .fst import EPS, INF, Wfst, acceptor, compose, shortest_path

logger = logging.getLogger(__name__)


class DecodeError(RuntimeError):
    pass


class LmArrays:
    """Array view of an acceptor for vectorized lattice search.

    Non-epsilon arcs go to ``src/dst/lab/w``.  Epsilon arcs are grouped by
    the length of the longest epsilon path reaching their source state, so
    relaxing the groups in order settles the epsilon closure of a layer.
    """

    def __init__(self, lm: Wfst):
        self.num_states = Q = lm.num_states
        self.start = lm.start
        self.final = np.full(Q, np.inf)
        for q, w in lm.finals.items():
            self.final[q] = w
        src, dst, lab, w = [], [], [], []
        eps = []
        for q, arcs in enumerate(lm.arcs):
            for i, a in enumerate(arcs):
                if a.weight == INF:
                    continue
                if a.ilabel == EPS:
                    eps.append((q, a.nextstate, a.weight))
                else:
                    src.append(q), dst.append(a.nextstate), lab.append(a.ilabel), w.append(a.weight)
        self.src = np.array(src, dtype=np.int64)
        self.dst = np.array(dst, dtype=np.int64)
        self.lab = np.array(lab, dtype=np.int64)
        self.w = np.array(w, dtype=np.float64)
        self.eps_groups = self._group_eps(Q, eps)

    @staticmethod
    def _group_eps(Q: int, eps: list) -> list:
        if not eps:
            return []
        indeg = [0] * Q
        out: list[list[int]] = [[] for _ in range(Q)]
        for k, (u, v, _) in enumerate(eps):
            indeg[v] += 1
            out[u].append(k)
        level = [0] * Q
        frontier = [q for q in range(Q) if indeg[q] == 0]
        seen = 0
        while frontier:
            nxt = []
            for u in frontier:
                seen += 1
                for k in out[u]:
                    v = eps[k][1]
                    level[v] = max(level[v], level[u] + 1)
                    indeg[v] -= 1
                    if indeg[v] == 0:
                        nxt.append(v)
            frontier = nxt
        if seen != Q:
            raise DecodeError("epsilon arcs of the language model form a cycle")
        groups: dict[int, list[int]] = {}
        for k, (u, _, _) in enumerate(eps):
            groups.setdefault(level[u], []).append(k)
        result = []
        for lv in sorted(groups):
            ks = groups[lv]
            result.append((
                np.array(ks, dtype=np.int64),
                np.array([eps[k][0] for k in ks], dtype=np.int64),
                np.array([eps[k][1] for k in ks], dtype=np.int64),
                np.array([eps[k][2] for k in ks], dtype=np.float64),
            ))
        return result


_CACHE: dict[int, tuple] = {}


def lm_arrays(lm: Wfst) -> LmArrays:
    """Cached :class:`LmArrays` for a (treated as immutable) acceptor."""
    hit = _CACHE.get(id(lm))
    if hit is not None and hit[0] is lm:
        return hit[1]
    arrays = LmArrays(lm)
    _CACHE[id(lm)] = (lm, arrays)
    return arrays


# Backpointer kinds.
_START, _EPS, _SUB, _DEL, _INS = 0, 1, 2, 3, 4


def _relax(vals, kinds, idxs, dst, cand, kind, src_idx):
    """Min-scatter ``cand`` into ``vals[dst]`` and record the winning source."""
    best = np.full(vals.shape, np.inf)
    np.minimum.at(best, dst, cand)
    better = best < vals
    if not better.any():
        return
    hit = (cand == best[dst]) & better[dst]
    win = np.zeros(vals.shape, dtype=np.int64)
    win[dst[hit]] = src_idx[hit]
    vals[better] = best[better]
    kinds[better] = kind
    idxs[better] = win[better]


def cascade_viterbi(x: Sequence[int], lm: Wfst, params: EmissionParams, delay: int):
    """Best path through LM o channel o acceptor(x).

    Returns (weight, target ids).  Raises :class:`DecodeError` when no path
    satisfies the delay bound.
    """
    A = lm_arrays(lm)
    Q = A.num_states
    J = len(x)
    d = delay
    sub_w = params.sub_weights()
    ins_w = params.ins_weights()
    del_w = sub_w[:, 0]
    W = 2 * d + 1
    vals = np.full((J + 1, W, Q), np.inf)
    kinds = np.zeros((J + 1, W, Q), dtype=np.int8)
    idxs = np.zeros((J + 1, W, Q), dtype=np.int64)
    vals[0, d, A.start] = 0.0
    arc_ids = np.arange(len(A.src))
    states = np.arange(Q)
    lm_del = A.w + del_w[A.lab] if d > 0 else None
    for j in range(J + 1):
        lm_sub = A.w + sub_w[A.lab, x[j]] if j < J else None
        for r in range(W - 1, -1, -1):  # delay r - d, descending
            V = vals[j, r]
            if not np.isfinite(V).any():
                continue
            K, I = kinds[j, r], idxs[j, r]
            for ks, es, ed, ew in A.eps_groups:
                _relax(V, K, I, ed, V[es] + ew, _EPS, ks)
            from_src = V[A.src]
            if r > 0:
                _relax(vals[j, r - 1], kinds[j, r - 1], idxs[j, r - 1],
                       A.dst, from_src + lm_del, _DEL, arc_ids)
            if j < J:
                _relax(vals[j + 1, r], kinds[j + 1, r], idxs[j + 1, r],
                       A.dst, from_src + lm_sub, _SUB, arc_ids)
                if r < W - 1:
                    _relax(vals[j + 1, r + 1], kinds[j + 1, r + 1], idxs[j + 1, r + 1],
                           states, V + ins_w[x[j]], _INS, states)
    totals = vals[J] + A.final[None, :]
    flat = int(np.argmin(totals))
    best = float(totals.flat[flat])
    if not math.isfinite(best):
        raise DecodeError("empty lattice: no path satisfies the delay bound")
    r, q = divmod(flat, Q)
    j = J
    out = []
    eps_src = {}
    for ks, es, _, _ in A.eps_groups:
        for k, u in zip(ks.tolist(), es.tolist()):
            eps_src[k] = u
    while True:
        kind = kinds[j, r, q]
        i = int(idxs[j, r, q])
        if kind == _START:
            break
        if kind == _EPS:
            q = eps_src[i]
        elif kind == _SUB:
            out.append(int(A.lab[i]))
            q = int(A.src[i])
            j -= 1
        elif kind == _DEL:
            out.append(int(A.lab[i]))
            q = int(A.src[i])
            r += 1
        else:  # insertion keeps the LM state
            j -= 1
            r -= 1
    out.reverse()
    return best, out


def decode_best(x: Sequence[int], lm: Wfst, channel: Wfst, generic: bool = False) -> list[int]:
    """Most probable target ids for source ids ``x`` under LM and channel.

    Channels built by :func:`uct.channel.build_channel` use the layered
    search; other transducers (or ``generic=True``) go through explicit
    composition and shortest path.
    """
    if isinstance(channel, ChannelFst) and not generic:
        try:
            return cascade_viterbi(x, lm, channel.params, channel.delay)[1]
        except DecodeError as e:
            raise DecodeError(f"{e} (source ids {list(x)})") from None
    lattice = compose(lm, compose(channel, acceptor(list(x), channel.output_size)))
    path = shortest_path(lattice)
    if path is None:
        raise DecodeError(f"empty lattice: no path satisfies the delay bound (source ids {list(x)})")
    return list(path.input)


def _grid_moves(y, x, sub_w, ins_w, d):
    """Yield (i, j, ni, nj, weight, op) for every move of the alignment grid."""
    I, J = len(y), len(x)
    for i in range(I + 1):
        for j in range(max(0, i - d), min(J, i + d) + 1):
            if i < I and j < J:
                yield i, j, i + 1, j + 1, sub_w[y[i], x[j]], ("sub", i, j)
            if i < I and j - (i + 1) >= -d:
                yield i, j, i + 1, j, sub_w[y[i], 0], ("del", i, j)
            if j < J and (j + 1) - i <= d:
                yield i, j, i, j + 1, ins_w[x[j]], ("ins", i, j)


def _logadd(a: float, b: float) -> float:
    if a == INF:
        return b
    if b == INF:
        return a
    m = min(a, b)
    return m - math.log1p(math.exp(-abs(a - b)))


def alignment_lattice(y: Sequence[int], x: Sequence[int], params: EmissionParams, delay: int):
    """Forward and backward neg-log weights over the (i, j) alignment grid."""
    sub_w = params.sub_weights()
    ins_w = params.ins_weights()
    I, J = len(y), len(x)
    moves = list(_grid_moves(y, x, sub_w, ins_w, delay))
    alpha = np.full((I + 1, J + 1), np.inf)
    alpha[0, 0] = 0.0
    # Moves come out in (i, j) order, which is topological for the grid.
    for i, j, ni, nj, w, _ in moves:
        if alpha[i, j] != INF:
            alpha[ni, nj] = _logadd(alpha[ni, nj], alpha[i, j] + w)
    beta = np.full((I + 1, J + 1), np.inf)
    if abs(I - J) <= delay:
        beta[I, J] = 0.0
    for i, j, ni, nj, w, _ in reversed(moves):
        if beta[ni, nj] != INF:
            beta[i, j] = _logadd(beta[i, j], w + beta[ni, nj])
    return alpha, beta, moves


def pair_weight(y: Sequence[int], x: Sequence[int], channel: ChannelFst) -> float:
    """-log P(x | y) summed over bounded-delay alignments (inf if none)."""
    alpha, _, _ = alignment_lattice(y, x, channel.params, channel.delay)
    if abs(len(y) - len(x)) > channel.delay:
        return INF
    return float(alpha[len(y), len(x)])


def expected_counts(y: Sequence[int], x: Sequence[int], channel: ChannelFst) -> OpCounts:
    """Posterior expected operation counts for the pair (target y, source x)."""
    params = channel.params
    alpha, beta, moves = alignment_lattice(y, x, params, channel.delay)
    z = alpha[len(y), len(x)] if abs(len(y) - len(x)) <= channel.delay else INF
    if z == INF:
        raise DecodeError(f"pair has no bounded-delay alignment (|y|={len(y)}, |x|={len(x)})")
    counts = OpCounts.zeros(params.target_size, params.source_size)
    for i, j, ni, nj, w, (op, _, _) in moves:
        lw = alpha[i, j] + w + beta[ni, nj]
        if lw == INF:
            continue
        post = math.exp(z - lw)
        if op == "sub":
            counts.emit[y[i], x[j]] += post
            counts.mix[1] += post
        elif op == "del":
            counts.emit[y[i], 0] += post
            counts.mix[1] += post
        else:
            counts.ins[x[j]] += post
            counts.mix[0] += post
    return counts


@dataclass
class EmState:
    params: EmissionParams
    prior: PriorSpec
    delay: int
    stats: Optional[OpCounts] = None
    step: int = 0
    stepsize_exponent: float = 0.9
    batch_size: int = 10
    seed: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, prior: PriorSpec, target_size: int, source_size: int, delay: int,
                **kwargs) -> "EmState":
        return cls(params=prior_mean(prior, target_size, source_size), prior=prior,
                   delay=delay, **kwargs)

    def stepsize(self, k: Optional[int] = None) -> float:
        k = self.step if k is None else k
        return (k + 2) ** (-self.stepsize_exponent)

    @property
    def channel(self) -> ChannelFst:
        return build_channel(self.params, self.delay)


def em_epoch(state: EmState, train_x: list[Sequence[int]], lm: Wfst,
             stepsize: Optional[float] = None, shuffle: bool = True) -> EmState:
    """One pass of hard stepwise EM over ``train_x``.

    Per minibatch: decode each sequence with the current channel, collect
    posterior alignment counts against that decoding, blend them into the
    running statistics with stepsize (k+2)^-alpha (or a fixed ``stepsize``),
    and re-estimate the parameters.  Sequences that fail to decode are
    skipped with a warning.
    """
    n = len(train_x)
    order = list(range(n))
    if shuffle:
        np.random.default_rng(state.seed + state.epoch).shuffle(order)
    T, S = state.params.emit.shape
    stats = state.stats if state.stats is not None else OpCounts.zeros(T, S)
    params = state.params
    step = state.step
    loglik = 0.0
    for b in range(0, n, state.batch_size):
        batch = order[b:b + state.batch_size]
        channel = build_channel(params, state.delay)
        counts = OpCounts.zeros(T, S)
        for idx in batch:
            x = train_x[idx]
            try:
                score, y = cascade_viterbi(x, lm, params, state.delay)
                counts = counts + expected_counts(y, x, channel)
            except DecodeError as e:
                logger.warning("skipping training sequence %d: %s", idx, e)
                continue
            loglik += score
        eta = stepsize if stepsize is not None else (step + 2) ** (-state.stepsize_exponent)
        stats = stats.scale(1.0 - eta) + counts.scale(eta * n / len(batch))
        params = map_update(stats, state.prior)
        step += 1
    history = state.history + [loglik]
    return EmState(params=params, prior=state.prior, delay=state.delay, stats=stats, step=step,
                   stepsize_exponent=state.stepsize_exponent, batch_size=state.batch_size,
                   seed=state.seed, epoch=state.epoch + 1, history=history)


def shortest_sequences(seqs: list[Sequence[int]], n: int) -> list[int]:
    """Indices of the ``n`` shortest sequences (stable on ties)."""
    order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
    return order[:n]


def train_wfst(train_x: list[Sequence[int]], lm: Wfst, prior: PriorSpec, target_size: int,
               source_size: int, delay: int = 2, epochs: int = 20, patience: int = 3,
               n_shortest: Optional[int] = 1000, stepsize_exponent: float = 0.9,
               batch_size: int = 10, seed: int = 0, callback=None) -> EmState:
    """Run hard stepwise EM until the epoch budget or argmax convergence.

    Training stops early once the per-row argmax of the emission matrix has
    not changed for ``patience`` consecutive epochs.
    """
    if n_shortest is not None:
        train_x = [train_x[i] for i in shortest_sequences(train_x, n_shortest)]
    state = EmState.initial(prior, target_size, source_size, delay,
                            stepsize_exponent=stepsize_exponent, batch_size=batch_size, seed=seed)
    previous = state.params.argmax_rows()
    unchanged = 0
    for _ in range(epochs):
        state = em_epoch(state, train_x, lm)
        current = state.params.argmax_rows()
        unchanged = unchanged + 1 if np.array_equal(current, previous) else 0
        previous = current
        logger.info("EM epoch %d: decoded weight %.3f", state.epoch, state.history[-1])
        if callback is not None:
            callback(state)
        if unchanged >= patience:
            break
    return state
