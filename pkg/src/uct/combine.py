"""Decoding-time combinations of the WFST cascade and the seq2seq model.

Two schemes: n-best reranking (one model proposes, the other rescores) and
a product-of-experts beam search that walks LM o channel while consuming the
source sentence and adds the neural next-character cost to every arc that
emits a target character.

Orientation: LM o channel reads target characters and writes source
characters, so during decoding an arc's *output* label is matched against
the source sentence and its *input* label (if not epsilon) extends the
target hypothesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import ChannelFst
from .em import DecodeError, pair_weight
from .fst import EPS, INF, LOG, TROPICAL, ComposeView, Wfst, acceptor, compose, n_shortest_paths, \
    shortest_distance, total_weight

# Scorer: target prefix -> log-probabilities over target alphabet ids, index 0 = EOS.
Scorer = Callable[[tuple], np.ndarray]


class CombineError(RuntimeError):
    pass


@dataclass
class Hypothesis:
    s: tuple            # lattice state
    k: int              # source characters consumed
    y: tuple            # target prefix
    score: float        # accumulated -log (arcs + neural terms)
    back: Optional[tuple] = None  # (parent, arc weight, neural term)


@dataclass
class Candidate:
    y: tuple
    generator_score: float
    rescorer_score: float = INF

    @property
    def reachable(self) -> bool:
        return self.rescorer_score != INF


# -- neural scorers ----------------------------------------------------------

class NeuralScorer:
    """Prefix-cached next-character distributions from a :class:`uct.neural.Seq2SeqModel`."""

    def __init__(self, model, x: Sequence[int], direction):
        self._states = {(): model.start(list(x), direction)}
        self._rows: dict[tuple, np.ndarray] = {}
        self.calls = 0

    def _state(self, prefix: tuple):
        st = self._states.get(prefix)
        if st is None:
            st = self._states[prefix] = self._state(prefix[:-1]).extend(prefix[-1])
        return st

    def __call__(self, prefix: tuple) -> np.ndarray:
        self.calls += 1
        row = self._rows.get(prefix)
        if row is None:
            row = self._rows[prefix] = self._state(tuple(prefix)).logprobs()
        return row


def uniform_scorer(size: int) -> Scorer:
    """Scorer assigning every target id (and EOS) the same probability."""
    table = np.full(size, -math.log(size))
    return lambda prefix: table


# -- product of experts ------------------------------------------------------

def _closure(group: dict, view: ComposeView, scorer: Scorer, k: int,
             threshold: Optional[float] = None) -> None:
    """Expand non-consuming arcs until no hypothesis in ``group`` improves.

    With ``threshold``, extensions costing more than the group's best entry
    score plus ``threshold`` are dropped (costs never decrease along a path).
    """
    work = sorted(group.values(), key=lambda h: (h.score, h.y))
    limit = INF if threshold is None or not work else work[0].score + threshold
    while work:
        h = work.pop()
        if group.get((h.s, h.y)) is not h:
            continue  # superseded
        for il, w, nxt in view.arcs_by_output(h.s).get(EPS, ()):
            _extend(group, work, h, il, w, nxt, k, scorer, limit)


def _extend(group, work, h, il, w, nxt, k, scorer, limit: float = INF) -> None:
    if h.score + w > limit:
        return
    if il == EPS:
        term, y = 0.0, h.y
    else:
        term, y = -float(scorer(h.y)[il]), h.y + (il,)
    score = h.score + w + term
    if not math.isfinite(score) or score > limit:
        return
    key = (nxt, y)
    old = group.get(key)
    if old is None or (score, y) < (old.score, old.y):
        new = Hypothesis(nxt, k, y, score, (h, w, term))
        group[key] = new
        if work is not None:
            work.append(new)


def _prune(group: dict, beam: Optional[int]) -> list[Hypothesis]:
    ranked = sorted(group.values(), key=lambda h: (h.score, h.y))
    return ranked if beam is None else ranked[:beam]


def poe_decode(x: Sequence[int], lm: Wfst, channel: Wfst, scorer: Scorer,
               beam: Optional[int] = 5, return_hypothesis: bool = False,
               threshold: Optional[float] = None):
    """Best target sequence under the sum of lattice and neural costs.

    Hypotheses are grouped by the number of consumed source characters.
    Within a group, non-consuming arcs (deletions and LM backoff) are
    followed to a fixed point before the ``beam`` best survive; ``beam=None``
    keeps everything.  Identical (state, prefix) hypotheses keep the better
    score.  Completed hypotheses pay the lattice final weight and the neural
    end-of-sequence cost.  ``threshold`` optionally bounds the closure (see
    :func:`_closure`); the default keeps it exhaustive.
    """
    if beam is not None and beam < 1:
        raise CombineError(f"beam must be >= 1 or unbounded, got {beam}")
    view = ComposeView(lm, channel)
    if view.start is None:
        raise CombineError("empty decode machine")
    group = {(view.start, ()): Hypothesis(view.start, 0, (), 0.0)}
    for k in range(len(x) + 1):
        _closure(group, view, scorer, k, threshold)
        if k == len(x):
            break
        survivors = _prune(group, beam)
        group = {}
        for h in survivors:
            for il, w, nxt in view.arcs_by_output(h.s).get(x[k], ()):
                _extend(group, None, h, il, w, nxt, k + 1, scorer)
        if not group:
            break
    best = None
    if len(x) == 0 or (group and next(iter(group.values())).k == len(x)):
        for h in group.values():
            total = h.score + view.final(h.s) - float(scorer(h.y)[0])
            if math.isfinite(total) and (best is None or (total, h.y) < best[:2]):
                best = (total, h.y, h)
    if best is None:
        raise CombineError("no complete hypothesis; try a larger beam or delay bound")
    if return_hypothesis:
        return list(best[1]), best[0], best[2]
    return list(best[1])


def hypothesis_trace(h: Hypothesis) -> list[tuple[float, float]]:
    """(arc weight, neural term) per step from the start to ``h``."""
    steps = []
    while h.back is not None:
        parent, w, term = h.back
        steps.append((w, term))
        h = parent
    steps.reverse()
    return steps


# -- candidate generation ----------------------------------------------------

def decode_lattice(x: Sequence[int], lm: Wfst, channel: Wfst) -> Wfst:
    return compose(lm, compose(channel, acceptor(list(x), channel.output_size)))


def generate_candidates_wfst(x: Sequence[int], lm: Wfst, channel: Wfst, n: int = 5) -> list[Candidate]:
    """The ``n`` shortest lattice paths as target strings; duplicates kept."""
    paths = n_shortest_paths(decode_lattice(x, lm, channel), n)
    if not paths:
        raise DecodeError(f"empty lattice: no path satisfies the delay bound (source ids {list(x)})")
    return [Candidate(tuple(p.input), p.weight) for p in paths]


def generate_candidates_seq2seq(model, x: Sequence[int], direction, n: int = 5,
                                beam: Optional[int] = None) -> list[Candidate]:
    from .neural import beam_search
    hyps = beam_search(model, list(x), direction, beam=max(n, beam or n), n=n)
    return [Candidate(tuple(y), s) for y, s in hyps]


# -- rescoring ---------------------------------------------------------------

def lm_score(y: Sequence[int], lm: Wfst) -> float:
    """Tropical -log score of ``y`` under an LM acceptor."""
    m = compose(acceptor(list(y), lm.input_size), lm)
    if m.num_states == 0:
        return INF
    return shortest_distance(m, TROPICAL, reverse=True)[m.start]


def wfst_rescorer(x: Sequence[int], lm: Wfst, channel: Wfst) -> Callable[[tuple], float]:
    """Score y by its LM cost plus -log P(x | y) summed over alignments.

    Returns inf when no bounded-delay alignment of y with x exists.
    """
    x = list(x)

    def score(y: tuple) -> float:
        if isinstance(channel, ChannelFst):
            cw = pair_weight(list(y), x, channel)
        else:
            m = compose(compose(acceptor(list(y), channel.input_size), channel),
                        acceptor(x, channel.output_size))
            cw = total_weight(m, LOG)
        if cw == INF:
            return INF
        return lm_score(y, lm) + cw

    return score


def seq2seq_rescorer(model, x: Sequence[int], direction,
                     length_normalize: bool = False) -> Callable[[tuple], float]:
    """Score y by -log p(y, EOS | x), optionally divided by |y| + 1."""
    from .neural import sequence_logprob

    def score(y: tuple) -> float:
        s = sequence_logprob(model, list(x), list(y), direction)
        return s / (len(y) + 1) if length_normalize else s

    return score


def rerank(candidates: list[Candidate], rescorer: Callable[[tuple], float]) -> list[Candidate]:
    """Candidates sorted by rescorer score; unreachable ones trail in generator order."""
    if not candidates:
        raise CombineError("rerank needs at least one candidate")
    scored = [replace(c, rescorer_score=float(rescorer(c.y))) for c in candidates]
    for c in scored:
        if math.isnan(c.rescorer_score):
            raise CombineError(f"rescorer returned NaN for {c.y}")
    order = sorted(range(len(scored)), key=lambda i: (scored[i].rescorer_score, i))
    return [scored[i] for i in order]


def count_unreachable(candidates: list[Candidate]) -> int:
    return sum(1 for c in candidates if not c.reachable)


def format_nbest(candidates: list[Candidate], render: Callable[[Sequence[int]], str],
                 rescored: bool = True) -> str:
    """TSV lines ``rank<TAB>score<TAB>output`` (rank from 1)."""
    lines = []
    for rank, c in enumerate(candidates, 1):
        s = c.rescorer_score if rescored else c.generator_score
        lines.append(f"{rank}\t{s:.6g}\t{render(c.y)}\n")
    return "".join(lines)
