"""Weighted finite-state transducers over negative log weights.

Labels are integer alphabet ids with 0 reserved for epsilon.  Weights are
negative natural-log probabilities; ``math.inf`` marks a forbidden arc.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from typing import Iterable, NamedTuple, Optional, Sequence

EPS = 0
INF = math.inf

TROPICAL = "tropical"
LOG = "log"


class FstError(ValueError):
    pass


class CycleError(FstError):
    pass


class Arc(NamedTuple):
    ilabel: int
    olabel: int
    weight: float
    nextstate: int


class Path(NamedTuple):
    input: tuple
    output: tuple
    weight: float
    arcs: tuple  # (state, arc index) pairs


def log_plus(a: float, b: float) -> float:
    """Semiring sum in the log semiring: -log(exp(-a) + exp(-b))."""
    if a == INF:
        return b
    if b == INF:
        return a
    if a > b:
        a, b = b, a
    return a - math.log1p(math.exp(a - b))


class Semiring:
    """Shared (+, 0, inf) times-structure; ``mode`` picks the plus operation."""

    def __init__(self, mode: str = TROPICAL):
        if mode not in (TROPICAL, LOG):
            raise FstError(f"unknown semiring {mode!r}")
        self.mode = mode
        self.one = 0.0
        self.zero = INF

    def plus(self, a: float, b: float) -> float:
        return min(a, b) if self.mode == TROPICAL else log_plus(a, b)

    def sum(self, weights: Iterable[float]) -> float:
        total = INF
        for w in weights:
            total = self.plus(total, w)
        return total

    @staticmethod
    def times(a: float, b: float) -> float:
        return a + b

    def __repr__(self):
        return f"Semiring({self.mode!r})"


def _semiring(s) -> Semiring:
    return s if isinstance(s, Semiring) else Semiring(s)


class Wfst:
    """Weighted transducer with integer states ``0..num_states-1``.

    ``input_size``/``output_size`` optionally record the label alphabets
    (their sizes, epsilon included) so composition can check compatibility.
    """

    def __init__(self, input_size: Optional[int] = None, output_size: Optional[int] = None):
        self.arcs: list[list[Arc]] = []
        self.finals: dict[int, float] = {}
        self.start: int = -1
        self.input_size = input_size
        self.output_size = output_size if output_size is not None else input_size

    @property
    def num_states(self) -> int:
        return len(self.arcs)

    def add_state(self) -> int:
        self.arcs.append([])
        return len(self.arcs) - 1

    def add_states(self, n: int) -> range:
        first = len(self.arcs)
        self.arcs.extend([] for _ in range(n))
        return range(first, first + n)

    def set_start(self, state: int) -> None:
        self.start = state

    def add_arc(self, src: int, ilabel: int, olabel: int, weight: float, dst: int) -> None:
        if not (weight >= 0 or weight == INF):
            raise FstError(f"arc weight must be a non-negative neg-log value, got {weight}")
        self.arcs[src].append(Arc(ilabel, olabel, float(weight), dst))

    def set_final(self, state: int, weight: float = 0.0) -> None:
        if weight == INF:
            self.finals.pop(state, None)
        else:
            self.finals[state] = float(weight)

    def final(self, state: int) -> float:
        return self.finals.get(state, INF)

    def num_arcs(self) -> int:
        return sum(len(a) for a in self.arcs)

    def validate(self) -> None:
        n = self.num_states
        if n and not 0 <= self.start < n:
            raise FstError(f"start state {self.start} out of range")
        for q, arcs in enumerate(self.arcs):
            for arc in arcs:
                if not 0 <= arc.nextstate < n:
                    raise FstError(f"arc {q}->{arc.nextstate} targets an invalid state")
                if math.isnan(arc.weight) or arc.weight < 0:
                    raise FstError(f"arc {q}->{arc.nextstate} has invalid weight {arc.weight}")
        for q, w in self.finals.items():
            if not 0 <= q < n:
                raise FstError(f"final state {q} out of range")
            if math.isnan(w) or w < 0:
                raise FstError(f"final weight {w} at state {q} is invalid")

    def topological_order(self) -> Optional[list[int]]:
        """States in topological order, or None if there is a cycle."""
        n = self.num_states
        indeg = [0] * n
        for arcs in self.arcs:
            for arc in arcs:
                if arc.weight != INF:
                    indeg[arc.nextstate] += 1
        queue = deque(q for q in range(n) if indeg[q] == 0)
        order = []
        while queue:
            q = queue.popleft()
            order.append(q)
            for arc in self.arcs[q]:
                if arc.weight == INF:
                    continue
                indeg[arc.nextstate] -= 1
                if indeg[arc.nextstate] == 0:
                    queue.append(arc.nextstate)
        return order if len(order) == n else None

    def is_acyclic(self) -> bool:
        return self.topological_order() is not None

    def reversed_arcs(self) -> list[list[tuple[float, int]]]:
        rev: list[list[tuple[float, int]]] = [[] for _ in range(self.num_states)]
        for q, arcs in enumerate(self.arcs):
            for arc in arcs:
                rev[arc.nextstate].append((arc.weight, q))
        return rev

    def to_text(self) -> str:
        lines = [f"{self.num_states} {self.start}"]
        for q, arcs in enumerate(self.arcs):
            for a in arcs:
                lines.append(f"{q} {a.nextstate} {a.ilabel} {a.olabel} {a.weight!r}")
        for q in sorted(self.finals):
            lines.append(f"{q} {self.finals[q]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, input_size=None, output_size=None) -> "Wfst":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if not rows or len(rows[0]) != 2:
            raise FstError("missing 'states start' header line")
        m = cls(input_size, output_size)
        m.add_states(int(rows[0][0]))
        m.set_start(int(rows[0][1]))
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) == 5:
                m.add_arc(int(row[0]), int(row[2]), int(row[3]), float(row[4]), int(row[1]))
            elif len(row) == 2:
                m.set_final(int(row[0]), float(row[1]))
            else:
                raise FstError(f"line {lineno}: expected 5 (arc) or 2 (final) fields")
        m.validate()
        return m


def acceptor(labels: Sequence[int], size: Optional[int] = None) -> Wfst:
    """Linear-chain acceptor for one string, weight 0."""
    m = Wfst(size)
    m.add_states(len(labels) + 1)
    m.set_start(0)
    for i, lab in enumerate(labels):
        m.add_arc(i, lab, lab, 0.0, i + 1)
    m.set_final(len(labels))
    return m


def identity(labels: Iterable[int], size: Optional[int] = None) -> Wfst:
    """One-state transducer mapping every label in ``labels`` to itself."""
    m = Wfst(size)
    q = m.add_state()
    m.set_start(q)
    m.set_final(q)
    for lab in labels:
        m.add_arc(q, lab, lab, 0.0, q)
    return m


class ComposeView:
    """On-demand composition of ``a`` and ``b``; states are (qa, qb, filter) triples.

    Epsilons use a two-state sequence filter: between two matched labels,
    a's output-epsilon moves come strictly before b's input-epsilon moves
    (filter state 1 blocks further a-moves), so each pair of underlying paths
    yields exactly one composed path.
    """

    def __init__(self, a: Wfst, b: Wfst):
        if a.output_size is not None and b.input_size is not None and a.output_size != b.input_size:
            raise FstError(
                f"cannot compose: output alphabet size {a.output_size} "
                f"!= input alphabet size {b.input_size}"
            )
        self.a, self.b = a, b
        self.start = (a.start, b.start, 0) if a.start >= 0 and b.start >= 0 else None
        self._b_index: list[Optional[dict[int, list[Arc]]]] = [None] * b.num_states
        self._cache: dict[tuple, list[tuple]] = {}
        self._by_output: dict[tuple, dict[int, list[tuple]]] = {}

    def _index(self, qb: int) -> dict[int, list[Arc]]:
        idx = self._b_index[qb]
        if idx is None:
            idx = {}
            for arc in self.b.arcs[qb]:
                idx.setdefault(arc.ilabel, []).append(arc)
            self._b_index[qb] = idx
        return idx

    def final(self, triple: tuple) -> float:
        return self.a.final(triple[0]) + self.b.final(triple[1])

    def arcs(self, triple: tuple) -> list[tuple]:
        """Outgoing (ilabel, olabel, weight, next triple) moves."""
        out = self._cache.get(triple)
        if out is not None:
            return out
        qa, qb, f = triple
        idx = self._index(qb)
        out = []
        for ea in self.a.arcs[qa]:
            if ea.olabel == EPS:
                if f == 0:
                    out.append((ea.ilabel, EPS, ea.weight, (ea.nextstate, qb, 0)))
                continue
            for eb in idx.get(ea.olabel, ()):
                out.append((ea.ilabel, eb.olabel, ea.weight + eb.weight,
                            (ea.nextstate, eb.nextstate, 0)))
        for eb in idx.get(EPS, ()):
            out.append((EPS, eb.olabel, eb.weight, (qa, eb.nextstate, 1)))
        self._cache[triple] = out
        return out

    def arcs_by_output(self, triple: tuple) -> dict[int, list[tuple]]:
        """Outgoing moves as {olabel: [(ilabel, weight, next triple), ...]}."""
        idx = self._by_output.get(triple)
        if idx is None:
            idx = {}
            for il, ol, w, nxt in self.arcs(triple):
                idx.setdefault(ol, []).append((il, w, nxt))
            self._by_output[triple] = idx
        return idx


def compose(a: Wfst, b: Wfst, connect_result: bool = True) -> Wfst:
    """Composition of ``a`` and ``b`` matching a's outputs to b's inputs (see :class:`ComposeView`)."""
    view = ComposeView(a, b)
    out = Wfst(a.input_size, b.output_size)
    if view.start is None:
        return out
    ids: dict[tuple, int] = {}
    queue: deque = deque()

    def state(triple):
        q = ids.get(triple)
        if q is None:
            q = ids[triple] = out.add_state()
            queue.append(triple)
        return q

    out.set_start(state(view.start))
    while queue:
        triple = queue.popleft()
        src = ids[triple]
        fw = view.final(triple)
        if fw != INF:
            out.set_final(src, fw)
        for il, ol, w, nxt in view.arcs(triple):
            out.add_arc(src, il, ol, w, state(nxt))
        del view._cache[triple]
    return connect(out) if connect_result else out


def connect(m: Wfst) -> Wfst:
    """Remove states that are not on some start-to-final path."""
    n = m.num_states
    if m.start < 0 or n == 0:
        return Wfst(m.input_size, m.output_size)
    access = [False] * n
    access[m.start] = True
    stack = [m.start]
    while stack:
        q = stack.pop()
        for arc in m.arcs[q]:
            if arc.weight != INF and not access[arc.nextstate]:
                access[arc.nextstate] = True
                stack.append(arc.nextstate)
    rev = m.reversed_arcs()
    coaccess = [False] * n
    stack = [q for q in m.finals if access[q]]
    for q in stack:
        coaccess[q] = True
    while stack:
        q = stack.pop()
        for w, p in rev[q]:
            if w != INF and not coaccess[p]:
                coaccess[p] = True
                stack.append(p)
    keep = [q for q in range(n) if access[q] and coaccess[q]]
    out = Wfst(m.input_size, m.output_size)
    if not coaccess[m.start]:
        return out
    remap = {q: i for i, q in enumerate(keep)}
    out.add_states(len(keep))
    out.set_start(remap[m.start])
    for q in keep:
        for arc in m.arcs[q]:
            if arc.nextstate in remap and arc.weight != INF:
                out.arcs[remap[q]].append(arc._replace(nextstate=remap[arc.nextstate]))
        if q in m.finals:
            out.finals[remap[q]] = m.finals[q]
    return out


def shortest_distance(m: Wfst, semiring=TROPICAL, reverse: bool = False) -> list[float]:
    """Per-state distance from the start (or, with ``reverse``, to a final).

    Reverse distances include the final weights.  Acyclic machines are
    relaxed in topological order.  Cyclic machines are only supported in the
    tropical semiring (Dijkstra, valid because weights are non-negative).
    """
    sr = _semiring(semiring)
    n = m.num_states
    dist = [INF] * n
    if n == 0 or m.start < 0:
        return dist
    order = m.topological_order()
    if order is None:
        if sr.mode == LOG:
            raise CycleError("log-semiring shortest distance requires an acyclic machine")
        return _dijkstra(m, reverse)
    if not reverse:
        dist[m.start] = 0.0
        for q in order:
            dq = dist[q]
            if dq == INF:
                continue
            for arc in m.arcs[q]:
                dist[arc.nextstate] = sr.plus(dist[arc.nextstate], dq + arc.weight)
    else:
        for q in reversed(order):
            d = m.final(q)
            for arc in m.arcs[q]:
                d = sr.plus(d, arc.weight + dist[arc.nextstate])
            dist[q] = d
    return dist


def _dijkstra(m: Wfst, reverse: bool) -> list[float]:
    n = m.num_states
    dist = [INF] * n
    heap: list[tuple[float, int]] = []
    if reverse:
        adj = m.reversed_arcs()
        for q, w in m.finals.items():
            if w < dist[q]:
                dist[q] = w
                heap.append((w, q))
        heapq.heapify(heap)
    else:
        adj = [[(a.weight, a.nextstate) for a in arcs] for arcs in m.arcs]
        dist[m.start] = 0.0
        heap = [(0.0, m.start)]
    done = [False] * n
    while heap:
        d, q = heapq.heappop(heap)
        if done[q]:
            continue
        done[q] = True
        for w, r in adj[q]:
            nd = d + w
            if nd < dist[r]:
                dist[r] = nd
                heapq.heappush(heap, (nd, r))
    return dist


def total_weight(m: Wfst, semiring=TROPICAL) -> float:
    """Semiring sum over all successful paths (including final weights)."""
    if m.num_states == 0 or m.start < 0:
        return INF
    return shortest_distance(m, semiring, reverse=True)[m.start]


def n_shortest_paths(m: Wfst, n: int) -> list[Path]:
    """The ``n`` lowest-weight successful paths, in nondecreasing weight order.

    Distinct paths carrying the same string pair are reported separately.
    Ties are ordered by output string, then by the arc sequence.  Uses A*
    with the exact reverse tropical distance as heuristic.
    """
    if n <= 0 or m.num_states == 0 or m.start < 0:
        return []
    h = shortest_distance(m, TROPICAL, reverse=True)
    if h[m.start] == INF:
        return []
    # Heap items: (priority, output, arcs, complete flag, state, g, input).
    heap: list = [(h[m.start], (), (), 0, m.start, 0.0, ())]
    found: list[Path] = []
    while heap:
        f, out, arcs, complete, q, g, inp = heapq.heappop(heap)
        if len(found) >= n and f > found[n - 1].weight * (1 + 1e-12) + 1e-12:
            break
        if complete:
            found.append(Path(inp, out, g, arcs))
            continue
        fw = m.final(q)
        if fw != INF:
            total = g + fw
            heapq.heappush(heap, (total, out, arcs, 1, q, total, inp))
        for i, arc in enumerate(m.arcs[q]):
            if arc.weight == INF or h[arc.nextstate] == INF:
                continue
            ng = g + arc.weight
            nout = out + (arc.olabel,) if arc.olabel != EPS else out
            ninp = inp + (arc.ilabel,) if arc.ilabel != EPS else inp
            heapq.heappush(heap, (ng + h[arc.nextstate], nout, arcs + ((q, i),), 0,
                                  arc.nextstate, ng, ninp))
    found.sort(key=lambda p: (p.weight, p.output, p.arcs))
    return found[:n]


def shortest_path(m: Wfst) -> Optional[Path]:
    paths = n_shortest_paths(m, 1)
    return paths[0] if paths else None


def path_weight(m: Wfst, arcs: Iterable[tuple[int, int]]) -> float:
    """Recompute the weight of a path given as (state, arc index) pairs."""
    w = 0.0
    q = m.start
    for state, i in arcs:
        if state != q:
            raise FstError(f"path is discontinuous at state {state}")
        arc = m.arcs[state][i]
        w += arc.weight
        q = arc.nextstate
    return w + m.final(q)


def merge_duplicates(paths: list[Path]) -> list[Path]:
    """Collapse paths with identical string pairs, log-summing their weights."""
    merged: dict[tuple, Path] = {}
    for p in paths:
        key = (p.input, p.output)
        if key in merged:
            prev = merged[key]
            merged[key] = prev._replace(weight=log_plus(prev.weight, p.weight))
        else:
            merged[key] = p
    return sorted(merged.values(), key=lambda p: (p.weight, p.output, p.arcs))


def invert(m: Wfst) -> Wfst:
    out = Wfst(m.output_size, m.input_size)
    out.add_states(m.num_states)
    out.set_start(m.start)
    out.finals = dict(m.finals)
    for q, arcs in enumerate(m.arcs):
        out.arcs[q] = [Arc(a.olabel, a.ilabel, a.weight, a.nextstate) for a in arcs]
    return out


def project(m: Wfst, side: str = "input") -> Wfst:
    """Acceptor keeping only the input (or output) labels."""
    size = m.input_size if side == "input" else m.output_size
    out = Wfst(size)
    out.add_states(m.num_states)
    out.set_start(m.start)
    out.finals = dict(m.finals)
    for q, arcs in enumerate(m.arcs):
        if side == "input":
            out.arcs[q] = [Arc(a.ilabel, a.ilabel, a.weight, a.nextstate) for a in arcs]
        else:
            out.arcs[q] = [Arc(a.olabel, a.olabel, a.weight, a.nextstate) for a in arcs]
    return out
