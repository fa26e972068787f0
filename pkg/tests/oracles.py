"""Brute-force reference implementations used by the tests."""

from __future__ import annotations

import math
import random
from functools import lru_cache

import numpy as np

from uct.channel import EmissionParams
from uct.fst import EPS, INF, LOG, TROPICAL, ComposeView, Wfst, n_shortest_paths, path_weight, shortest_distance, \
    total_weight


def logsumexp(ws):
    """-log sum exp(-w) over neg-log weights."""
    ws = [w for w in ws if w != INF]
    if not ws:
        return INF
    m = min(ws)
    return m - math.log(sum(math.exp(m - w) for w in ws))


def enumerate_paths(m: Wfst, limit: int = 50):
    """Every successful path of an acyclic machine as (input, output, weight, arcs)."""
    out = []

    def walk(q, inp, outp, w, arcs):
        if len(arcs) > limit:
            raise RuntimeError("machine looks cyclic")
        fw = m.final(q)
        if fw != INF:
            out.append((inp, outp, w + fw, arcs))
        for i, a in enumerate(m.arcs[q]):
            walk(a.nextstate,
                 inp + ((a.ilabel,) if a.ilabel != EPS else ()),
                 outp + ((a.olabel,) if a.olabel != EPS else ()),
                 w + a.weight, arcs + ((q, i),))

    if m.start >= 0:
        walk(m.start, (), (), 0.0, ())
    return out


def prefix_distances(m: Wfst, limit: int = 50):
    """Per-state lists of weights of every start-to-state path."""
    found = [[] for _ in range(m.num_states)]

    def walk(q, w, depth):
        if depth > limit:
            raise RuntimeError("machine looks cyclic")
        found[q].append(w)
        for a in m.arcs[q]:
            walk(a.nextstate, w + a.weight, depth + 1)

    if m.start >= 0:
        walk(m.start, 0.0, 0)
    return found


def random_acyclic(rng: random.Random, max_states: int = 8, labels: int = 3,
                   eps_prob: float = 0.2) -> Wfst:
    """Random machine whose arcs only go to higher-numbered states."""
    n = rng.randint(1, max_states)
    m = Wfst(labels + 1, labels + 1)
    m.add_states(n)
    m.set_start(0)
    for q in range(n):
        for r in range(q + 1, n):
            for _ in range(rng.randint(0, 2)):
                il = 0 if rng.random() < eps_prob else rng.randint(1, labels)
                ol = 0 if rng.random() < eps_prob else rng.randint(1, labels)
                m.add_arc(q, il, ol, round(rng.uniform(0.0, 3.0), 6), r)
        if rng.random() < 0.4 or q == n - 1:
            m.set_final(q, round(rng.uniform(0.0, 1.0), 6))
    return m


def random_params(rng: np.random.Generator, T: int, S: int, p_insert: float = 0.3) -> EmissionParams:
    emit = rng.dirichlet(np.ones(S), size=T)
    emit[0] = 0.0
    ins = rng.dirichlet(np.ones(S))
    ins[0] = 0.0
    ins /= ins.sum()
    return EmissionParams(emit=emit, ins=ins, p_insert=p_insert)


def enumerate_alignments(y, x, params: EmissionParams, d: int):
    """All bounded-delay alignments of target y with source x as (weight, ops).

    Ops are ("sub", c, o), ("del", c) and ("ins", o); the delay
    #ins - #del stays within [-d, d] after every operation.
    """
    sub = params.sub_weights()
    ins = params.ins_weights()
    out = []

    def walk(i, j, w, ops):
        if i == len(y) and j == len(x):
            out.append((w, ops))
        if i < len(y) and j < len(x):
            walk(i + 1, j + 1, w + sub[y[i], x[j]], ops + (("sub", y[i], x[j]),))
        if i < len(y) and abs(j - (i + 1)) <= d:
            walk(i + 1, j, w + sub[y[i], 0], ops + (("del", y[i]),))
        if j < len(x) and abs((j + 1) - i) <= d:
            walk(i, j + 1, w + ins[x[j]], ops + (("ins", x[j]),))

    walk(0, 0, 0.0, ())
    return out


def posterior_counts(alignments) -> dict:
    z = logsumexp([w for w, _ in alignments])
    counts: dict = {}
    for w, ops in alignments:
        p = math.exp(z - w)
        for op in ops:
            counts[op] = counts.get(op, 0.0) + p
    return counts


def edit_distance(a, b) -> int:
    """Levenshtein distance by plain recursion (memoized)."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(rec(i - 1, j) + 1, rec(i, j - 1) + 1, rec(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return rec(len(a), len(b))


def poe_brute(x, lm: Wfst, channel: Wfst, scorer, limit: int = 40):
    """Joint argmax (score, y) over every path of LM o channel that reads x.

    Depth-first over all paths.  A partial path is dropped only when another
    one already reached the same (state, consumed, prefix) at no higher cost,
    since both then have exactly the same continuations.
    """
    view = ComposeView(lm, channel)
    best = None
    seen: dict = {}

    def walk(s, k, y, score, depth):
        nonlocal best
        if depth > limit:
            raise RuntimeError("unbounded epsilon chain")
        key = (s, k, y)
        if key in seen and seen[key] <= score:
            return
        seen[key] = score
        if k == len(x):
            total = score + view.final(s) - float(scorer(y)[0])
            if math.isfinite(total) and (best is None or (total, y) < best):
                best = (total, y)
        for il, ol, w, nxt in view.arcs(s):
            if ol != EPS and (k >= len(x) or ol != x[k]):
                continue
            term = 0.0 if il == EPS else -float(scorer(y)[il])
            walk(nxt, k + (ol != EPS), y + ((il,) if il != EPS else ()), score + w + term, depth + 1)

    walk(view.start, 0, (), 0.0, 0)
    return best


class TableScorer:
    """Deterministic pseudo-random next-character distributions keyed by prefix."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.seed = seed
        self.rows: dict = {}
        self.calls = 0

    def __call__(self, prefix):
        self.calls += 1
        prefix = tuple(prefix)
        if prefix not in self.rows:
            rng = np.random.default_rng([self.seed, len(prefix), *prefix])
            self.rows[prefix] = np.log(rng.dirichlet(np.ones(self.size)))
        return self.rows[prefix]


def check_against_enumeration(m):
    paths = enumerate_paths(m)
    total_t = min((p[2] for p in paths), default=INF)
    total_l = logsumexp([p[2] for p in paths])
    ok = True
    ok &= math.isclose(total_weight(m, TROPICAL), total_t, abs_tol=1e-9) or total_t == INF == total_weight(m)
    tl = total_weight(m, LOG)
    ok &= (tl == INF and total_l == INF) or math.isclose(tl, total_l, abs_tol=1e-9)
    prefixes = prefix_distances(m)
    dt, dl = shortest_distance(m, TROPICAL), shortest_distance(m, LOG)
    for q, ws in enumerate(prefixes):
        want_t = min(ws, default=INF)
        want_l = logsumexp(ws)
        ok &= (dt[q] == want_t == INF) or math.isclose(dt[q], want_t, abs_tol=1e-9)
        ok &= (dl[q] == want_l == INF) or math.isclose(dl[q], want_l, abs_tol=1e-9)
    n = 1 + len(paths) // 2
    got = n_shortest_paths(m, n)
    want = sorted(p[2] for p in paths)[:n]
    ok &= len(got) == len(want)
    ok &= all(math.isclose(g.weight, w, abs_tol=1e-9) for g, w in zip(got, want))
    ok &= all(math.isclose(path_weight(m, g.arcs), g.weight, abs_tol=1e-9) for g in got)
    ok &= all(a.weight <= b.weight for a, b in zip(got, got[1:]))
    return ok
