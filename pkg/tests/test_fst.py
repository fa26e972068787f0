import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from uct.fst import (LOG, TROPICAL, CycleError, FstError, Wfst, acceptor, compose, connect, identity, invert,
                     merge_duplicates, n_shortest_paths, project, shortest_distance, shortest_path)

from oracles import check_against_enumeration, enumerate_paths, logsumexp, random_acyclic


def chain(weights, labels=None):
    m = Wfst(4, 4)
    m.add_states(len(weights) + 1)
    m.set_start(0)
    for i, w in enumerate(weights):
        lab = labels[i] if labels else 1
        m.add_arc(i, lab, lab, w, i + 1)
    m.set_final(len(weights))
    return m


def parallel(w1, w2):
    m = Wfst(3, 3)
    m.add_states(2)
    m.set_start(0)
    m.add_arc(0, 1, 1, w1, 1)
    m.add_arc(0, 2, 2, w2, 1)
    m.set_final(1)
    return m


def test_single_arc_distance():
    assert shortest_distance(chain([1.5]))[1] == 1.5


def test_parallel_arcs():
    m = parallel(1.0, 2.0)
    assert shortest_distance(m, TROPICAL)[1] == 1.0
    assert shortest_distance(m, LOG)[1] == pytest.approx(-math.log(math.exp(-1) + math.exp(-2)), abs=1e-12)
    assert shortest_distance(m, LOG)[1] == pytest.approx(0.6867, abs=1e-4)


def test_log_mode_rejects_cycles():
    m = chain([1.0])
    m.add_arc(1, 1, 1, 1.0, 0)
    with pytest.raises(CycleError):
        shortest_distance(m, LOG)
    # Tropical still works on a cycle with non-negative weights.
    assert shortest_distance(m, TROPICAL)[1] == 1.0


def test_compose_identity_is_neutral():
    rng = random.Random(3)
    for _ in range(20):
        m = random_acyclic(rng, 5, labels=3)
        c = compose(identity(range(1, 4), 4), m)
        want = sorted((p[0], p[1], round(p[2], 9)) for p in enumerate_paths(m))
        got = sorted((p[0], p[1], round(p[2], 9)) for p in enumerate_paths(c))
        # Connect drops dead ends, so compare only successful paths.
        assert got == want


def test_compose_two_single_arcs():
    a = Wfst(3, 3)
    a.add_states(2); a.set_start(0); a.add_arc(0, 1, 2, 0.5, 1); a.set_final(1)
    b = Wfst(3, 3)
    b.add_states(2); b.set_start(0); b.add_arc(0, 2, 1, 0.25, 1); b.set_final(1)
    paths = enumerate_paths(compose(a, b))
    assert paths == [((1,), (1,), 0.75, ((0, 0),))]


def test_compose_alphabet_mismatch():
    with pytest.raises(FstError):
        compose(Wfst(3, 3), Wfst(4, 4))


def pair_weights(m):
    out = {}
    for inp, outp, w, _ in enumerate_paths(m):
        out.setdefault((inp, outp), []).append(w)
    return {k: logsumexp(v) for k, v in out.items()}


def test_compose_matches_intermediate_sum():
    rng = random.Random(11)
    for _ in range(60):
        a = random_acyclic(rng, 5, labels=2)
        b = random_acyclic(rng, 5, labels=2)
        got = pair_weights(compose(a, b))
        want: dict = {}
        pb = {}
        for bi, bo, bw, _ in enumerate_paths(b):
            pb.setdefault(bi, []).append((bo, bw))
        for ai, ao, aw, _ in enumerate_paths(a):
            for bo, bw in pb.get(ao, ()):
                want.setdefault((ai, bo), []).append(aw + bw)
        want = {k: logsumexp(v) for k, v in want.items()}
        assert got.keys() == want.keys()
        for k in want:
            assert got[k] == pytest.approx(want[k], abs=1e-9)


def test_compose_associative():
    rng = random.Random(5)
    for _ in range(30):
        a, b, c = (random_acyclic(rng, 4, labels=2) for _ in range(3))
        left = pair_weights(compose(compose(a, b), c))
        right = pair_weights(compose(a, compose(b, c)))
        assert left.keys() == right.keys()
        for k in left:
            assert left[k] == pytest.approx(right[k], abs=1e-9)


def test_n_shortest_three_paths():
    m = Wfst(4, 4)
    m.add_states(2); m.set_start(0); m.set_final(1)
    for lab, w in ((1, 3.0), (2, 1.0), (3, 2.0)):
        m.add_arc(0, lab, lab, w, 1)
    paths = n_shortest_paths(m, 5)
    assert [p.output for p in paths] == [(2,), (3,), (1,)]
    assert [p.weight for p in paths] == [1.0, 2.0, 3.0]
    assert n_shortest_paths(m, 0) == []
    assert shortest_path(m) == paths[0] == n_shortest_paths(m, 1)[0]


def two_alignment_machine():
    # Two paths that spell the same pair (a, a) with different epsilon placement.
    m = Wfst(3, 3)
    m.add_states(4); m.set_start(0); m.set_final(3)
    m.add_arc(0, 1, 0, 0.5, 1); m.add_arc(1, 0, 1, 0.5, 3)
    m.add_arc(0, 0, 1, 0.7, 2); m.add_arc(2, 1, 0, 0.7, 3)
    return m


def test_duplicates_kept_and_mergeable():
    paths = n_shortest_paths(two_alignment_machine(), 5)
    assert [(p.input, p.output) for p in paths] == [((1,), (1,))] * 2
    assert [p.weight for p in paths] == pytest.approx([1.0, 1.4])
    merged = merge_duplicates(paths)
    assert len(merged) == 1
    assert merged[0].weight == pytest.approx(logsumexp([1.0, 1.4]))


def test_text_roundtrip():
    m = two_alignment_machine()
    text = m.to_text()
    assert text.splitlines()[0] == "4 0"
    back = Wfst.from_text(text)
    assert back.to_text() == text


def test_invert_and_project():
    m = chain([1.0, 2.0], labels=[1, 2])
    m.arcs[0][0] = m.arcs[0][0]._replace(olabel=3)
    assert enumerate_paths(invert(m))[0][:2] == ((3, 2), (1, 2))
    assert enumerate_paths(project(m, "output"))[0][:2] == ((3, 2), (3, 2))


def test_connect_removes_dead_states():
    m = chain([1.0])
    dead = m.add_state()
    m.add_arc(0, 2, 2, 1.0, dead)
    assert connect(m).num_states == 2


def test_acceptor():
    m = acceptor([2, 3], 4)
    assert enumerate_paths(m) == [((2, 3), (2, 3), 0.0, ((0, 0), (1, 0)))]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9))
def test_random_machines_match_enumeration(seed):
    assert check_against_enumeration(random_acyclic(random.Random(seed)))
