import itertools
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from uct.charlm import BOS, EOS, LmError, compile_lm, read_arpa, to_arpa, train_lm
from uct.fst import TROPICAL, acceptor, compose, shortest_distance

A, B = 2, 3


def acceptor_weight(lm_fst, ids):
    m = compose(acceptor(list(ids), lm_fst.input_size), lm_fst)
    return shortest_distance(m, TROPICAL, reverse=True)[m.start] if m.num_states else math.inf


def test_unsmoothed_unigram_counts():
    lm = train_lm([[A, B]], order=1, smoothing="none")
    for c in (A, B, EOS):
        assert lm.prob(c) == pytest.approx(1 / 3)


def test_single_symbol_normalization():
    lm = train_lm([[A, A], [A]], order=2)
    for h in lm.contexts:
        assert lm.prob(A, h) + lm.prob(EOS, h) == pytest.approx(1.0, abs=1e-12)


def test_witten_bell_hand_values():
    # "aaab": unigram C=5, T=3 over {a, b, EOS}; after "a": a,a,b so C=3, T=2.
    lm = train_lm([[A, A, A, B]], order=2)
    assert lm.prob(A) == pytest.approx((3 + 3 / 3) / 8)
    assert lm.prob(B) == pytest.approx((1 + 3 / 3) / 8)
    assert lm.prob(A, [A]) == pytest.approx((2 + 2 * 0.5) / 5)
    assert lm.prob(B, [A]) == pytest.approx((1 + 2 * 0.25) / 5)
    assert lm.prob(EOS, [A]) == pytest.approx(2 * 0.25 / 5)
    unsmoothed = train_lm([[A, A, A, B]], order=2, smoothing="none")
    assert unsmoothed.prob(A, [A]) == pytest.approx(2 / 3)


def test_errors():
    with pytest.raises(LmError):
        train_lm([[A]], order=0)
    with pytest.raises(LmError):
        train_lm([], order=2)


def random_corpus(rng, n=30, V=3, max_len=6):
    return [[rng.randint(2, V + 1) for _ in range(rng.randint(0, max_len))] for _ in range(n)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4))
def test_distributions_normalized_and_positive(seed, order):
    rng = random.Random(seed)
    lm = train_lm(random_corpus(rng), order=order, vocab=range(1, 6))
    support = lm.vocab + [EOS]
    for h in lm.contexts:
        ps = [lm.prob(c, h) for c in support]
        assert sum(ps) == pytest.approx(1.0, abs=1e-9)
        assert min(ps) > 0


def test_compiled_order1_weights():
    lm = train_lm([[A, B], [A]], order=1)
    fst = compile_lm(lm)
    assert acceptor_weight(fst, [A]) == pytest.approx(-math.log(lm.prob(A)) - math.log(lm.prob(EOS)))
    assert acceptor_weight(fst, []) == pytest.approx(-math.log(lm.prob(EOS)))


def test_empty_string_weight_order3():
    lm = train_lm([[A, B], [B]], order=3)
    assert acceptor_weight(compile_lm(lm), []) == pytest.approx(-math.log(lm.prob(EOS, [BOS])))


def test_compiled_matches_chain_rule():
    # Witten-Bell never makes a backoff route cheaper than the direct one, so
    # the tropical acceptor weight is the exact chain-rule score for all strings.
    rng = random.Random(7)
    lm = train_lm(random_corpus(rng, V=3), order=3, vocab=range(2, 5))
    fst = compile_lm(lm)
    for n in range(5):
        for ids in itertools.product(range(2, 5), repeat=n):
            assert acceptor_weight(fst, ids) == pytest.approx(lm.sentence_logprob(ids), abs=1e-9)


def test_perplexity_monotone_without_smoothing():
    corpus = [[A, B, A, A], [B, B, A], [A, B, B, B, A]]
    ppl = [train_lm(corpus, order=k, smoothing="none").perplexity(corpus) for k in range(1, 5)]
    assert all(b <= a + 1e-12 for a, b in zip(ppl, ppl[1:]))


def test_arpa_roundtrip(tmp_path):
    rng = random.Random(2)
    lm = train_lm(random_corpus(rng), order=3, vocab=range(1, 6))
    path = tmp_path / "lm.arpa"
    lm.write_arpa(path)
    text = path.read_text()
    assert "\\data\\" in text and "\\3-grams:" in text and "<s>" in text
    back = read_arpa(path)
    assert back.order == 3
    for h in lm.contexts:
        for c in lm.vocab + [EOS]:
            assert back.prob(c, h) == pytest.approx(lm.prob(c, h), rel=1e-9)
    assert to_arpa(back) == to_arpa(lm)
