"""Character n-gram language model with Witten-Bell smoothing.

The model is kept in backoff form: explicit probabilities for every
(context, symbol) pair seen in training plus one backoff weight per context.
For interpolated Witten-Bell these two views coincide exactly:

    P(c | h) = lam(h) * C(h, c) / C(h) + (1 - lam(h)) * P(c | h[1:])
    lam(h)   = C(h) / (C(h) + T(h))

where T(h) is the number of distinct symbols seen after h, and for unseen c
the first term vanishes so the backoff weight is 1 - lam(h).  The unigram
level interpolates with the uniform distribution over the vocabulary.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .fst import EPS, Wfst

BOS = -1
EOS = -2

WITTEN_BELL = "witten_bell"
NO_SMOOTHING = "none"


class LmError(ValueError):
    pass


@dataclass
class NGramLm:
    order: int
    vocab: list[int]  # predictable symbols (alphabet ids), EOS excluded
    probs: dict[tuple, dict[int, float]] = field(default_factory=dict)
    backoff: dict[tuple, float] = field(default_factory=dict)
    counts: dict[tuple, dict[int, int]] = field(default_factory=dict)
    smoothing: str = WITTEN_BELL

    @property
    def contexts(self) -> list[tuple]:
        return list(self.probs)

    def prob(self, c: int, context: Iterable[int] = ()) -> float:
        h = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        scale = 1.0
        while True:
            table = self.probs.get(h)
            if table is not None:
                p = table.get(c)
                if p is not None:
                    return scale * p
                scale *= self.backoff.get(h, 0.0)
            if not h:
                return 0.0
            h = h[1:]

    def sentence_logprob(self, ids: Iterable[int]) -> float:
        """Negative natural log probability of a sentence, EOS included."""
        hist: tuple = (BOS,)
        total = 0.0
        for c in list(ids) + [EOS]:
            p = self.prob(c, hist)
            if p <= 0:
                return math.inf
            total -= math.log(p)
            hist = (hist + (c,))[-(self.order - 1):] if self.order > 1 else ()
        return total

    def perplexity(self, corpus: Iterable[Iterable[int]]) -> float:
        total = 0.0
        n = 0
        for ids in corpus:
            ids = list(ids)
            total += self.sentence_logprob(ids)
            n += len(ids) + 1
        return math.exp(total / n)

    def write_arpa(self, path, symbol=None) -> None:
        Path(path).write_text(to_arpa(self, symbol), encoding="utf-8")


def train_lm(corpus: Iterable[Iterable[int]], order: int = 6, smoothing: str = WITTEN_BELL,
             vocab: Optional[Iterable[int]] = None) -> NGramLm:
    """Estimate an order-``order`` character LM from id sequences.

    ``vocab`` lists the predictable symbol ids (defaults to those observed);
    it fixes the support of the uniform base distribution.  With
    ``smoothing="none"`` every context uses its maximum-likelihood estimate
    and only unseen contexts back off.
    """
    if order < 1:
        raise LmError(f"n-gram order must be >= 1, got {order}")
    if smoothing not in (WITTEN_BELL, NO_SMOOTHING):
        raise LmError(f"unknown smoothing {smoothing!r}")
    counts: dict[tuple, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    observed: set[int] = set()
    n_sent = 0
    for ids in corpus:
        n_sent += 1
        toks = [BOS] + list(ids) + [EOS]
        observed.update(toks[1:-1])
        for i in range(1, len(toks)):
            for k in range(0, min(order - 1, i) + 1):
                counts[tuple(toks[i - k:i])][toks[i]] += 1
    if n_sent == 0:
        raise LmError("cannot train a language model on an empty corpus")
    vocab_list = sorted(set(vocab) | observed if vocab is not None else observed)
    support = vocab_list + [EOS]

    lm = NGramLm(order=order, vocab=vocab_list, smoothing=smoothing,
                 counts={h: dict(cs) for h, cs in counts.items()})
    for h in sorted(counts, key=len):
        cs = counts[h]
        total = sum(cs.values())
        types = len(cs)
        lam = total / (total + types) if smoothing == WITTEN_BELL else 1.0
        if not h:
            uniform = 1.0 / len(support)
            if smoothing == WITTEN_BELL:
                lm.probs[h] = {c: lam * cs.get(c, 0) / total + (1 - lam) * uniform for c in support}
            else:
                lm.probs[h] = {c: n / total for c, n in cs.items()}
            lm.backoff[h] = 0.0
            continue
        lower = h[1:]
        lm.probs[h] = {c: lam * n / total + (1 - lam) * lm.prob(c, lower) for c, n in cs.items()}
        lm.backoff[h] = 1 - lam
    return lm


def compile_lm(lm: NGramLm) -> Wfst:
    """Acceptor over symbol ids whose path weight is -log P(y), EOS included.

    States are the contexts seen in training.  Seen symbols get direct
    arcs, unseen ones are reached through an epsilon arc to the next shorter
    context carrying the backoff weight.  In the tropical semiring this is
    exact for strings whose n-grams were all seen; the epsilon route also
    offers the seen symbols again, which the log semiring would overcount.
    """
    size = max(lm.vocab, default=0) + 1
    m = Wfst(size)
    contexts = sorted(lm.probs, key=lambda h: (len(h), h))
    state = {h: m.add_state() for h in contexts}
    start = (BOS,) if lm.order > 1 and (BOS,) in state else ()
    m.set_start(state[start])
    n1 = lm.order - 1

    def next_state(h: tuple, c: int) -> int:
        nh = (h + (c,))[-n1:] if n1 > 0 else ()
        while nh not in state:
            nh = nh[1:]
        return state[nh]

    for h in contexts:
        q = state[h]
        for c, p in sorted(lm.probs[h].items()):
            if p <= 0:
                continue
            if c == EOS:
                m.set_final(q, -math.log(p))
            else:
                m.add_arc(q, c, c, -math.log(p), next_state(h, c))
        if h:
            b = lm.backoff.get(h, 0.0)
            if b > 0:
                m.add_arc(q, EPS, EPS, -math.log(b), state[h[1:]])
    return m


def _sym(c: int, symbol) -> str:
    if c == BOS:
        return "<s>"
    if c == EOS:
        return "</s>"
    if symbol is None:
        return str(c)
    return symbol(c)


def to_arpa(lm: NGramLm, symbol=None) -> str:
    """ARPA-style listing with log10 probabilities and backoff weights.

    ``symbol`` maps ids to printable tokens; defaults to the decimal id.
    """
    by_order: dict[int, list[tuple]] = defaultdict(list)
    for h, table in lm.probs.items():
        for c, p in table.items():
            by_order[len(h) + 1].append((h + (c,), p))
    # <s> is never predicted but needs a unigram line to carry its backoff.
    if lm.order > 1 and (BOS,) in lm.probs:
        by_order[1].append(((BOS,), 0.0))
    lines = [f"# smoothing={lm.smoothing}", "", "\\data\\"]
    for k in sorted(by_order):
        lines.append(f"ngram {k}={len(by_order[k])}")
    for k in sorted(by_order):
        lines += ["", f"\\{k}-grams:"]
        for ngram, p in sorted(by_order[k], key=lambda e: e[0]):
            lp = f"{math.log10(p):.10g}" if p > 0 else "-99"
            fields = [lp, " ".join(_sym(c, symbol) for c in ngram)]
            b = lm.backoff.get(ngram)
            if b is not None and k < lm.order:
                fields.append(f"{math.log10(b):.10g}" if b > 0 else "-99")
            lines.append("\t".join(fields))
    lines += ["", "\\end\\", ""]
    return "\n".join(lines)


def read_arpa(path, parse=None) -> NGramLm:
    """Inverse of :func:`to_arpa`; ``parse`` maps tokens back to ids."""
    text = Path(path).read_text(encoding="utf-8")
    smoothing = WITTEN_BELL
    probs: dict[tuple, dict[int, float]] = defaultdict(dict)
    backoff: dict[tuple, float] = {}
    order = 0
    section = None
    vocab: set[int] = set()

    def tok(t: str) -> int:
        if t == "<s>":
            return BOS
        if t == "</s>":
            return EOS
        return parse(t) if parse is not None else int(t)

    for line in text.splitlines():
        if line.startswith("# smoothing="):
            smoothing = line.split("=", 1)[1]
            continue
        if not line.strip() or line.startswith("ngram ") or line == "\\data\\":
            continue
        if line == "\\end\\":
            break
        if line.startswith("\\") and line.endswith("-grams:"):
            section = int(line[1:line.index("-")])
            order = max(order, section)
            continue
        fields = line.split("\t")
        ngram = tuple(tok(t) for t in fields[1].split(" "))
        p = 0.0 if fields[0] == "-99" else 10 ** float(fields[0])
        if ngram != (BOS,):
            probs[ngram[:-1]][ngram[-1]] = p
            if ngram[-1] >= 0:
                vocab.add(ngram[-1])
        if len(fields) > 2:
            backoff[ngram] = 0.0 if fields[2] == "-99" else 10 ** float(fields[2])
    backoff.setdefault((), 0.0)
    if (BOS,) in backoff:
        probs.setdefault((BOS,), {})
    return NGramLm(order=order, vocab=sorted(vocab), probs=dict(probs), backoff=backoff,
                   smoothing=smoothing)
