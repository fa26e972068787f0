"""Error rates, BLEU-4 and error-analysis tables."""

from __future__ import annotations

import csv
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

EPS = ""  # alignment placeholder for a missing symbol

SUB, INS, DEL, MATCH = "sub", "ins", "del", "match"


class EvalError(ValueError):
    pass


def edit_distance(h: Sequence, r: Sequence) -> int:
    """Unit-cost Levenshtein distance."""
    prev = list(range(len(r) + 1))
    for i, hc in enumerate(h, 1):
        cur = [i] + [0] * len(r)
        for j, rc in enumerate(r, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (hc != rc))
        prev = cur
    return prev[-1]


def error_rate(h: Sequence, r: Sequence) -> float:
    if len(r) == 0:
        raise EvalError("error rate is undefined for an empty reference")
    return edit_distance(h, r) / len(r)


def cer(h: str, r: str) -> float:
    """Character error rate: edit distance over reference length."""
    return error_rate(list(h), list(r))


def wer(h: str, r: str) -> float:
    return error_rate(word_tokenize(h), word_tokenize(r))


def _is_word_char(ch: str) -> bool:
    cat = unicodedata.category(ch)
    return cat[0] in "LNM" or ch == "\ufffd" or cat == "Cf"


_JOINERS = {"-", "'", "’", "‐", "‑"}


def word_tokenize(s: str) -> list[str]:
    """Whitespace split, with punctuation runs detached from words.

    Hyphens and apostrophes stay inside a word when both neighbours are word
    characters ("bor'by", "e-mail").
    """
    tokens = []
    for chunk in s.split():
        cur = ""
        cur_word = None
        for i, ch in enumerate(chunk):
            if _is_word_char(ch):
                is_word = True
            elif (ch in _JOINERS and 0 < i < len(chunk) - 1
                  and _is_word_char(chunk[i - 1]) and _is_word_char(chunk[i + 1])):
                is_word = True
            else:
                is_word = False
            if cur and is_word != cur_word:
                tokens.append(cur)
                cur = ""
            cur += ch
            cur_word = is_word
        if cur:
            tokens.append(cur)
    return tokens


def align(h: Sequence, r: Sequence) -> list[tuple]:
    """Minimum-cost alignment as (ref item or EPS, hyp item or EPS) pairs.

    Traceback prefers substitution/match, then deletion (reference item
    without a hypothesis counterpart), then insertion.
    """
    n, m = len(r), len(h)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i][j] = min(D[i - 1][j - 1] + (r[i - 1] != h[j - 1]), D[i - 1][j] + 1, D[i][j - 1] + 1)
    out = []
    i, j = n, m
    while i or j:
        if i and j and D[i][j] == D[i - 1][j - 1] + (r[i - 1] != h[j - 1]):
            out.append((r[i - 1], h[j - 1]))
            i, j = i - 1, j - 1
        elif i and D[i][j] == D[i - 1][j] + 1:
            out.append((r[i - 1], EPS))
            i -= 1
        else:
            out.append((EPS, h[j - 1]))
            j -= 1
    out.reverse()
    return out


def align_chars(h: str, r: str) -> list[tuple[str, str]]:
    return align(list(h), list(r))


def op_of(pair: tuple) -> str:
    ref, hyp = pair
    if ref == EPS:
        return INS
    if hyp == EPS:
        return DEL
    return MATCH if ref == hyp else SUB


def edit_counts(alignment: Iterable[tuple]) -> Counter:
    counts = Counter({SUB: 0, INS: 0, DEL: 0, MATCH: 0})
    for pair in alignment:
        counts[op_of(pair)] += 1
    return counts


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hyps: Sequence[str], refs: Sequence[str]) -> float:
    """Corpus BLEU-4 in [0, 100] over :func:`word_tokenize` tokens, unsmoothed."""
    if len(hyps) != len(refs):
        raise EvalError(f"{len(hyps)} hypotheses but {len(refs)} references")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = word_tokenize(h), word_tokenize(r)
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, 5):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(0, len(ht) - n + 1)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


@dataclass
class ConfusionMatrix:
    """Counts of aligned (reference char, hypothesis char) pairs; EPS marks gaps."""

    counts: Counter = field(default_factory=Counter)

    def add(self, alignment: Iterable[tuple]) -> None:
        self.counts.update(alignment)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def row_sums(self) -> Counter:
        rows: Counter = Counter()
        for (ref, _), n in self.counts.items():
            rows[ref] += n
        return rows

    def rows(self) -> list[str]:
        return sorted({ref for ref, _ in self.counts})

    def cols(self) -> list[str]:
        return sorted({hyp for _, hyp in self.counts})

    def is_diagonal(self) -> bool:
        return all(ref == hyp for ref, hyp in self.counts)


HIST_EDGES = tuple(k / 10 for k in range(11))


@dataclass
class WordCerHistogram:
    """Per-word CER counts: one bin for exactly 0, tenths up to 1.0, and an overflow bin.

    Hypothesis words aligned to nothing (pure insertions) count as overflow.
    """

    edges: tuple = HIST_EDGES
    counts: list = field(default_factory=lambda: [0] * (len(HIST_EDGES) + 1))

    def labels(self) -> list[str]:
        out = ["0"]
        for lo, hi in zip(self.edges[:-1], self.edges[1:]):
            out.append(f"({lo:g},{hi:g}]")
        out.append(f">{self.edges[-1]:g}")
        return out

    def add(self, value: Optional[float]) -> None:
        if value is None or value > self.edges[-1]:
            self.counts[-1] += 1
        elif value == 0:
            self.counts[0] += 1
        else:
            k = 1
            while value > self.edges[k]:
                k += 1
            self.counts[k] += 1

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass
class EvalReport:
    cer: float
    wer: float
    bleu: float
    char_edits: dict
    word_edits: dict
    insdel_share: float
    n_sentences: int


@dataclass
class ErrorProfile:
    report: EvalReport
    confusion: ConfusionMatrix
    histogram: WordCerHistogram
    subst_types: list  # ((ref word, hyp word), count), most frequent first
    subst_coverage: float
    invocab_rate: Optional[float]
    aligned_positions: int
    word_pairs: int


def evaluate(hyps: Sequence[str], refs: Sequence[str]) -> EvalReport:
    return error_profile(list(zip(hyps, refs))).report


def error_profile(pairs: Sequence[tuple[str, str]], train_vocab: Optional[set] = None,
                  top_k: int = 1000) -> ErrorProfile:
    """Corpus metrics and error-analysis tables for (hypothesis, reference) pairs."""
    if not pairs:
        raise EvalError("error_profile needs at least one (hypothesis, reference) pair")
    confusion = ConfusionMatrix()
    histogram = WordCerHistogram()
    char_ops: Counter = Counter({SUB: 0, INS: 0, DEL: 0})
    word_ops: Counter = Counter({SUB: 0, INS: 0, DEL: 0})
    subst: Counter = Counter()
    char_dist = char_len = word_dist = word_len = 0
    positions = word_pairs = 0
    hyp_words = invocab = 0
    for h, r in pairs:
        ca = align_chars(h, r)
        confusion.add(ca)
        positions += len(ca)
        cc = edit_counts(ca)
        for op in (SUB, INS, DEL):
            char_ops[op] += cc[op]
        char_dist += cc[SUB] + cc[INS] + cc[DEL]
        char_len += len(r)
        hw, rw = word_tokenize(h), word_tokenize(r)
        wa = align(hw, rw)
        wc = edit_counts(wa)
        for op in (SUB, INS, DEL):
            word_ops[op] += wc[op]
        word_dist += wc[SUB] + wc[INS] + wc[DEL]
        word_len += len(rw)
        for ref_w, hyp_w in wa:
            word_pairs += 1
            histogram.add(None if ref_w == EPS else cer(hyp_w, ref_w))
            if op_of((ref_w, hyp_w)) == SUB:
                subst[(ref_w, hyp_w)] += 1
        if train_vocab is not None:
            hyp_words += len(hw)
            invocab += sum(w in train_vocab for w in hw)
    ranked = sorted(subst.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) > top_k:
        cutoff = ranked[top_k - 1][1]
        ranked = [kv for kv in ranked if kv[1] >= cutoff]
    n_subst = sum(subst.values())
    coverage = sum(n for _, n in ranked) / n_subst if n_subst else 0.0
    edits = sum(char_ops.values())
    report = EvalReport(
        cer=char_dist / char_len if char_len else math.inf,
        wer=word_dist / word_len if word_len else math.inf,
        bleu=bleu4([h for h, _ in pairs], [r for _, r in pairs]),
        char_edits=dict(char_ops),
        word_edits=dict(word_ops),
        insdel_share=(char_ops[INS] + char_ops[DEL]) / edits if edits else 0.0,
        n_sentences=len(pairs),
    )
    return ErrorProfile(
        report=report, confusion=confusion, histogram=histogram, subst_types=ranked,
        subst_coverage=coverage,
        invocab_rate=(invocab / hyp_words if hyp_words else None) if train_vocab is not None else None,
        aligned_positions=positions, word_pairs=word_pairs,
    )


def substitution_entropy(emit, row_ids: Optional[Iterable[int]] = None) -> dict:
    """Entropy (nats) of each emission row, e.g. of a trained channel."""
    rows = range(1, len(emit)) if row_ids is None else row_ids
    out = {}
    for c in rows:
        p = [float(v) for v in emit[c] if v > 0]
        out[c] = -sum(v * math.log(v) for v in p)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _show(sym: str) -> str:
    if sym == EPS:
        return "<eps>"
    if sym == " ":
        return "<space>"
    return sym


def write_report(profile: ErrorProfile, outdir, extra_metrics: Optional[dict] = None,
                 name: str = "") -> dict[str, Path]:
    """Write metrics.csv, confusion.csv, histogram.csv, subst_types.csv and summary.txt."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    prefix = f"{name}." if name else ""
    paths = {k: outdir / f"{prefix}{k}" for k in
             ("metrics.csv", "confusion.csv", "histogram.csv", "subst_types.csv", "summary.txt")}
    rep = profile.report
    metrics = {
        "cer": rep.cer, "wer": rep.wer, "bleu": rep.bleu,
        "char_sub": rep.char_edits[SUB], "char_ins": rep.char_edits[INS],
        "char_del": rep.char_edits[DEL],
        "word_sub": rep.word_edits[SUB], "word_ins": rep.word_edits[INS],
        "word_del": rep.word_edits[DEL],
        "insdel_share": rep.insdel_share,
        "subst_coverage": profile.subst_coverage,
        "invocab_rate": profile.invocab_rate if profile.invocab_rate is not None else "",
        "sentences": rep.n_sentences,
    }
    metrics.update(extra_metrics or {})
    with open(paths["metrics.csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, _fmt(v)])
    with open(paths["confusion.csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["reference", "hypothesis", "count"])
        for (ref, hyp), n in sorted(profile.confusion.counts.items()):
            w.writerow([_show(ref), _show(hyp), n])
    with open(paths["histogram.csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin", "count"])
        for label, n in zip(profile.histogram.labels(), profile.histogram.counts):
            w.writerow([label, n])
    with open(paths["subst_types.csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["reference", "hypothesis", "count"])
        for (ref, hyp), n in profile.subst_types:
            w.writerow([ref, hyp, n])
    lines = [
        f"sentences\t{rep.n_sentences}",
        f"CER\t{_fmt(rep.cer)}",
        f"WER\t{_fmt(rep.wer)}",
        f"BLEU\t{_fmt(rep.bleu)}",
        "char edits\t" + " ".join(f"{k}={rep.char_edits[k]}" for k in (SUB, INS, DEL)),
        "word edits\t" + " ".join(f"{k}={rep.word_edits[k]}" for k in (SUB, INS, DEL)),
        f"ins+del share of char edits\t{_fmt(rep.insdel_share)}",
        f"top substitution types coverage\t{_fmt(profile.subst_coverage)}",
    ]
    if profile.invocab_rate is not None:
        lines.append(f"in-vocabulary rate\t{_fmt(profile.invocab_rate)}")
    paths["summary.txt"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths
