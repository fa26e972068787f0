"""Script-conversion emission transducer with Dirichlet priors.

The channel reads a target-script string and writes a source-script string.
At every step it either inserts a source character (probability
``p_insert``, character drawn from ``ins``) or consumes the next target
character ``c`` and emits ``o`` with probability ``emit[c, o]``, where column
0 of ``emit`` is the deletion (epsilon output).  A bounded delay keeps
``|#insertions - #deletions| <= d`` on every prefix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .corpus import EPS, Alphabet
from .fst import Arc, Wfst

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DEFAULT_BASE = 0.01
DEFAULT_BOOST = 1.0


class ChannelError(ValueError):
    pass


@dataclass
class EmissionParams:
    """Channel multinomials.

    emit : (T, S) array; row c is the distribution of target id c over
        source ids, column 0 standing for deletion.  Row 0 is unused.
    ins : (S,) insertion distribution over source ids (entry 0 unused).
    p_insert : mixing weight of the insertion branch.
    """

    emit: np.ndarray
    ins: np.ndarray
    p_insert: float

    @property
    def target_size(self) -> int:
        return self.emit.shape[0]

    @property
    def source_size(self) -> int:
        return self.emit.shape[1]

    def sub_weights(self) -> np.ndarray:
        """Neg-log weights of consume-operations, shape (T, S), column 0 = delete."""
        with np.errstate(divide="ignore"):
            w = -np.log(self.emit * (1.0 - self.p_insert))
        w[0, :] = np.inf
        return w

    def ins_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            w = -np.log(self.ins * self.p_insert)
        w[0] = np.inf
        return w

    def argmax_rows(self) -> np.ndarray:
        """Most probable source id per target row (0 = delete); row 0 is -1."""
        best = self.emit.argmax(axis=1)
        best[0] = -1
        return best

    def validate(self) -> None:
        rows = self.emit[1:]
        if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
            raise ChannelError("emission rows must sum to 1")
        if not math.isclose(self.ins[1:].sum(), 1.0, abs_tol=1e-9):
            raise ChannelError("insertion distribution must sum to 1")
        if (rows <= 0).any() or (self.ins[1:] <= 0).any() or not 0 < self.p_insert < 1:
            raise ChannelError("channel probabilities must be strictly positive")


@dataclass
class OpCounts:
    """Expected operation counts in the same layout as :class:`EmissionParams`.

    ``mix`` holds (insertions, consume operations).
    """

    emit: np.ndarray
    ins: np.ndarray
    mix: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def zeros(cls, target_size: int, source_size: int) -> "OpCounts":
        return cls(np.zeros((target_size, source_size)), np.zeros(source_size), np.zeros(2))

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(self.emit + other.emit, self.ins + other.ins, self.mix + other.mix)

    def scale(self, factor: float) -> "OpCounts":
        return OpCounts(self.emit * factor, self.ins * factor, self.mix * factor)

    def as_dict(self) -> dict:
        """Nonzero counts keyed by ('sub', c, o), ('del', c) and ('ins', o)."""
        out = {}
        for c, o in zip(*np.nonzero(self.emit)):
            key = ("del", int(c)) if o == 0 else ("sub", int(c), int(o))
            out[key] = float(self.emit[c, o])
        for o in np.nonzero(self.ins)[0]:
            out[("ins", int(o))] = float(self.ins[o])
        return out


@dataclass
class PriorSpec:
    """Dirichlet pseudocounts; listed (target id, source id) pairs override ``base``."""

    pairs: list[tuple[int, int, float]]
    base: float = DEFAULT_BASE

    def __post_init__(self):
        if self.base <= 0 or any(a <= 0 for _, _, a in self.pairs):
            raise ChannelError("pseudocounts must be positive")

    def matrices(self, target_size: int, source_size: int):
        """Pseudocount arrays (emit, ins, mix) shaped like the parameters."""
        emit = np.full((target_size, source_size), self.base)
        emit[0, :] = 0.0
        for c, o, a in self.pairs:
            emit[c, o] = a
        ins = np.full(source_size, self.base)
        ins[0] = 0.0
        mix = np.full(2, self.base)
        return emit, ins, mix


def read_pairs(path) -> list[tuple[str, str, Optional[float]]]:
    """Parse a priors TSV: ``target<TAB>source[<TAB>pseudocount]``, ``#`` comments."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise ChannelError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        weight = float(fields[2]) if len(fields) == 3 and fields[2].strip() else None
        pairs.append((fields[0], fields[1], weight))
    return pairs


def build_prior(target: Alphabet, source: Alphabet, pair_lists: Iterable = (),
                base: float = DEFAULT_BASE, boost: float = DEFAULT_BOOST,
                identical: bool = True) -> PriorSpec:
    """Collect similarity pairs into a :class:`PriorSpec`.

    ``pair_lists`` holds lists of (target char, source char[, pseudocount])
    tuples, e.g. phonetic-keyboard and confusable pairs; paths are read with
    :func:`read_pairs`.  Pairs without an explicit pseudocount get ``boost``.
    With ``identical``, every character present in both alphabets is paired
    with itself.  Characters outside the alphabets are skipped with a warning.
    """
    chosen: dict[tuple[int, int], float] = {}
    if identical:
        for ch in target.symbols[2:]:
            if ch in source:
                chosen[(target.id(ch), source.id(ch))] = boost
        chosen[(1, 1)] = boost  # UNK maps to UNK
    for pairs in pair_lists:
        if isinstance(pairs, (str, Path)):
            pairs = read_pairs(pairs)
        for entry in pairs:
            t, s = entry[0], entry[1]
            a = entry[2] if len(entry) > 2 and entry[2] is not None else boost
            t, s = t.lower(), s.lower()
            if t not in target or s not in source:
                logger.warning("prior pair (%r, %r) is outside the alphabets; skipped", t, s)
                continue
            chosen[(target.id(t), source.id(s))] = a
    return PriorSpec(pairs=[(c, o, a) for (c, o), a in sorted(chosen.items())], base=base)


def prior_mean(prior: PriorSpec, target_size: int, source_size: int) -> EmissionParams:
    emit, ins, mix = prior.matrices(target_size, source_size)
    emit = emit.copy()
    emit[1:] /= emit[1:].sum(axis=1, keepdims=True)
    ins = ins / ins.sum()
    return EmissionParams(emit=emit, ins=ins, p_insert=float(mix[0] / mix.sum()))


def _map_row(counts: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    raw = counts + alpha - 1.0
    if not (raw > 0).any():
        return alpha / alpha.sum()
    p = np.maximum(raw, PROB_FLOOR)
    return p / p.sum()


def map_update(counts: OpCounts, prior: PriorSpec) -> EmissionParams:
    """MAP estimate of every multinomial under its Dirichlet prior.

    Each entry gets count + alpha - 1, clipped below at ``PROB_FLOOR`` and
    renormalized; a row with no positive mass falls back to the prior mean.
    """
    if (counts.emit < 0).any() or (counts.ins < 0).any() or (counts.mix < 0).any():
        raise ChannelError("expected counts must be non-negative")
    T, S = counts.emit.shape
    a_emit, a_ins, a_mix = prior.matrices(T, S)
    emit = np.zeros((T, S))
    for c in range(1, T):
        emit[c] = _map_row(counts.emit[c], a_emit[c])
    ins = np.zeros(S)
    ins[1:] = _map_row(counts.ins[1:], a_ins[1:])
    mix = _map_row(counts.mix, a_mix)
    return EmissionParams(emit=emit, ins=ins, p_insert=float(mix[0]))


class ChannelFst(Wfst):
    """Channel transducer that remembers the parameters it was built from.

    Arcs are materialized on first access; the cascade decoder in
    :mod:`uct.em` reads ``params`` and ``delay`` directly instead.
    """

    def __init__(self, params: EmissionParams, delay: int):
        T, S = params.emit.shape
        super().__init__(T, S)
        self.params = params
        self.delay = delay
        self._arcs = None
        self.start = delay
        self.finals = {q: 0.0 for q in range(2 * delay + 1)}

    @property
    def arcs(self):
        if self._arcs is None:
            self._arcs = self._build_arcs()
        return self._arcs

    @arcs.setter
    def arcs(self, value):
        self._arcs = value

    @property
    def num_states(self) -> int:
        return 2 * self.delay + 1

    def add_state(self) -> int:
        raise ChannelError("channel topology is fixed")

    def _build_arcs(self) -> list:
        d = self.delay
        T, S = self.params.emit.shape
        sub_w = self.params.sub_weights()
        ins_w = self.params.ins_weights()
        arcs: list[list[Arc]] = []
        for q in range(2 * d + 1):
            out = [Arc(c, o, float(sub_w[c, o]), q) for c in range(1, T) for o in range(1, S)]
            if q > 0:
                out += [Arc(c, EPS, float(sub_w[c, 0]), q - 1) for c in range(1, T)]
            if q < 2 * d:
                out += [Arc(EPS, o, float(ins_w[o]), q + 1) for o in range(1, S)]
            arcs.append(out)
        return arcs


def build_channel(params: EmissionParams, delay: int) -> ChannelFst:
    """Bounded-delay channel with one state per delay value in [-d, d].

    State ``q`` has delay ``q - d``; the start state has delay 0.  Input
    labels are target ids, output labels source ids.  Substitutions keep
    the delay, insertions (eps:o) raise it, deletions (c:eps) lower it;
    moves that would leave [-d, d] have no arc.  Every state is final.
    """
    if delay < 0:
        raise ChannelError(f"delay bound must be >= 0, got {delay}")
    return ChannelFst(params, delay)


def write_params(path, params: EmissionParams, target: Alphabet, source: Alphabet,
                 header: Optional[dict] = None) -> None:
    """Checkpoint TSV: ``target_char<TAB>op<TAB>arg<TAB>prob`` after ``#`` metadata."""

    def show(alpha: Alphabet, i: int) -> str:
        return "<unk>" if i == 1 else f"U+{ord(alpha.symbol(i)):04X}"

    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append(f"# p_insert={float(params.p_insert)!r}")
    for c in range(1, params.target_size):
        for o in range(params.source_size):
            op, arg = ("del", "-") if o == 0 else ("sub", show(source, o))
            lines.append(f"{show(target, c)}\t{op}\t{arg}\t{float(params.emit[c, o])!r}")
    for o in range(1, params.source_size):
        lines.append(f"-\tins\t{show(source, o)}\t{float(params.ins[o])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_params(path, target: Alphabet, source: Alphabet) -> tuple[EmissionParams, dict]:
    def parse(alpha: Alphabet, tok: str) -> int:
        return 1 if tok == "<unk>" else alpha.id(chr(int(tok[2:], 16)))

    emit = np.zeros((len(target), len(source)))
    ins = np.zeros(len(source))
    header: dict[str, str] = {}
    p_insert = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "p_insert":
                p_insert = float(value)
            else:
                header[key] = value
            continue
        t, op, arg, p = line.split("\t")
        if op == "ins":
            ins[parse(source, arg)] = float(p)
        elif op == "del":
            emit[parse(target, t), 0] = float(p)
        else:
            emit[parse(target, t), parse(source, arg)] = float(p)
    if p_insert is None:
        raise ChannelError(f"{path}: missing p_insert header")
    return EmissionParams(emit=emit, ins=ins, p_insert=p_insert), header
