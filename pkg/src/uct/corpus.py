"""Character tokenization, alphabet induction and UNK filtering."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

logger = logging.getLogger(__name__)

EPS = 0
UNK = 1
EPS_SYMBOL = ""
# Rendering of UNK in text; never a key of the alphabet index.
UNK_CHAR = "\ufffd"

ROLES = ("train-source", "train-target", "validation", "test")


class CorpusError(ValueError):
    pass


class Alphabet:
    """Ordered symbol table over codepoints.

    Ids 0 and 1 are reserved for epsilon and UNK; every other id maps to a
    single-codepoint string.
    """

    def __init__(self, symbols: Iterable[str] = ()):
        self.symbols: list[str] = [EPS_SYMBOL, UNK_CHAR]
        self.index: dict[str, int] = {}
        for sym in symbols:
            self.add(sym)

    def add(self, sym: str) -> int:
        if len(sym) != 1 or sym == UNK_CHAR:
            raise CorpusError(f"alphabet symbols must be single codepoints, got {sym!r}")
        if sym not in self.index:
            self.index[sym] = len(self.symbols)
            self.symbols.append(sym)
        return self.index[sym]

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Alphabet) and self.symbols == other.symbols

    def __repr__(self) -> str:
        return f"Alphabet({''.join(self.symbols[2:])!r})"

    def id(self, sym: str) -> int:
        return self.index.get(sym, UNK)

    def symbol(self, i: int) -> str:
        return self.symbols[i]

    @property
    def ids(self) -> range:
        """Ids of real symbols (UNK included, epsilon excluded)."""
        return range(1, len(self.symbols))

    def save(self, path) -> None:
        lines = ["<eps>", "<unk>"] + [f"U+{ord(s):04X}" for s in self.symbols[2:]]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Alphabet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != ["<eps>", "<unk>"]:
            raise CorpusError(f"{path}: first two lines must be the <eps> and <unk> sentinels")
        symbols = []
        for lineno, line in enumerate(lines[2:], start=3):
            if not line.startswith("U+"):
                raise CorpusError(f"{path}:{lineno}: expected U+XXXX, got {line!r}")
            symbols.append(chr(int(line[2:], 16)))
        return cls(symbols)


@dataclass
class Sequence:
    """Tokenized sentence.

    ``tokens`` holds one codepoint string per character; characters replaced
    by UNK are rendered as U+FFFD.  ``ids`` carries alphabet ids once an
    alphabet has been applied.
    """

    tokens: list[str]
    raw: str
    ids: Optional[list[int]] = None

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return "".join(self.tokens)


@dataclass
class CorpusSplit:
    role: str
    sequences: list[Sequence] = field(default_factory=list)
    partner: Optional["CorpusSplit"] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise CorpusError(f"unknown split role {self.role!r}")
        if self.partner is not None and len(self.partner.sequences) != len(self.sequences):
            raise CorpusError(
                f"parallel {self.role} split has {len(self.sequences)} lines "
                f"but its partner has {len(self.partner.sequences)}"
            )


def tokenize(text) -> Sequence:
    """Lowercase ``text`` and split it into codepoints.

    Combining marks and format characters such as ZWJ come out as separate
    tokens; no normalization is applied.  ``text`` may be ``bytes``, in which
    case it is decoded as UTF-8.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorpusError(f"invalid UTF-8 at byte offset {e.start}: {e.reason}") from e
    lowered = text.lower()
    return Sequence(tokens=list(lowered), raw=text)


def detokenize(seq: Sequence, keep_unk: bool = False) -> str:
    """Join tokens back into a string, dropping UNK unless ``keep_unk``."""
    if keep_unk:
        return "".join(seq.tokens)
    return "".join(t for t in seq.tokens if t != UNK_CHAR)


def from_ids(ids, alphabet: Alphabet) -> Sequence:
    ids = [i for i in ids if i != EPS]
    tokens = [alphabet.symbol(i) for i in ids]
    return Sequence(tokens=tokens, raw="".join(tokens), ids=ids)


def to_ids(seq: Sequence, alphabet: Alphabet) -> list[int]:
    return [alphabet.id(t) for t in seq.tokens]


def induce_alphabet(train: list[Sequence], coverage: float = 0.99,
                    standard_addbacks: Iterable[str] = ()) -> Alphabet:
    """Smallest frequency-ranked set of characters covering ``coverage`` of tokens.

    Characters tied in frequency with the last one needed are all kept.  The
    add-back characters are appended afterwards.
    """
    if not 0 < coverage <= 1:
        raise CorpusError(f"coverage must be in (0, 1], got {coverage}")
    counts = Counter(tok for seq in train for tok in seq.tokens)
    total = sum(counts.values())
    if total == 0:
        raise CorpusError("cannot induce an alphabet from an empty corpus")

    # Sort by descending frequency, then by codepoint for determinism.
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = []
    cumulative = 0
    cutoff = None
    for ch, n in ranked:
        if cutoff is not None and n < cutoff:
            break
        kept.append(ch)
        cumulative += n
        # Float products like 0.99 * 100 are not exact, so compare with a margin.
        if cutoff is None and cumulative >= coverage * total - 1e-9 * total:
            cutoff = n
    alphabet = Alphabet(kept)
    for ch in sorted(set(standard_addbacks)):
        if ch not in alphabet:
            alphabet.add(ch)
    return alphabet


def apply_unk(seq: Sequence, alphabet: Alphabet, is_target_test: bool = False) -> Sequence:
    """Replace out-of-alphabet characters with UNK and attach alphabet ids.

    The target side of the test split is scored against untouched
    references, so with ``is_target_test`` the tokens are returned as they
    are (``ids`` still shows the alphabet view).
    """
    ids = [alphabet.id(t) for t in seq.tokens]
    if is_target_test:
        return Sequence(tokens=list(seq.tokens), raw=seq.raw, ids=ids)
    tokens = [UNK_CHAR if i == UNK else t for i, t in zip(ids, seq.tokens)]
    return Sequence(tokens=tokens, raw=seq.raw, ids=ids)


def read_lines(path) -> list[Sequence]:
    """Read a one-sentence-per-line UTF-8 file into tokenized sequences."""
    data = Path(path).read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusError(f"{path}: invalid UTF-8 at byte offset {e.start}") from e
    return [tokenize(line) for line in text.splitlines()]


def read_addbacks(path) -> set[str]:
    """Add-back file: characters listed one per line or run together; ``#`` starts a comment."""
    chars: set[str] = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            continue
        for tok in line.split():
            if tok.startswith("U+"):
                chars.add(chr(int(tok[2:], 16)))
            else:
                chars.update(tok.lower())
    return chars
