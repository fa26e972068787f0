"""Synthetic substitution-cipher data with a known generating language model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

TARGET_LETTERS = "абвгдежзиклмно"
SOURCE_LETTERS = "abcdefghijklmn"


@dataclass
class CipherData:
    cipher: dict[str, str]  # target char -> source char
    train_source: list[str]
    train_target: list[str]
    valid_source: list[str]
    valid_target: list[str]
    test_source: list[str]
    test_target: list[str]


class TrigramSource:
    """Random order-3 character model over the letters plus space.

    Each two-character context gets a sparse Dirichlet draw over the next
    character.  Spaces never repeat and never start or end a sentence, so
    generated text splits cleanly into words.
    """

    def __init__(self, symbols: str, rng: np.random.Generator, concentration: float = 0.15):
        self.symbols = symbols
        V = len(symbols)
        self.table = rng.dirichlet(np.full(V, concentration), size=(V + 1, V + 1))
        self.space = symbols.index(" ") if " " in symbols else -1

    def sample(self, length: int, rng: np.random.Generator) -> str:
        V = len(self.symbols)
        a = b = V  # boundary context
        out = []
        while len(out) < length:
            p = self.table[a, b].copy()
            if self.space >= 0 and (b == self.space or b == V or len(out) >= length - 1):
                p[self.space] = 0.0
            p /= p.sum()
            c = int(rng.choice(V, p=p))
            out.append(self.symbols[c])
            a, b = b, c
        return "".join(out)


def make_cipher_data(n_train: int = 1000, n_valid: int = 50, n_test: int = 100,
                     min_len: int = 8, max_len: int = 24, seed: int = 0,
                     letters: str = TARGET_LETTERS, source_letters: str = SOURCE_LETTERS,
                     concentration: float = 0.15) -> CipherData:
    """Non-parallel training halves plus parallel validation and test sets.

    Target text comes from one random trigram source; the source side is the
    same kind of text passed through a random letter bijection, with space
    mapped to itself.  The training halves are drawn independently.
    """
    rng = np.random.default_rng(seed)
    gen = TrigramSource(letters + " ", rng, concentration)
    perm = rng.permutation(len(source_letters))
    cipher = {t: source_letters[perm[i]] for i, t in enumerate(letters)}
    cipher[" "] = " "

    def draw(n):
        return [gen.sample(int(rng.integers(min_len, max_len + 1)), rng) for _ in range(n)]

    def encipher(lines):
        return ["".join(cipher[c] for c in line) for line in lines]

    train_target = draw(n_train)
    train_plain = draw(n_train)
    valid = draw(n_valid)
    test = draw(n_test)
    return CipherData(cipher=cipher, train_source=encipher(train_plain), train_target=train_target,
                      valid_source=encipher(valid), valid_target=valid,
                      test_source=encipher(test), test_target=test)


def write_fixture(data: CipherData, outdir, priors: list[tuple[str, str]] = ()) -> dict[str, Path]:
    """Write the corpora (and an optional priors TSV) as one-sentence-per-line files."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {
        "train_source": data.train_source,
        "train_target": data.train_target,
        "valid_source": data.valid_source,
        "valid_target": data.valid_target,
        "test_source": data.test_source,
        "test_target": data.test_target,
    }
    paths = {}
    for name, lines in files.items():
        path = outdir / f"{name}.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths[name] = path
    if priors:
        path = outdir / "priors.tsv"
        path.write_text("".join(f"{t}\t{s}\n" for t, s in priors), encoding="utf-8")
        paths["priors"] = path
    return paths


FIXTURE_CONFIG = """\
# Synthetic substitution-cipher experiment.
[paths]
train_source = train_source.txt
train_target = train_target.txt
valid_source = valid_source.txt
valid_target = valid_target.txt
test_source = test_source.txt
test_target = test_target.txt
output_dir = run

[alphabet]
coverage = 1.0

[lm]
order = 3

[channel]
delay = 1
prior_base = 1.0
prior_boost = 20.0

[em]
minibatch = 100
epochs = 12
seed = {seed}

[neural]
seed = {seed}

[decode]
decoder = wfst
poe_threshold = 8.0
"""


def write_fixture_config(outdir, seed: int = 0) -> Path:
    """Generate the cipher corpora plus a ready-to-run ``config.ini``; returns the config path."""
    outdir = Path(outdir)
    write_fixture(make_cipher_data(seed=seed), outdir)
    path = outdir / "config.ini"
    path.write_text(FIXTURE_CONFIG.format(seed=seed), encoding="utf-8")
    return path
