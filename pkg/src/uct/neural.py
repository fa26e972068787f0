"""Character-level encoder-decoder with attention, trained without parallel data.

One model serves both translation directions.  Source- and target-domain
characters share a vocabulary (identical codepoints share an embedding) and
the requested output domain is signalled by a tag token that starts both the
encoder input and the decoder.  Outputs are masked to the output domain's
alphabet plus end-of-sequence.

Distributions handed to other modules are indexed by alphabet id, with
index 0 (epsilon in the alphabet) standing for end-of-sequence.
"""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import Alphabet

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
FORWARD = (SOURCE, TARGET)
BACKWARD = (TARGET, SOURCE)

PAD, EOS, TAG_SOURCE, TAG_TARGET, JOINT_UNK = range(5)
_SPECIALS = ["<pad>", "</s>", "<2source>", "<2target>", "<unk>"]

CHECKPOINT_VERSION = 1


class NeuralError(RuntimeError):
    pass


@dataclass
class NoiseConfig:
    drop_prob: float = 0.1
    shuffle_window: int = 3

    def __post_init__(self):
        if not 0 <= self.drop_prob < 1:
            raise NeuralError(f"drop probability must be in [0, 1), got {self.drop_prob}")
        if self.shuffle_window < 1:
            raise NeuralError(f"shuffle window must be >= 1, got {self.shuffle_window}")


@dataclass
class TrainSchedule:
    anneal_epochs: int = 3
    ae_floor: float = 0.0
    patience: int = 10
    max_epochs: int = 100
    batch_size: int = 32
    lr: float = 0.5
    clip: float = 5.0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.patience < 1:
            raise NeuralError(f"patience must be >= 1, got {self.patience}")

    def ae_weight(self, epoch: int) -> float:
        """Autoencoding loss weight for a 0-based epoch: linear from 1 down to the floor."""
        if self.anneal_epochs <= 0 or epoch >= self.anneal_epochs:
            return self.ae_floor
        return 1.0 - (1.0 - self.ae_floor) * epoch / self.anneal_epochs


class Vocab:
    """Joint character vocabulary over both domains."""

    def __init__(self, source: Alphabet, target: Alphabet):
        self.alphabets = {SOURCE: source, TARGET: target}
        chars = sorted(set(source.symbols[2:]) | set(target.symbols[2:]))
        self.itos = _SPECIALS + chars
        self.stoi = {c: i for i, c in enumerate(self.itos)}
        self.to_joint = {}
        self.masks = {}
        for dom, alpha in self.alphabets.items():
            ids = [EOS, JOINT_UNK] + [self.stoi[c] for c in alpha.symbols[2:]]
            self.to_joint[dom] = torch.tensor(ids, dtype=torch.long)
            mask = torch.zeros(len(self.itos), dtype=torch.bool)
            mask[ids] = True
            self.masks[dom] = mask

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, ids: Sequence[int], domain: str) -> list[int]:
        table = self.to_joint[domain]
        return [int(table[i]) for i in ids]

    @staticmethod
    def tag(domain: str) -> int:
        return TAG_SOURCE if domain == SOURCE else TAG_TARGET


class Seq2SeqModel(nn.Module):
    """Bidirectional one-layer LSTM encoder, one-layer LSTM decoder with attention."""

    def __init__(self, vocab: Vocab, emb_dim: int = 32, hidden_dim: int = 64, seed: int = 0,
                 tie_embeddings: bool = False):
        super().__init__()
        if hidden_dim % 2:
            raise NeuralError("hidden_dim must be even (two encoder directions)")
        torch.manual_seed(seed)
        self.vocab = vocab
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.seed = seed
        V, E, H = len(vocab), emb_dim, hidden_dim
        self.embed = nn.Embedding(V, E, padding_idx=PAD)
        self.encoder = nn.LSTM(E, H // 2, batch_first=True, bidirectional=True)
        self.bridge = nn.Linear(H, 2 * H)
        self.decoder = nn.LSTMCell(E + H, H)
        self.attn = nn.Linear(H, H, bias=False)
        self.combine = nn.Linear(2 * H, H)
        self.tie_embeddings = tie_embeddings
        if tie_embeddings:
            self.to_emb = nn.Linear(H, E)
            self.out_bias = nn.Parameter(torch.zeros(V))
        else:
            self.out = nn.Linear(H, V)

    # -- batched primitives -------------------------------------------------

    def encode(self, inputs: list[list[int]]):
        """Encode joint-id sequences (tag already prepended).

        Returns (memory, mask, state) where memory is (B, T, H).
        """
        lengths = torch.tensor([len(s) for s in inputs])
        T = int(lengths.max())
        batch = torch.full((len(inputs), T), PAD, dtype=torch.long)
        for b, s in enumerate(inputs):
            batch[b, :len(s)] = torch.tensor(s, dtype=torch.long)
        emb = self.embed(batch)
        packed = pack_padded_sequence(emb, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.encoder(packed)
        memory, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        mask = batch != PAD
        mean = (memory * mask.unsqueeze(-1)).sum(1) / lengths.unsqueeze(-1).to(memory.dtype)
        h, c = torch.tanh(self.bridge(mean)).chunk(2, dim=-1)
        feed = torch.zeros_like(h)
        return memory, mask, (h, c, feed)

    def step(self, memory, mask, state, prev: torch.Tensor, out_mask: torch.Tensor):
        """One decoder step; returns (log-probs over the joint vocab, new state)."""
        h, c, feed = state
        x = torch.cat([self.embed(prev), feed], dim=-1)
        h, c = self.decoder(x, (h, c))
        scores = torch.bmm(memory, self.attn(h).unsqueeze(-1)).squeeze(-1)
        scores = scores.masked_fill(~mask, -1e9)
        weights = torch.softmax(scores, dim=-1)
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        feed = torch.tanh(self.combine(torch.cat([h, context], dim=-1)))
        if self.tie_embeddings:
            logits = self.to_emb(feed) @ self.embed.weight.t() + self.out_bias
        else:
            logits = self.out(feed)
        logits = logits.masked_fill(~out_mask, float("-inf"))
        return F.log_softmax(logits, dim=-1), (h, c, feed)

    def _inputs(self, xs, direction):
        src_dom, tgt_dom = direction
        tag = Vocab.tag(tgt_dom)
        return [[tag] + self.vocab.encode(x, src_dom) for x in xs]

    def token_logprobs(self, xs: list[Sequence[int]], ys: list[Sequence[int]], direction):
        """Teacher-forced log-probs of y_1..y_n, EOS for each pair, as a (B, T) tensor (0 on padding)."""
        src_dom, tgt_dom = direction
        memory, mask, state = self.encode(self._inputs(xs, direction))
        targets = [self.vocab.encode(y, tgt_dom) + [EOS] for y in ys]
        T = max(len(t) for t in targets)
        gold = torch.full((len(ys), T), PAD, dtype=torch.long)
        for b, t in enumerate(targets):
            gold[b, :len(t)] = torch.tensor(t, dtype=torch.long)
        out_mask = self.vocab.masks[tgt_dom].unsqueeze(0).expand(len(ys), -1)
        prev = torch.full((len(ys),), Vocab.tag(tgt_dom), dtype=torch.long)
        steps = []
        for t in range(T):
            logp, state = self.step(memory, mask, state, prev, out_mask)
            g = gold[:, t]
            picked = logp.gather(1, g.clamp(min=0).unsqueeze(1)).squeeze(1)
            steps.append(picked.masked_fill(g == PAD, 0.0))
            prev = g.masked_fill(g == PAD, EOS)
        return torch.stack(steps, dim=1)

    def loss(self, xs, ys, direction) -> torch.Tensor:
        """Mean per-token negative log-likelihood (EOS included)."""
        lp = self.token_logprobs(xs, ys, direction)
        n_tokens = sum(len(y) + 1 for y in ys)
        return -lp.sum() / n_tokens

    @torch.no_grad()
    def greedy(self, xs: list[Sequence[int]], direction) -> list[list[int]]:
        """Greedy decoding; output length never exceeds the input length."""
        src_dom, tgt_dom = direction
        results: list[list[int]] = [[] for _ in xs]
        live = [b for b, x in enumerate(xs) if len(x) > 0]
        if not live:
            return results
        memory, mask, state = self.encode(self._inputs([xs[b] for b in live], direction))
        out_mask = self.vocab.masks[tgt_dom].unsqueeze(0).expand(len(live), -1)
        to_alpha = self._joint_to_alpha(tgt_dom)
        prev = torch.full((len(live),), Vocab.tag(tgt_dom), dtype=torch.long)
        caps = [len(xs[b]) for b in live]
        done = [False] * len(live)
        for t in range(max(caps)):
            logp, state = self.step(memory, mask, state, prev, out_mask)
            best = logp.argmax(dim=-1)
            for k, b in enumerate(live):
                if done[k]:
                    continue
                tok = int(best[k])
                if tok == EOS:
                    done[k] = True
                else:
                    results[b].append(to_alpha[tok])
                    if len(results[b]) >= caps[k]:
                        done[k] = True
            if all(done):
                break
            prev = best
        return results

    def _joint_to_alpha(self, domain: str) -> dict[int, int]:
        table = self.vocab.to_joint[domain].tolist()
        return {j: i for i, j in enumerate(table) if i > 0}

    # -- incremental interface for search ----------------------------------

    def start(self, x: Sequence[int], direction) -> "DecoderState":
        with torch.no_grad():
            memory, mask, state = self.encode(self._inputs([x], direction))
        return DecoderState(self, memory, mask, state, direction,
                            torch.tensor([Vocab.tag(direction[1])]))

    # -- persistence --------------------------------------------------------

    def save(self, directory, extra: Optional[dict] = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), directory / "model.pt")
        manifest = {
            "version": CHECKPOINT_VERSION,
            "emb_dim": self.emb_dim,
            "hidden_dim": self.hidden_dim,
            "seed": self.seed,
            "tie_embeddings": self.tie_embeddings,
            "source_alphabet": self.vocab.alphabets[SOURCE].symbols[2:],
            "target_alphabet": self.vocab.alphabets[TARGET].symbols[2:],
        }
        manifest.update(extra or {})
        (directory / "manifest.json").write_text(
            json.dumps(manifest, ensure_ascii=False, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Seq2SeqModel":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise NeuralError(f"unsupported checkpoint version {manifest.get('version')}")
        vocab = Vocab(Alphabet(manifest["source_alphabet"]), Alphabet(manifest["target_alphabet"]))
        model = cls(vocab, manifest["emb_dim"], manifest["hidden_dim"], manifest["seed"],
                    tie_embeddings=manifest.get("tie_embeddings", False))
        model.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
        model.eval()
        return model


class DecoderState:
    """Decoder state after some prefix; ``logprobs()`` gives the next-character distribution."""

    def __init__(self, model, memory, mask, state, direction, prev):
        self.model = model
        self.memory = memory
        self.mask = mask
        self.state = state
        self.direction = direction
        self.prev = prev
        self._cache = None

    def _advance(self):
        if self._cache is None:
            tgt = self.direction[1]
            with torch.no_grad():
                logp, new_state = self.model.step(self.memory, self.mask, self.state, self.prev,
                                                  self.model.vocab.masks[tgt].unsqueeze(0))
            table = self.model.vocab.to_joint[tgt]
            self._cache = (logp[0, table].double().numpy(), new_state)
        return self._cache

    def logprobs(self) -> np.ndarray:
        """Log-probabilities indexed by alphabet id; index 0 is end-of-sequence."""
        return self._advance()[0]

    def extend(self, symbol: int) -> "DecoderState":
        _, new_state = self._advance()
        joint = self.model.vocab.to_joint[self.direction[1]][symbol]
        return DecoderState(self.model, self.memory, self.mask, new_state, self.direction,
                            joint.view(1))


def next_char_dist(model: Seq2SeqModel, x: Sequence[int], y_prefix: Sequence[int],
                   direction=FORWARD) -> np.ndarray:
    """p(y_{t+1} = o | x, y_1..t) indexed by alphabet id (index 0 = EOS)."""
    st = model.start(x, direction)
    for c in y_prefix:
        st = st.extend(c)
    return np.exp(st.logprobs())


def sequence_logprob(model: Seq2SeqModel, x: Sequence[int], y: Sequence[int],
                     direction=FORWARD) -> float:
    """-log p(y, EOS | x) under teacher forcing."""
    with torch.no_grad():
        lp = model.token_logprobs([list(x)], [list(y)], direction)
    return -float(lp.sum())


def greedy_decode(model: Seq2SeqModel, x: Sequence[int], direction=FORWARD) -> list[int]:
    return model.greedy([list(x)], direction)[0]


def beam_search(model: Seq2SeqModel, x: Sequence[int], direction=FORWARD, beam: int = 5,
                n: Optional[int] = None) -> list[tuple[list[int], float]]:
    """Up to ``n`` (default ``beam``) hypotheses with their -log p, best first.

    Hypotheses stop at EOS or when they reach the input length; a capped
    hypothesis is charged the EOS term like any other.
    """
    n = beam if n is None else n
    cap = len(x)
    root = model.start(x, direction)
    if cap == 0:
        return [([], -float(root.logprobs()[0]))]
    live = [(0.0, [], root)]
    finished: list[tuple[float, list[int]]] = []
    for t in range(cap):
        cands = []
        for score, y, st in live:
            lp = st.logprobs()
            for o in np.argsort(-lp, kind="stable")[: beam + 1]:
                o = int(o)
                if not np.isfinite(lp[o]):
                    continue
                cands.append((score - float(lp[o]), y, st, o))
        cands.sort(key=lambda c: (c[0], c[1], c[3]))
        live = []
        for score, y, st, o in cands:
            if len(live) >= beam:
                break
            if o == 0:
                finished.append((score, y))
            else:
                live.append((score, y + [o], st.extend(o)))
        if not live:
            break
    for score, y, st in live:
        finished.append((score - float(st.logprobs()[0]), y))
    finished.sort(key=lambda f: (f[0], f[1]))
    return [(y, s) for s, y in finished[:n]]


# -- training --------------------------------------------------------------

def add_noise(ids: Sequence[int], noise: NoiseConfig, rng: random.Random) -> list[int]:
    """Drop characters, then shuffle locally so no character moves more than the window."""
    kept = [c for c in ids if rng.random() >= noise.drop_prob]
    if not kept and ids:
        kept = [ids[rng.randrange(len(ids))]]
    keys = [i + rng.uniform(0, noise.shuffle_window + 1) for i in range(len(kept))]
    return [c for _, c in sorted(zip(keys, kept), key=lambda kc: kc[0])]


@dataclass
class TrainResult:
    model: Seq2SeqModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_cer: float = math.inf


def _cer(hyps, refs) -> float:
    from .evalkit import edit_distance
    dist = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return dist / max(1, sum(len(r) for r in refs))


def _batches(items, size, rng):
    idx = list(range(len(items)))
    rng.shuffle(idx)
    return [[items[i] for i in idx[k:k + size]] for k in range(0, len(idx), size)]


def unmt_losses(model: Seq2SeqModel, src_batch, tgt_batch, noise: NoiseConfig, ae_weight: float,
                rng: random.Random, bt_pairs=None):
    """Denoising and back-translation losses for one step.

    ``bt_pairs`` optionally fixes the synthetic (input, output, direction)
    triples; by default they are produced by greedy translation with the
    current model.
    """
    ae = model.loss([add_noise(x, noise, rng) for x in src_batch], src_batch, (SOURCE, SOURCE)) \
        + model.loss([add_noise(y, noise, rng) for y in tgt_batch], tgt_batch, (TARGET, TARGET))
    if bt_pairs is None:
        was_training = model.training
        model.eval()
        fake_tgt = model.greedy(src_batch, FORWARD)
        fake_src = model.greedy(tgt_batch, BACKWARD)
        model.train(was_training)
        bt_pairs = [(fake_tgt, src_batch, BACKWARD), (fake_src, tgt_batch, FORWARD)]
    bt = sum(model.loss(inp, out, d) for inp, out, d in bt_pairs)
    return ae_weight * ae + bt, ae, bt


def train_unmt(src: list[Sequence[int]], tgt: list[Sequence[int]], source: Alphabet,
               target: Alphabet, noise: NoiseConfig = NoiseConfig(),
               sched: TrainSchedule = TrainSchedule(),
               valid: Optional[tuple[list, list]] = None, emb_dim: int = 32,
               hidden_dim: int = 64, seed: int = 0, model: Optional[Seq2SeqModel] = None,
               time_budget: Optional[float] = None, tie: bool = False) -> TrainResult:
    """Denoising autoencoding plus on-the-fly back-translation.

    Each step draws one minibatch per domain, reconstructs both from noised
    copies, and trains each direction on sentences back-translated by the
    current model.  ``valid`` is a parallel (source, target) pair of lists;
    the model with the best validation CER (forward direction) is kept and
    training stops after ``sched.patience`` epochs without improvement.
    """
    if not src or not tgt:
        raise NeuralError("both training corpora must be non-empty")

    torch.manual_seed(seed)
    rng = random.Random(seed)
    if model is None:
        model = Seq2SeqModel(Vocab(source, target), emb_dim, hidden_dim, seed, tie_embeddings=tie)
    if sched.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=sched.lr)
    else:
        opt = torch.optim.Adam(model.parameters(), lr=sched.lr)
    result = TrainResult(model=model)
    best_state = None
    bad_epochs = 0
    started = time.monotonic()
    src = [list(s) for s in src if len(s)]
    tgt = [list(t) for t in tgt if len(t)]
    for epoch in range(sched.max_epochs):
        model.train()
        lam = sched.ae_weight(epoch)
        src_batches = _batches(src, sched.batch_size, rng)
        tgt_batches = _batches(tgt, sched.batch_size, rng)
        total = 0.0
        for sb, tb in zip(src_batches, tgt_batches):
            loss, ae, bt = unmt_losses(model, sb, tb, noise, lam, rng)
            if not torch.isfinite(loss):
                raise NeuralError(f"non-finite loss at epoch {epoch}: ae={float(ae)} bt={float(bt)}")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), sched.clip)
            opt.step()
            total += float(loss.detach())
        entry = {"epoch": epoch, "loss": total / max(1, len(src_batches)), "ae_weight": lam}
        if valid is not None:
            model.eval()
            hyps = model.greedy(valid[0], FORWARD)
            cer = _cer(hyps, valid[1])
            entry["valid_cer"] = cer
            if cer < result.best_cer:
                result.best_cer, result.best_epoch = cer, epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                bad_epochs = 0
            else:
                bad_epochs += 1
        result.history.append(entry)
        logger.info("seq2seq epoch %s", entry)
        if valid is not None and bad_epochs >= sched.patience:
            break
        if time_budget is not None and time.monotonic() - started > time_budget:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result
