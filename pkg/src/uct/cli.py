"""``uct`` command-line driver: prepare, train, decode, evaluate and analyze."""

from __future__ import annotations

import argparse
import hashlib
import importlib.metadata
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .channel import ChannelError, build_channel, build_prior, read_pairs, read_params, write_params
from .charlm import LmError, compile_lm, read_arpa, to_arpa, train_lm
from .combine import (CombineError, NeuralScorer, count_unreachable, format_nbest, generate_candidates_seq2seq,
                      generate_candidates_wfst, poe_decode, rerank, seq2seq_rescorer, wfst_rescorer)
from .config import DECODERS, ConfigError, ExperimentConfig, parse_config
from .corpus import UNK, Alphabet, CorpusError, apply_unk, detokenize, from_ids, induce_alphabet, \
    read_addbacks, read_lines
from .em import DecodeError, decode_best, train_wfst
from .evalkit import EvalError, error_profile, substitution_entropy, write_report
from .fst import FstError

logger = logging.getLogger("uct")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("prepare", "train-lm", "train-wfst", "train-seq2seq", "decode", "evaluate", "analyze", "all")
OUTPUT_ROOT_ENV = "UCT_OUTPUT_ROOT"
NEEDS_SEQ2SEQ = ("seq2seq", "rerank-wfst", "rerank-seq2seq", "poe")


class DataError(RuntimeError):
    pass


class MissingArtifact(DataError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path}; run `uct {stage}` first")


class NumericalError(RuntimeError):
    pass


@dataclass
class Side:
    """Decode-time roles for one direction: read ``input`` text, write ``output`` text."""
    name: str
    input: str   # "source" or "target"
    output: str

    @property
    def neural(self):
        from .neural import BACKWARD, FORWARD
        return FORWARD if self.name == "forward" else BACKWARD


SIDES = {"forward": Side("forward", "source", "target"), "backward": Side("backward", "target", "source")}


# -- run directory -----------------------------------------------------------

class Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        out = Path(cfg.paths.output_dir)
        if not out.is_absolute():
            root = os.environ.get(OUTPUT_ROOT_ENV)
            out = Path(root) / out if root else cfg.base_dir / out
        self.dir = out
        self._alphabets: dict[str, Alphabet] = {}

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifact(path, stage)
        return path

    def corpus(self, key: str) -> list:
        path = self.cfg.path(key)
        if path is None:
            raise ConfigError(f"[paths] {key} is required for this stage")
        if not path.exists():
            raise DataError(f"[paths] {key}: file not found: {path}")
        return read_lines(path)

    def alphabet(self, side: str) -> Alphabet:
        if side not in self._alphabets:
            self._alphabets[side] = Alphabet.load(self.require(self.path("prepare", f"{side}.alphabet"), "prepare"))
        return self._alphabets[side]

    def ids(self, key: str, side: str) -> list[list[int]]:
        alpha = self.alphabet(side)
        return [apply_unk(seq, alpha).ids for seq in self.corpus(key)]

    def render(self, ids, side: str) -> str:
        return detokenize(from_ids(ids, self.alphabet(side)), keep_unk=True)

    def record(self, stage: str, outputs: list[Path], seed: Optional[int] = None) -> None:
        """Add the stage entry to manifest.json (no timestamps, so reruns are byte-identical)."""
        manifest_path = self.path("manifest.json")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else {}
        entry = {
            "config_sha256": self.cfg.digest(),
            "config": self.cfg.serialize(),
            "versions": _versions(),
            "outputs": {str(p.relative_to(self.dir)): _sha256(p) for p in sorted(outputs)},
        }
        if seed is not None:
            entry["seed"] = seed
        manifest[stage] = entry
        self.dir.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
        return h.hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__, "uct": __version__}
    try:
        out["torch"] = importlib.metadata.version("torch")
    except importlib.metadata.PackageNotFoundError:
        pass
    return out


# -- stages ------------------------------------------------------------------

def stage_prepare(run: Run) -> None:
    cfg = run.cfg
    outdir = run.path("prepare")
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for side in ("source", "target"):
        train = run.corpus(f"train_{side}")
        addbacks = cfg.path(f"addbacks_{side}")
        extra = read_addbacks(addbacks) if addbacks is not None else set()
        alpha = induce_alphabet(train, cfg.alphabet.coverage, extra)
        path = outdir / f"{side}.alphabet"
        alpha.save(path)
        written.append(path)
        logger.info("%s alphabet: %d symbols", side, len(alpha) - 2)
    run.record("prepare", written)


def _lm_path(run: Run, side: Side) -> Path:
    return run.path("lm", f"{side.name}.arpa")


def stage_train_lm(run: Run) -> None:
    cfg = run.cfg
    run.path("lm").mkdir(parents=True, exist_ok=True)
    written = []
    for name in cfg.directions:
        side = SIDES[name]
        alpha = run.alphabet(side.output)
        corpus = run.ids(f"train_{side.output}", side.output)
        lm = train_lm(corpus, order=cfg.lm.order, smoothing=cfg.lm.smoothing, vocab=range(UNK, len(alpha)))
        path = _lm_path(run, side)
        path.write_text(to_arpa(lm, _symbol(alpha)), encoding="utf-8")
        written.append(path)
    run.record("train-lm", written)


def _symbol(alpha: Alphabet):
    return lambda i: "<unk>" if i == UNK else f"U+{ord(alpha.symbol(i)):04X}"


def _parse_symbol(alpha: Alphabet):
    return lambda t: UNK if t == "<unk>" else alpha.id(chr(int(t[2:], 16)))


def load_lm(run: Run, side: Side):
    alpha = run.alphabet(side.output)
    lm = read_arpa(run.require(_lm_path(run, side), "train-lm"), _parse_symbol(alpha))
    return compile_lm(lm)


def _channel_path(run: Run, side: Side) -> Path:
    return run.path("channel", f"{side.name}.tsv")


def stage_train_wfst(run: Run) -> None:
    cfg = run.cfg
    run.path("channel").mkdir(parents=True, exist_ok=True)
    written = []
    pair_lists = []
    for p in cfg.prior_paths():
        if not p.exists():
            raise DataError(f"[paths] priors: file not found: {p}")
        pair_lists.append(read_pairs(p))
    for name in cfg.directions:
        side = SIDES[name]
        latent, observed = run.alphabet(side.output), run.alphabet(side.input)
        pairs = pair_lists if side.name == "forward" else [[(s, t, *rest) for t, s, *rest in pl]
                                                            for pl in pair_lists]
        prior = build_prior(latent, observed, pairs, base=cfg.channel.prior_base,
                            boost=cfg.channel.prior_boost, identical=cfg.channel.identical_prior)
        lm = load_lm(run, side)
        train_x = [x for x in run.ids(f"train_{side.input}", side.input) if x]
        state = train_wfst(train_x, lm, prior, len(latent), len(observed), delay=cfg.channel.delay,
                           epochs=cfg.em.epochs, patience=cfg.em.patience, n_shortest=cfg.em.n_shortest,
                           stepsize_exponent=cfg.em.stepsize_exponent, batch_size=cfg.em.minibatch,
                           seed=cfg.em.seed)
        if not np.all(np.isfinite(state.params.emit)):
            raise NumericalError("EM produced non-finite emission parameters")
        path = _channel_path(run, side)
        write_params(path, state.params, latent, observed,
                     header={"delay": cfg.channel.delay, "epochs": state.epoch, "step": state.step,
                             "alpha": cfg.em.stepsize_exponent, "seed": cfg.em.seed})
        written.append(path)
    run.record("train-wfst", written, seed=cfg.em.seed)


def load_channel(run: Run, side: Side):
    params, header = read_params(run.require(_channel_path(run, side), "train-wfst"),
                                 run.alphabet(side.output), run.alphabet(side.input))
    return build_channel(params, int(header.get("delay", run.cfg.channel.delay)))


def stage_train_seq2seq(run: Run) -> None:
    from .neural import NeuralError, NoiseConfig, TrainSchedule, train_unmt
    import torch

    cfg, nc = run.cfg, run.cfg.neural
    torch.set_num_threads(1)
    src = run.ids("train_source", "source")
    tgt = run.ids("train_target", "target")
    valid = None
    if cfg.path("valid_source") is not None and cfg.path("valid_target") is not None:
        valid = (run.ids("valid_source", "source"), run.ids("valid_target", "target"))
    sched = TrainSchedule(anneal_epochs=nc.anneal_epochs, ae_floor=nc.ae_floor, patience=nc.patience,
                          max_epochs=nc.max_epochs, batch_size=nc.batch_size, lr=nc.lr, clip=nc.clip,
                          optimizer=nc.optimizer)
    try:
        result = train_unmt(src, tgt, run.alphabet("source"), run.alphabet("target"),
                            NoiseConfig(nc.drop_prob, nc.shuffle_window), sched, valid=valid,
                            emb_dim=nc.emb_dim, hidden_dim=nc.hidden_dim, seed=nc.seed,
                            time_budget=nc.time_budget or None, tie=nc.tie_embeddings)
    except NeuralError as e:
        raise NumericalError(str(e)) from e
    outdir = run.path("seq2seq")
    result.model.save(outdir, extra={"seed": nc.seed, "best_epoch": result.best_epoch})
    run.record("train-seq2seq", [outdir], seed=nc.seed)


def load_seq2seq(run: Run):
    from .neural import Seq2SeqModel
    import torch

    torch.set_num_threads(1)
    return Seq2SeqModel.load(run.require(run.path("seq2seq"), "train-seq2seq"))


# Decoding runs per sentence, optionally in worker processes; the models live
# in module globals so forked workers inherit them.
_DECODER: dict = {}


def _decode_one(x: list[int]) -> tuple[list[int], str, int, bool]:
    """(output ids, n-best TSV, unreachable candidates, failed) for one sentence."""
    d = _DECODER
    kind, side = d["decoder"], d["side"]
    if not x:
        return [], "", 0, False
    try:
        if kind == "wfst":
            return decode_best(x, d["lm"], d["channel"]), "", 0, False
        if kind == "seq2seq":
            return d["model"].greedy([x], side.neural)[0], "", 0, False
        if kind == "poe":
            scorer = NeuralScorer(d["model"], x, side.neural)
            return poe_decode(x, d["lm"], d["channel"], scorer, beam=d["beam"],
                              threshold=d["threshold"]), "", 0, False
        if kind == "rerank-wfst":
            cands = generate_candidates_wfst(x, d["lm"], d["channel"], d["nbest"])
            ranked = rerank(cands, seq2seq_rescorer(d["model"], x, side.neural, d["normalize"]))
        else:
            cands = generate_candidates_seq2seq(d["model"], x, side.neural, d["nbest"], d["beam"])
            ranked = rerank(cands, wfst_rescorer(x, d["lm"], d["channel"]))
        return list(ranked[0].y), format_nbest(ranked, d["render"]), count_unreachable(ranked), False
    except (DecodeError, CombineError) as e:
        logger.warning("decoding failed, writing an empty line: %s", e)
        return [], "", 0, True


def _init_worker(state: dict) -> None:
    _DECODER.clear()
    _DECODER.update(state)


def _decode_path(run: Run, side: Side, decoder: str) -> Path:
    return run.path("decode", f"{side.name}.{decoder}.txt")


def stage_decode(run: Run) -> None:
    cfg = run.cfg
    decoder = cfg.decode.decoder
    run.path("decode").mkdir(parents=True, exist_ok=True)
    written = []
    for name in cfg.directions:
        side = SIDES[name]
        state = {"decoder": decoder, "side": side, "beam": cfg.decode.beam, "nbest": cfg.decode.nbest,
                 "normalize": cfg.decode.length_normalize,
                 "threshold": cfg.decode.poe_threshold or None,
                 "render": lambda ids, s=side.output: run.render(ids, s)}
        if decoder != "seq2seq":
            state["lm"] = load_lm(run, side)
            state["channel"] = load_channel(run, side)
        if decoder in NEEDS_SEQ2SEQ:
            state["model"] = load_seq2seq(run)
        inputs = run.ids(f"test_{side.input}", side.input)
        _init_worker(state)
        if cfg.decode.workers > 1:
            with ProcessPoolExecutor(cfg.decode.workers, mp_context=get_context("fork"),
                                     initializer=_init_worker, initargs=(state,)) as pool:
                results = list(pool.map(_decode_one, inputs, chunksize=4))
        else:
            results = [_decode_one(x) for x in inputs]
        out_path = _decode_path(run, side, decoder)
        out_path.write_text("".join(run.render(ids, side.output) + "\n" for ids, *_ in results),
                            encoding="utf-8")
        written.append(out_path)
        report = {"sentences": len(results), "failed": sum(r[3] for r in results)}
        if decoder.startswith("rerank"):
            report["unreachable_candidates"] = sum(r[2] for r in results)
            nbest_path = run.path("decode", f"{side.name}.{decoder}.nbest.tsv")
            nbest_path.write_text("".join(f"# sentence {i + 1}\n{r[1]}" for i, r in enumerate(results)),
                                  encoding="utf-8")
            written.append(nbest_path)
        report_path = run.path("decode", f"{side.name}.{decoder}.report.json")
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(report_path)
        logger.info("%s %s: %s", side.name, decoder, report)
    run.record("decode", written)


def _pairs(run: Run, side: Side, decoder: str) -> list[tuple[str, str]]:
    path = run.require(_decode_path(run, side, decoder), "decode")
    hyps = path.read_text(encoding="utf-8").split("\n")[:-1]
    ref_path = run.cfg.path(f"test_{side.output}")
    if ref_path is None or not ref_path.exists():
        raise DataError(f"[paths] test_{side.output}: reference file not found")
    refs = ref_path.read_text(encoding="utf-8").splitlines()
    if len(hyps) != len(refs):
        raise DataError(f"{path} has {len(hyps)} lines but {ref_path} has {len(refs)}")
    # References are compared after the same lowercasing the models see.
    return [(h, r.lower()) for h, r in zip(hyps, refs) if r]


def stage_evaluate(run: Run) -> None:
    cfg = run.cfg
    decoder = cfg.decode.decoder
    written = []
    for name in cfg.directions:
        side = SIDES[name]
        profile = error_profile(_pairs(run, side, decoder), top_k=cfg.eval.top_k)
        outdir = run.path("eval", f"{side.name}.{decoder}")
        outdir.mkdir(parents=True, exist_ok=True)
        rep = profile.report
        path = outdir / "metrics.csv"
        rows = [("decoder", decoder), ("cer", rep.cer), ("wer", rep.wer), ("bleu", rep.bleu),
                ("insdel_share", rep.insdel_share), ("sentences", rep.n_sentences)]
        path.write_text("metric,value\n" + "".join(f"{k},{_fmt(v)}\n" for k, v in rows), encoding="utf-8")
        written.append(path)
        logger.info("%s %s: CER %.4f WER %.4f BLEU %.2f", side.name, decoder, rep.cer, rep.wer, rep.bleu)
    run.record("evaluate", written)


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def stage_analyze(run: Run) -> None:
    cfg = run.cfg
    decoder = cfg.decode.decoder
    written = []
    for name in cfg.directions:
        side = SIDES[name]
        train = run.corpus(f"train_{side.output}")
        vocab = {w for seq in train for w in detokenize(seq, keep_unk=True).split()}
        profile = error_profile(_pairs(run, side, decoder), train_vocab=vocab, top_k=cfg.eval.top_k)
        outdir = run.path("analyze", f"{side.name}.{decoder}")
        extra = {}
        channel_path = _channel_path(run, side)
        if channel_path.exists():
            latent = run.alphabet(side.output)
            params, _ = read_params(channel_path, latent, run.alphabet(side.input))
            ent = substitution_entropy(params.emit)
            extra["channel_mean_row_entropy"] = float(np.mean(list(ent.values()))) if ent else 0.0
            outdir.mkdir(parents=True, exist_ok=True)
            ent_path = outdir / "channel_entropy.csv"
            ent_path.write_text("target,entropy\n" + "".join(
                f"{_show(latent.symbol(c))},{_fmt(e)}\n" for c, e in ent.items()), encoding="utf-8")
            written.append(ent_path)
        written += list(write_report(profile, outdir, extra_metrics=extra).values())
    run.record("analyze", written)


def _show(ch: str) -> str:
    return f"U+{ord(ch):04X}"


STAGES = {
    "prepare": stage_prepare,
    "train-lm": stage_train_lm,
    "train-wfst": stage_train_wfst,
    "train-seq2seq": stage_train_seq2seq,
    "decode": stage_decode,
    "evaluate": stage_evaluate,
    "analyze": stage_analyze,
}


def pipeline(cfg: ExperimentConfig) -> list[str]:
    stages = ["prepare"]
    if cfg.decode.decoder != "seq2seq":
        stages += ["train-lm", "train-wfst"]
    if cfg.decode.decoder in NEEDS_SEQ2SEQ:
        stages.append("train-seq2seq")
    return stages + ["decode", "evaluate", "analyze"]


def run(cfg: ExperimentConfig, command: str) -> Path:
    r = Run(cfg)
    for stage in (pipeline(cfg) if command == "all" else [command]):
        logger.info("stage %s", stage)
        STAGES[stage](r)
    return r.dir


# -- entry point -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uct", description="Unsupervised transliteration and translation toolkit.")
    p.add_argument("command", choices=COMMANDS + ("synth",))
    p.add_argument("--config", help="experiment INI file")
    p.add_argument("--decoder", choices=DECODERS)
    p.add_argument("--beam", type=int)
    p.add_argument("--nbest", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="synth: directory for the generated fixture")
    p.add_argument("--seed", type=int, default=0, help="synth: generator seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        if not args.out:
            parser.print_usage(sys.stderr)
            print("uct: error: synth needs --out", file=sys.stderr)
            return EXIT_USAGE
        from .synthetic import write_fixture_config
        write_fixture_config(args.out, seed=args.seed)
        return EXIT_OK
    if not args.config:
        parser.print_usage(sys.stderr)
        print("uct: error: --config is required", file=sys.stderr)
        return EXIT_USAGE
    for flag in ("beam", "nbest", "workers"):
        value = getattr(args, flag)
        if value is not None and value < 1:
            print(f"uct: error: --{flag} must be >= 1", file=sys.stderr)
            return EXIT_USAGE
    try:
        cfg = parse_config(args.config)
        if args.decoder:
            cfg.decode.decoder = args.decoder
        for flag in ("beam", "nbest", "workers"):
            if getattr(args, flag) is not None:
                setattr(cfg.decode, flag, getattr(args, flag))
        run(cfg, args.command)
    except NumericalError as e:
        print(f"uct: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"uct: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, CorpusError, ChannelError, LmError, FstError, EvalError,
            DecodeError, CombineError, OSError) as e:
        print(f"uct: error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
