"""Command line entry point (``cedkws``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .bundle import Bundle
from .errors import CEDError
from .features import load_audio_features
from .phonemes import Lexicon, grapheme_to_phoneme
from .training import ConfusableSpec, generate_confusable

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(path):
    if not Path(path).exists():
        raise UsageError(f"no such file or directory: {path}")
    return path


def cmd_synth(args):
    cfg = pipeline.PipelineConfig.load(args.config)
    manifests = pipeline.synthesize(cfg, args.out)
    for split, path in manifests.items():
        print(f"{split}\t{path}")


def cmd_train_encoder(args):
    cfg = pipeline.PipelineConfig.load(args.config)
    if args.epochs is not None:
        cfg.raw["ctc"]["epochs"] = args.epochs
    enc = pipeline.train_encoder(cfg, _existing(args.manifest), args.out)
    print(f"wrote {args.out} ({enc.param_count} parameters)")


def cmd_fine_tune(args):
    cfg = pipeline.PipelineConfig.load(args.config)
    if args.epochs is not None:
        cfg.raw["fine_tune"]["epochs"] = args.epochs
    pipeline.fine_tune_encoder(cfg, _existing(args.encoder), _existing(args.manifest), args.out)
    print(f"wrote {args.out}")


def cmd_build_p2v(args):
    db, report = pipeline.make_p2v(_existing(args.encoder), _existing(args.manifest), args.out,
                                   args.cap, args.seed, args.allow_fallback, args.plot_data)
    print(f"wrote {args.out}: {len(db.vectors)} phonemes from {report.sampled} utterances "
          f"(CER-0 yield {report.yield_rate:.3f})")


def cmd_train_ced(args):
    cfg = pipeline.PipelineConfig.load(args.config)
    overrides = {}
    if args.no_confusables:
        overrides["use_confusables"] = False
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    result = pipeline.make_bundle(_existing(args.encoder), _existing(args.p2v),
                                  _existing(args.manifest), args.out, cfg.ced_config(**overrides),
                                  args.dev_manifest)
    last = result.log[-1] if result.log else {}
    print(f"wrote bundle {args.out}; final loss {last.get('loss')}")


def cmd_eval(args):
    cfg = pipeline.PipelineConfig.load(args.config)
    per_anchor = args.per_anchor or cfg.raw["eval"]["per_anchor"]
    report = pipeline.evaluate_bundle(_existing(args.bundle), _existing(args.manifest), args.mode,
                                      per_anchor, args.seed, cfg.raw["eval"]["hard_range"],
                                      args.out)
    if args.store_threshold:
        pipeline.store_threshold(args.bundle, report.threshold_at_eer)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_verify(args):
    bundle = Bundle.load(_existing(args.bundle))
    feats, kind = load_audio_features(_existing(args.audio))
    result = bundle.verify(feats, args.text, feature_kind=kind)
    threshold = args.threshold if args.threshold is not None else bundle.threshold
    verdict = "match" if result.is_match(threshold) else "non-match"
    note = " (infeasible: fewer frames than phonemes)" if result.infeasible else ""
    print(f"{result.score:.6f}\t{verdict}{note}")


def cmd_confusables(args):
    lexicon = Lexicon.default()
    phonemes = grapheme_to_phoneme(args.keyword, lexicon)
    spec = ConfusableSpec(args.delta, tuple(args.ops.split(",")), args.seed)
    rng = np.random.default_rng(args.seed)
    for _ in range(args.count):
        print(" ".join(generate_confusable(phonemes, spec, rng)))


def cmd_g2p(args):
    print(" ".join(grapheme_to_phoneme(args.text, Lexicon.default())))


def build_parser():
    p = _Parser(prog="cedkws", description="Flexible keyword spotting with a common embedding detector")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="build the synthetic corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-encoder", help="CTC-train the conformer encoder")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_encoder)

    s = sub.add_parser("fine-tune", help="continue CTC training on another manifest")
    s.add_argument("--config")
    s.add_argument("--encoder", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_fine_tune)

    s = sub.add_parser("build-p2v", help="build the phoneme-to-vector database")
    s.add_argument("--encoder", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--cap", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--allow-fallback", action="store_true",
                   help="fill phonemes without local vectors with the mean vector")
    s.add_argument("--plot-data", help="also write sampled local vectors as TSV")
    s.set_defaults(func=cmd_build_p2v)

    s = sub.add_parser("train-ced", help="train the verifier head and write a bundle")
    s.add_argument("--config")
    s.add_argument("--encoder", required=True)
    s.add_argument("--p2v", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--dev-manifest")
    s.add_argument("--no-confusables", action="store_true")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="bundle directory")
    s.set_defaults(func=cmd_train_ced)

    s = sub.add_parser("eval", help="evaluate a bundle on easy or hard pairs")
    s.add_argument("--config")
    s.add_argument("--bundle", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=("easy", "hard"), required=True)
    s.add_argument("--per-anchor", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--store-threshold", action="store_true",
                   help="write the EER threshold into the bundle")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", help="score one audio/text pair")
    s.add_argument("--bundle", required=True)
    s.add_argument("--audio", required=True, help=".wav (16 kHz mono PCM16) or feature file")
    s.add_argument("--text", required=True)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("confusables", help="print confusable variants of a keyword")
    s.add_argument("--keyword", required=True)
    s.add_argument("--delta", type=int, choices=(1, 2, 3), default=1)
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ops", default="replace,insert")
    s.set_defaults(func=cmd_confusables)

    s = sub.add_parser("g2p", help="print the phonemes of a text")
    s.add_argument("--text", required=True)
    s.set_defaults(func=cmd_g2p)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("cedkws: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"cedkws {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CEDError, OSError, json.JSONDecodeError) as exc:
        print(f"cedkws {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
