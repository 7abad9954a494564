"""Verification bundles: an encoder, its P2V database and a trained head,
tied together by content hashes."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import Encoder
from .errors import AlignmentInfeasibleError, IncompatibleBundleError, IncompatibleCheckpointError
from .evaluation import MetricsReport, ScoredPair, metrics_report
from .features import Manifest, file_sha256
from .p2v import P2VDatabase, encode_phonemes
from .phonemes import Lexicon, grapheme_to_phoneme
from .verifier import VerifierHead, agreement_for_pair, score, score_batch

BUNDLE_VERSION = 1
COMPONENTS = {
    "encoder": "encoder.ckpt",
    "p2v": "p2v.json",
    "verifier": "verifier.ckpt",
}
SIDECARS = ("encoder.meta.json", "verifier.meta.json")


@dataclass
class VerificationResult:
    score: float
    infeasible: bool = False
    n_frames: int = 0
    n_phonemes: int = 0

    def is_match(self, threshold: float) -> bool:
        return not self.infeasible and self.score >= threshold


class Bundle:
    def __init__(self, encoder: Encoder, db: P2VDatabase, head: VerifierHead,
                 lexicon: Lexicon | None = None, threshold: float = 0.5, hashes=None,
                 check_paths=False):
        if db.dim != encoder.dim or head.dim != encoder.dim:
            raise IncompatibleBundleError(
                f"dimension mismatch: encoder {encoder.dim}, P2V {db.dim}, head {head.dim}"
            )
        self.encoder = encoder
        self.db = db
        self.head = head
        self.lexicon = lexicon or Lexicon.default()
        self.threshold = threshold
        self.hashes = dict(hashes or {})
        self.check_paths = check_paths

    # -- persistence --

    @staticmethod
    def write(directory, encoder_path, p2v_path, head_path, threshold=0.5, seed=None,
              vocab_hash=None) -> Path:
        """Copy component files into ``directory`` and write ``bundle.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for src, name in ((encoder_path, "encoder.ckpt"), (p2v_path, "p2v.json"),
                          (head_path, "verifier.ckpt")):
            src = Path(src)
            dst = directory / name
            if src.resolve() != dst.resolve():
                shutil.copyfile(src, dst)
            meta_src = src.with_name(src.name.rsplit(".", 1)[0] + ".meta.json")
            meta_dst = dst.with_name(dst.name.rsplit(".", 1)[0] + ".meta.json")
            if meta_src.exists() and meta_src.resolve() != meta_dst.resolve():
                shutil.copyfile(meta_src, meta_dst)
        if vocab_hash is None:
            vocab_hash = json.loads((directory / "encoder.meta.json").read_text())["vocab_hash"]
        doc = {
            "version": BUNDLE_VERSION,
            "vocab_hash": vocab_hash,
            "hashes": {k: file_sha256(directory / v) for k, v in COMPONENTS.items()},
            "threshold": threshold,
            "seed": seed,
        }
        (directory / "bundle.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory, lexicon=None, check_paths=False) -> "Bundle":
        directory = Path(directory)
        try:
            doc = json.loads((directory / "bundle.json").read_text())
        except FileNotFoundError:
            raise IncompatibleBundleError(f"{directory}: no bundle.json") from None
        if doc.get("version") != BUNDLE_VERSION:
            raise IncompatibleBundleError(f"{directory}: unsupported bundle version")
        for key, name in COMPONENTS.items():
            path = directory / name
            if not path.exists():
                raise IncompatibleBundleError(f"{directory}: missing {name}")
            if file_sha256(path) != doc["hashes"].get(key):
                raise IncompatibleBundleError(f"{directory}: {name} does not match bundle.json")
        try:
            encoder = Encoder.load(directory / "encoder.ckpt")
        except IncompatibleCheckpointError as exc:
            raise IncompatibleBundleError(str(exc)) from exc
        if encoder.vocabulary.hash != doc.get("vocab_hash"):
            raise IncompatibleBundleError(f"{directory}: vocabulary hash mismatch")
        head = VerifierHead.load(directory / "verifier.ckpt")
        head_meta = getattr(head, "metadata", {})
        if head_meta.get("vocab_hash", doc["vocab_hash"]) != doc["vocab_hash"]:
            raise IncompatibleBundleError(f"{directory}: head built for another vocabulary")
        db = P2VDatabase.load(directory / "p2v.json")
        return cls(encoder, db, head, lexicon, float(doc.get("threshold", 0.5)),
                   doc["hashes"], check_paths)

    # -- scoring --

    def text_phonemes(self, text):
        if isinstance(text, tuple):
            return text
        return grapheme_to_phoneme(text, self.lexicon)

    def verify_embedding(self, audio_emb, text) -> VerificationResult:
        phonemes = self.text_phonemes(text)
        text_emb = encode_phonemes(phonemes, self.db)
        try:
            agreement = agreement_for_pair(text_emb, audio_emb, check=self.check_paths)
        except AlignmentInfeasibleError:
            return VerificationResult(0.0, True, len(audio_emb), len(phonemes))
        return VerificationResult(score(agreement, self.head), False, len(audio_emb), len(phonemes))

    def verify(self, features, text, feature_kind=None) -> VerificationResult:
        """Probability that ``features`` contain ``text``.

        ``text`` is a word string (converted with the lexicon) or a tuple of
        phoneme symbols.  When the utterance has fewer encoder frames than the
        text has phonemes, the result is a non-match flagged ``infeasible``.
        """
        return self.verify_embedding(self.encoder.encode(features, feature_kind), text)

    def evaluate(self, manifest: Manifest, pairs, mode="") -> tuple[MetricsReport, list[ScoredPair]]:
        """Score ``pairs`` (audio ids refer to ``manifest``) and compute metrics.

        Infeasible pairs score 0 and are counted in the report.
        """
        entries = {e.id: e for e in manifest}
        needed = sorted({p.audio_id for p in pairs})
        embs = dict(zip(needed, self.encoder.encode_batch([manifest.features(entries[i])
                                                           for i in needed])))
        agreements, idx, infeasible = [], [], 0
        scores = np.zeros(len(pairs))
        for k, p in enumerate(pairs):
            text_emb = encode_phonemes(p.text, self.db)
            try:
                agreements.append(agreement_for_pair(text_emb, embs[p.audio_id],
                                                     check=self.check_paths))
                idx.append(k)
            except AlignmentInfeasibleError:
                infeasible += 1
        if agreements:
            scores[idx] = score_batch(agreements, self.head)
        scored = [ScoredPair(p, float(s)) for p, s in zip(pairs, scores)]
        return metrics_report(scored, mode, infeasible, self.hashes), scored


def verify(features, text, bundle: Bundle, feature_kind=None) -> VerificationResult:
    return bundle.verify(features, text, feature_kind)


def evaluate(bundle: Bundle, manifest: Manifest, pairs, mode="", report_path=None) -> MetricsReport:
    report, _ = bundle.evaluate(manifest, pairs, mode)
    if report_path is not None:
        report.save(report_path)
    return report
