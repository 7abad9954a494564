"""Easy/hard test pairs, AUC and EER."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .features import Manifest
from .phonemes import PhonemeVocabulary, phoneme_edit_distance
from .training import ConfusableSpec, SamplePair, generate_confusable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredPair:
    pair: SamplePair
    score: float

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"score {self.score} outside [0, 1]")


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidInputError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) + len(neg) != len(scores):
        raise InvalidInputError("labels must be 0 or 1")
    if len(pos) == 0 or len(neg) == 0:
        raise InvalidInputError("need at least one positive and one negative score")
    return pos, neg


def auc(scores, labels) -> float:
    """Area under the ROC curve in percent (Mann-Whitney U; ties count 1/2)."""
    pos, neg = _split(scores, labels)
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    equal = np.searchsorted(neg_sorted, pos, side="right") - below
    u = float(below.sum()) + 0.5 * float(equal.sum())
    return 100.0 * u / (len(pos) * len(neg))


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate in percent and the threshold where it occurs.

    A score ``s`` is accepted at threshold ``t`` when ``s >= t``.  The sweep
    runs over the distinct scores plus one point just above the maximum
    (where everything is rejected); between the two sweep points that
    bracket the FAR/FRR crossing both rates are linearly interpolated.
    """
    pos, neg = _split(scores, labels)
    thresholds = np.unique(np.concatenate([pos, neg]))
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    neg_sorted, pos_sorted = np.sort(neg), np.sort(pos)
    far = (len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")) / len(neg)
    frr = np.searchsorted(pos_sorted, thresholds, side="left") / len(pos)
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        return 100.0 * float(far[k]), float(thresholds[k])
    alpha = diff[k - 1] / (diff[k - 1] - diff[k])
    rate = far[k - 1] + alpha * (far[k] - far[k - 1])
    threshold = thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1])
    return 100.0 * float(rate), float(threshold)


@dataclass
class MetricsReport:
    auc: float
    eer: float
    n_pos: int
    n_neg: int
    threshold_at_eer: float
    mode: str = ""
    infeasible_pairs: int = 0
    bundle_hashes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in ("mode", "n_pos", "n_neg", "auc", "eer", "threshold_at_eer",
                                  "infeasible_pairs", "bundle_hashes")}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def metrics_report(scored, mode="", infeasible=0, bundle_hashes=None) -> MetricsReport:
    scores = [s.score for s in scored]
    labels = [s.pair.label for s in scored]
    a = auc(scores, labels)
    e, t = eer(scores, labels)
    n_pos = sum(labels)
    return MetricsReport(a, e, n_pos, len(labels) - n_pos, t, mode, infeasible,
                         dict(bundle_hashes or {}))


def build_test_pairs(manifest: Manifest, mode: str, per_anchor: int, rng=0,
                     hard_range=(1, 3), confusable_fallback=True, vocabulary=None,
                     inventory=None) -> list[SamplePair]:
    """Positive and negative pairs for every keyword (anchor) in ``manifest``.

    Positives pair the anchor text with its own utterances.  Negatives pair it
    with utterances of other keywords whose phoneme edit distance to the
    anchor lies in ``hard_range`` (hard) or above it (easy).  An anchor with
    no such keyword is skipped in easy mode; in hard mode, if
    ``confusable_fallback`` is set, its negatives instead pair generated
    confusable texts with its own utterances (kind ``"hard-generated"``).
    """
    if mode not in ("easy", "hard"):
        raise InvalidInputError(f"mode must be 'easy' or 'hard', got {mode!r}")
    if per_anchor <= 0:
        return []
    vocabulary = vocabulary or PhonemeVocabulary.default()
    rng = np.random.default_rng(rng)
    groups = manifest.by_transcript()
    phonemes = {kw: tuple(utts[0].phonemes) for kw, utts in groups.items()}
    lo, hi = hard_range

    pairs: list[SamplePair] = []
    for anchor, utts in groups.items():
        text = phonemes[anchor]
        if mode == "easy":
            neighbours = [k for k in groups if phoneme_edit_distance(text, phonemes[k]) > hi]
        else:
            neighbours = [k for k in groups if k != anchor
                          and lo <= phoneme_edit_distance(text, phonemes[k]) <= hi]
        neg_utts = [u for k in neighbours for u in groups[k]]
        pos_idx = rng.choice(len(utts), size=per_anchor, replace=len(utts) < per_anchor)
        positives = [SamplePair(utts[int(i)].id, text, 1, "positive") for i in pos_idx]
        if neg_utts:
            neg_idx = rng.choice(len(neg_utts), size=per_anchor, replace=len(neg_utts) < per_anchor)
            negatives = [SamplePair(neg_utts[int(i)].id, text, 0, mode) for i in neg_idx]
        elif mode == "hard" and confusable_fallback:
            negatives = []
            for p in positives:
                delta = int(rng.integers(lo, hi + 1))
                fake = generate_confusable(text, ConfusableSpec(min(delta, len(text) + 1)), rng,
                                           vocabulary, inventory=inventory)
                negatives.append(SamplePair(p.audio_id, fake, 0, "hard-generated"))
        else:
            logger.warning("no %s negatives for %r; anchor skipped", mode, anchor)
            continue
        pairs += positives + negatives
    return pairs
