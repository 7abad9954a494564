"""Confusable keyword generation, keyword-major batching and verifier
training on top of a frozen encoder."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .encoder import Encoder
from .errors import (
    AlignmentInfeasibleError,
    ConsistencyError,
    GenerationFailedError,
    IncompatibleCheckpointError,
    InvalidInputError,
)
from .features import Manifest
from .p2v import P2VDatabase, encode_phonemes
from .phonemes import PhonemeVocabulary, phoneme_edit_distance
from .verifier import VerifierHead, agreement_for_pair, head_loss, score_batch

logger = logging.getLogger(__name__)

OPS = ("replace", "insert")


@dataclass
class ConfusableSpec:
    delta: int = 1
    allowed_ops: tuple[str, ...] = OPS
    seed: int | None = None
    max_attempts: int = 32

    def __post_init__(self):
        if self.delta not in (1, 2, 3):
            raise InvalidInputError(f"delta must be 1, 2 or 3, got {self.delta}")
        self.allowed_ops = tuple(self.allowed_ops)
        if not self.allowed_ops or set(self.allowed_ops) - set(OPS):
            raise InvalidInputError(f"allowed_ops must be a non-empty subset of {OPS}")


@dataclass(frozen=True)
class Edit:
    op: str
    position: int  # index into the original keyword; inserts go before it
    phoneme: str


def generate_confusable(keyword: Sequence[str], spec: ConfusableSpec, rng=None,
                        vocabulary=None, return_edits=False, inventory=None):
    """Phonetically close variant of ``keyword``.

    Exactly ``spec.delta`` distinct positions of the keyword are edited, each
    by replacing the phoneme there or inserting a new one before it
    (position ``len(keyword)`` means append, and only allows an insert).  A new
    phoneme never equals the keyword's phonemes at ``u - 1``, ``u`` or
    ``u + 1``.  All positions refer to the unedited keyword.

    Parameters
    ----------
    keyword : sequence of str
    spec : ConfusableSpec
    rng : numpy.random.Generator or int, optional
        Defaults to a generator seeded with ``spec.seed``.
    return_edits : bool
        Also return the list of :class:`Edit` applied.
    inventory : sequence of str, optional
        Phonemes that edits may introduce, e.g. those a P2V database covers.
        Defaults to every pronounceable phoneme of ``vocabulary``.
    """
    keyword = tuple(keyword)
    m = len(keyword)
    if m == 0:
        raise InvalidInputError("keyword must have at least one phoneme")
    vocabulary = vocabulary or PhonemeVocabulary.default()
    inventory = tuple(sorted(inventory)) if inventory is not None else vocabulary.pronounceable
    if len(inventory) <= 3:
        raise InvalidInputError("need more than three usable phonemes")
    rng = np.random.default_rng(spec.seed if rng is None else rng)

    slots = m + 1 if "insert" in spec.allowed_ops else m
    if spec.delta > slots:
        raise GenerationFailedError(
            f"cannot place {spec.delta} distinct edits in a keyword of length {m}"
        )
    for _ in range(spec.max_attempts):
        positions = sorted(int(u) for u in rng.choice(slots, size=spec.delta, replace=False))
        edits = []
        for u in positions:
            op = "insert" if u == m else spec.allowed_ops[int(rng.integers(len(spec.allowed_ops)))]
            banned = {keyword[k] for k in (u - 1, u, u + 1) if 0 <= k < m}
            candidates = [p for p in inventory if p not in banned]
            edits.append(Edit(op, u, candidates[int(rng.integers(len(candidates)))]))
        out = apply_edits(keyword, edits)
        if out != keyword:
            return (out, edits) if return_edits else out
    raise GenerationFailedError(
        f"no valid confusable for {' '.join(keyword)} after {spec.max_attempts} attempts"
    )


def apply_edits(keyword, edits) -> tuple[str, ...]:
    by_pos = {e.position: e for e in edits}
    out: list[str] = []
    for u in range(len(keyword) + 1):
        e = by_pos.get(u)
        if e is not None and e.op == "insert":
            out.append(e.phoneme)
        if u < len(keyword):
            out.append(e.phoneme if e is not None and e.op == "replace" else keyword[u])
    return tuple(out)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class SamplePair:
    """An utterance paired with a text; ``text`` is a phoneme tuple."""

    audio_id: str
    text: tuple[str, ...]
    label: int
    kind: str = ""


@dataclass
class TrainingBatch:
    keywords: list[str]
    positives: dict[str, list[SamplePair]]
    random_negatives: dict[str, list[SamplePair]]
    confusable_negatives: dict[str, list[SamplePair]]

    def pairs(self) -> list[SamplePair]:
        out = []
        for kw in self.keywords:
            out += self.positives[kw] + self.random_negatives[kw] + self.confusable_negatives[kw]
        return out


@dataclass
class DatasetIndex:
    """Keyword -> utterance ids, plus each keyword's phonemes."""

    utterances: dict[str, list[str]]
    phonemes: dict[str, tuple[str, ...]]

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "DatasetIndex":
        utts: dict[str, list[str]] = {}
        phons: dict[str, tuple[str, ...]] = {}
        for e in manifest:
            utts.setdefault(e.transcript, []).append(e.id)
            phons.setdefault(e.transcript, tuple(e.phonemes))
        return cls(utts, phons)

    @property
    def keywords(self) -> list[str]:
        return list(self.utterances)


@dataclass
class CEDTrainingConfig:
    batch_keywords: int = 32
    minibatch_size: int = 11
    deltas: tuple[int, ...] = (1, 2, 3)
    use_confusables: bool = True
    epochs: int = 20
    batches_per_epoch: int = 10
    lr: float = 1e-4
    seed: int = 0
    hidden: int | None = None
    random_negatives: str = "foreign-audio"

    def __post_init__(self):
        self.deltas = tuple(self.deltas)
        if self.random_negatives not in ("foreign-audio", "foreign-text"):
            raise InvalidInputError("random_negatives must be 'foreign-audio' or 'foreign-text'")

    @classmethod
    def from_dict(cls, d) -> "CEDTrainingConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _pick(rng, items, k):
    idx = rng.choice(len(items), size=k, replace=len(items) < k)
    return [items[int(i)] for i in idx]


def build_batch(keyword_pool: Sequence[str], index: DatasetIndex, rng,
                config: CEDTrainingConfig | None = None, vocabulary=None,
                inventory=None) -> TrainingBatch:
    """Sample keywords and assemble their three mini-batches.

    Positives pair the keyword text with its own utterances; random negatives
    pair it with utterances of other keywords; confusable negatives reuse the
    positive audio with a freshly generated confusable text each.  Without
    confusables, the third mini-batch holds further random negatives.
    """
    config = config or CEDTrainingConfig()
    rng = np.random.default_rng(rng)
    pool = [k for k in keyword_pool if index.utterances.get(k)]
    if len(pool) < len(keyword_pool):
        raise InvalidInputError("every pooled keyword needs at least one utterance")
    n_kw = config.batch_keywords
    if len(pool) < n_kw:
        logger.warning("keyword pool has %d entries; batch shrinks from %d", len(pool), n_kw)
        n_kw = len(pool)
    keywords = [pool[int(i)] for i in rng.choice(len(pool), size=n_kw, replace=False)]
    size = config.minibatch_size

    positives, randoms, confusables = {}, {}, {}
    for kw in keywords:
        text = index.phonemes[kw]
        pos_ids = _pick(rng, index.utterances[kw], size)
        positives[kw] = [SamplePair(u, text, 1, "positive") for u in pos_ids]

        n_random = size if config.use_confusables else 2 * size
        others = [k for k in pool if k != kw and index.phonemes[k] != text]
        if not others:
            raise InvalidInputError("random negatives need at least two distinct keywords")
        negs = []
        for _ in range(n_random):
            other = others[int(rng.integers(len(others)))]
            if config.random_negatives == "foreign-audio":
                u = index.utterances[other][int(rng.integers(len(index.utterances[other])))]
                negs.append(SamplePair(u, text, 0, "random"))
            else:
                u = pos_ids[int(rng.integers(len(pos_ids)))]
                negs.append(SamplePair(u, index.phonemes[other], 0, "random"))
        if config.use_confusables:
            randoms[kw] = negs
            conf = []
            for u in pos_ids:
                delta = int(config.deltas[int(rng.integers(len(config.deltas)))])
                delta = min(delta, len(text) + 1)
                fake = generate_confusable(text, ConfusableSpec(delta), rng, vocabulary,
                                           inventory=inventory)
                conf.append(SamplePair(u, fake, 0, "confusable"))
            confusables[kw] = conf
        else:
            randoms[kw] = negs[:size]
            confusables[kw] = negs[size:]
    return TrainingBatch(keywords, positives, randoms, confusables)


# ---------------------------------------------------------------------------
# verifier training


class AgreementCache:
    """Agreement matrices for (phonemes, utterance) pairs.  Deterministic
    inputs only, so memoizing is safe."""

    def __init__(self, db: P2VDatabase, embeddings: dict[str, np.ndarray], maxsize=200_000):
        self.db = db
        self.embeddings = embeddings
        self.cache: dict = {}
        self.maxsize = maxsize

    def get(self, pair: SamplePair):
        key = (pair.text, pair.audio_id)
        hit = self.cache.get(key)
        if hit is None:
            emb = self.embeddings[pair.audio_id]
            try:
                hit = agreement_for_pair(encode_phonemes(pair.text, self.db), emb)
            except AlignmentInfeasibleError:
                hit = False
            if len(self.cache) < self.maxsize:
                self.cache[key] = hit
        return None if hit is False else hit


@dataclass
class CEDTrainingResult:
    head: VerifierHead
    log: list[dict] = field(default_factory=list)
    skipped_infeasible: int = 0
    encoder_hash: str = ""
    threshold: float | None = None


def _dev_metrics(head, cache, dev_pairs):
    from .evaluation import auc

    out = {}
    for mode, pairs in dev_pairs.items():
        agreements, labels = [], []
        for p in pairs:
            a = cache.get(p)
            if a is not None:
                agreements.append(a)
                labels.append(p.label)
        if agreements and 0 < sum(labels) < len(labels):
            out[mode] = auc(score_batch(agreements, head), labels)
        else:
            out[mode] = None
    return out


def train_ced(encoder: Encoder, db: P2VDatabase, manifest: Manifest,
              config: CEDTrainingConfig | None = None, dev_manifest: Manifest | None = None,
              dev_pairs_per_anchor=10, log=None) -> CEDTrainingResult:
    """Train the verifier head with two-class cross-entropy; the encoder stays frozen.

    Audio embeddings are computed once up front in evaluation mode.  Pairs
    whose text is longer than the audio's frame count cannot be aligned and
    are dropped from the batch (counted in ``skipped_infeasible``).
    """
    config = config or CEDTrainingConfig()
    if db.dim != encoder.dim:
        raise IncompatibleCheckpointError(
            f"P2V dimension {db.dim} does not match encoder dimension {encoder.dim}"
        )
    source_hash = db.source.get("checkpoint_hash")
    encoder_hash = encoder.weights_hash()
    if source_hash is not None and source_hash != encoder_hash:
        raise IncompatibleCheckpointError("P2V database was built from a different encoder")
    vocabulary = encoder.vocabulary
    # confusables may only introduce phonemes the database can embed
    inventory = [p for p in vocabulary.pronounceable if p in db]

    embeddings = dict(zip((e.id for e in manifest),
                          encoder.encode_batch([manifest.features(e) for e in manifest])))
    index = DatasetIndex.from_manifest(manifest)
    cache = AgreementCache(db, embeddings)

    dev_pairs = {}
    if dev_manifest is not None:
        from .evaluation import build_test_pairs

        dev_embeddings = encoder.encode_batch([dev_manifest.features(e) for e in dev_manifest])
        embeddings.update(zip((e.id for e in dev_manifest), dev_embeddings))
        for mode in ("easy", "hard"):
            dev_pairs[mode] = build_test_pairs(dev_manifest, mode, dev_pairs_per_anchor,
                                               rng=config.seed + 1, vocabulary=vocabulary,
                                               inventory=inventory)

    torch.manual_seed(config.seed)
    head = VerifierHead(encoder.dim, config.hidden or encoder.dim)
    optimizer = torch.optim.Adam(head.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    result = CEDTrainingResult(head, encoder_hash=encoder_hash)

    for epoch in range(config.epochs):
        head.train()
        losses = []
        for _ in range(config.batches_per_epoch):
            batch = build_batch(index.keywords, index, rng, config, vocabulary, inventory)
            agreements, labels = [], []
            for pair in batch.pairs():
                a = cache.get(pair)
                if a is None:
                    result.skipped_infeasible += 1
                    continue
                agreements.append(a)
                labels.append(pair.label)
            loss = head_loss(head, agreements, labels)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite verifier loss in epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        record = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        metrics = _dev_metrics(head, cache, dev_pairs) if dev_pairs else {}
        record["dev_auc_easy"] = metrics.get("easy")
        record["dev_auc_hard"] = metrics.get("hard")
        result.log.append(record)
        logger.info("ced epoch %d loss %.4f dev auc easy %s hard %s", epoch + 1,
                    record["loss"], record["dev_auc_easy"], record["dev_auc_hard"])
        if log is not None:
            log(record)
    head.eval()

    if dev_pairs:
        from .evaluation import eer

        agreements, labels = [], []
        for pairs in dev_pairs.values():
            for p in pairs:
                a = cache.get(p)
                if a is not None:
                    agreements.append(a)
                    labels.append(p.label)
        if agreements and 0 < sum(labels) < len(labels):
            result.threshold = eer(score_batch(agreements, head), labels)[1]

    if encoder.weights_hash() != encoder_hash:
        raise ConsistencyError("encoder weights changed during verifier training")
    return result


def write_training_log(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def confusable_distance_ok(keyword, confusable, delta) -> bool:
    d = phoneme_edit_distance(keyword, confusable)
    return 1 <= d <= delta
