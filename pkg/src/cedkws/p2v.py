"""Phoneme-to-vector database: per-phoneme mean audio embeddings harvested
from utterances the encoder decodes perfectly, and text embeddings
synthesized by stacking those vectors."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import DecodedSequence, Encoder, greedy_decode
from .errors import ConsistencyError, CoverageError, InvalidInputError
from .features import Manifest, file_sha256
from .phonemes import Lexicon, cer, grapheme_to_phoneme

logger = logging.getLogger(__name__)

P2V_VERSION = 1


@dataclass
class LocalVectorRecord:
    phoneme: str
    vector: np.ndarray
    utterance_id: str
    frame_range: tuple[int, int]


def collect_local_vectors(embedding, decoded: DecodedSequence, utterance_id="",
                          phonemes=None) -> list[LocalVectorRecord]:
    """One local vector per emitted phoneme: the mean of the embedding rows in
    its inclusive frame range."""
    emb = np.asarray(embedding)
    labels = phonemes if phonemes is not None else decoded.phonemes or decoded.ids
    records = []
    for label, (l, r) in zip(labels, decoded.segments):
        if not 0 <= l <= r < len(emb):
            raise ConsistencyError(
                f"segment ({l}, {r}) outside an embedding of {len(emb)} frames"
            )
        vec = emb[l:r + 1].astype(np.float64).mean(axis=0)
        records.append(LocalVectorRecord(label, vec, utterance_id, (l, r)))
    return records


class VectorAccumulator:
    """Running (sum, count) per phoneme.  Merging is associative and
    commutative, so partial results from parallel workers can be combined in
    any order."""

    def __init__(self, dim):
        self.dim = dim
        self.sums: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}

    def add(self, phoneme, vector):
        if phoneme not in self.sums:
            self.sums[phoneme] = np.zeros(self.dim)
            self.counts[phoneme] = 0
        self.sums[phoneme] += vector
        self.counts[phoneme] += 1

    def merge(self, other: "VectorAccumulator") -> "VectorAccumulator":
        out = VectorAccumulator(self.dim)
        for acc in (self, other):
            for p, s in acc.sums.items():
                out.sums[p] = out.sums.get(p, 0) + s
                out.counts[p] = out.counts.get(p, 0) + acc.counts[p]
        return out

    def means(self) -> dict[str, np.ndarray]:
        return {p: self.sums[p] / self.counts[p] for p in self.sums}


@dataclass
class P2VDatabase:
    dim: int
    vectors: dict[str, np.ndarray]
    counts: dict[str, int]
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        for p, v in self.vectors.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (self.dim,):
                raise InvalidInputError(f"vector for {p} has shape {v.shape}, expected ({self.dim},)")
            self.vectors[p] = v
            if self.counts.get(p, 0) < 1:
                raise InvalidInputError(f"phoneme {p} has no contributing local vectors")

    def __contains__(self, phoneme):
        return phoneme in self.vectors

    def to_json(self) -> str:
        doc = {
            "version": P2V_VERSION,
            "dim": self.dim,
            "source": self.source,
            "phonemes": {
                p: {"count": int(self.counts[p]), "vector": [float(x) for x in self.vectors[p]]}
                for p in sorted(self.vectors)
            },
        }
        return json.dumps(doc, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "P2VDatabase":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != P2V_VERSION:
            raise InvalidInputError(f"{path}: unsupported P2V version {doc.get('version')}")
        vectors = {p: np.array(v["vector"], dtype=np.float64) for p, v in doc["phonemes"].items()}
        counts = {p: int(v["count"]) for p, v in doc["phonemes"].items()}
        return cls(int(doc["dim"]), vectors, counts, doc.get("source", {}))

    def lookup(self, phonemes) -> np.ndarray:
        missing = [p for p in dict.fromkeys(phonemes) if p not in self.vectors]
        if missing:
            raise CoverageError(f"P2V database has no vector for {', '.join(missing)}", missing)
        return np.stack([self.vectors[p] for p in phonemes])


@dataclass
class P2VBuildReport:
    total_utterances: int
    cer_zero: int
    sampled: int
    counts: dict[str, int]
    missing: list[str]
    fallback_used: bool
    records: list[LocalVectorRecord] = field(default_factory=list, repr=False)

    @property
    def yield_rate(self) -> float:
        return self.cer_zero / self.total_utterances if self.total_utterances else 0.0

    def to_dict(self) -> dict:
        return {
            "total_utterances": self.total_utterances,
            "cer_zero": self.cer_zero,
            "yield_rate": self.yield_rate,
            "sampled": self.sampled,
            "counts": dict(sorted(self.counts.items())),
            "missing": self.missing,
            "fallback_used": self.fallback_used,
        }


def build_p2v(manifest: Manifest, encoder: Encoder, sample_cap=2000, seed=0,
              allow_fallback=False, keep_records=False, checkpoint_hash=None):
    """Build the P2V database from utterances with perfect greedy decodes.

    The encoder runs over every utterance; those whose decode matches the
    reference phonemes exactly form the candidate pool, from which at most
    ``sample_cap`` are drawn uniformly without replacement.  Each phoneme's
    global vector is the unweighted mean of all its local vectors.

    Every phoneme occurring in the manifest's references must end up with a
    vector; otherwise :class:`CoverageError` is raised, unless
    ``allow_fallback`` fills the gaps with the mean of the other vectors.

    Returns
    -------
    (P2VDatabase, P2VBuildReport)
    """
    if sample_cap < 1:
        raise InvalidInputError("sample_cap must be positive")
    feats = [manifest.features(e) for e in manifest]
    embeddings = encoder.encode_batch(feats)

    perfect = []
    for entry, emb in zip(manifest, embeddings):
        decoded = greedy_decode(encoder.predict_posteriors(emb), encoder.vocabulary.blank_id,
                                encoder.vocabulary)
        if decoded.phonemes and cer(tuple(entry.phonemes), decoded.phonemes) == 0.0:
            perfect.append((entry.id, emb, decoded))

    rng = np.random.default_rng(seed)
    k = min(sample_cap, len(perfect))
    chosen = sorted(rng.choice(len(perfect), size=k, replace=False)) if k else []

    acc = VectorAccumulator(encoder.dim)
    records = []
    for idx in chosen:
        utt_id, emb, decoded = perfect[idx]
        for rec in collect_local_vectors(emb, decoded, utt_id):
            acc.add(rec.phoneme, rec.vector)
            if keep_records:
                records.append(rec)

    vectors = acc.means()
    counts = dict(acc.counts)
    required = sorted({p for e in manifest for p in e.phonemes})
    missing = [p for p in required if p not in vectors]
    fallback_used = False
    if missing:
        if not allow_fallback or not vectors:
            raise CoverageError(
                f"no local vectors for {len(missing)} phoneme(s): {', '.join(missing)} "
                f"({len(perfect)}/{len(manifest)} utterances decoded perfectly)",
                missing,
            )
        backoff = np.mean(np.stack([vectors[p] for p in sorted(vectors)]), axis=0)
        for p in missing:
            vectors[p] = backoff.copy()
            counts[p] = counts.get(p, 0) or 1
        fallback_used = True
        logger.warning("mean back-off used for %s", ", ".join(missing))

    source = {
        "checkpoint_hash": checkpoint_hash or encoder.weights_hash(),
        "manifest_hash": manifest.digest,
        "sample_cap": int(sample_cap),
        "seed": int(seed),
        "fallback_used": fallback_used,
    }
    if fallback_used:
        source["fallback_phonemes"] = missing
    db = P2VDatabase(encoder.dim, vectors, counts, source)
    report = P2VBuildReport(len(manifest), len(perfect), k, dict(acc.counts), missing,
                            fallback_used, records)
    return db, report


def encode_phonemes(phonemes, db: P2VDatabase) -> np.ndarray:
    """Text embedding of a phoneme sequence: row ``i`` is the vector of phoneme ``i``."""
    if len(phonemes) == 0:
        raise InvalidInputError("empty phoneme sequence")
    return db.lookup(phonemes)


def encode_text(text, lexicon: Lexicon, db: P2VDatabase) -> np.ndarray:
    return encode_phonemes(grapheme_to_phoneme(text, lexicon), db)


def export_local_vector_plot_data(records, path, per_phoneme=100, seed=0) -> int:
    """Write up to ``per_phoneme`` randomly chosen local vectors per phoneme as
    TSV rows ``phoneme, utterance_id, v0, v1, ...`` for an external 2-D
    projection.  Returns the number of rows written."""
    by_phoneme: dict[str, list[LocalVectorRecord]] = {}
    for rec in records:
        by_phoneme.setdefault(rec.phoneme, []).append(rec)
    rng = np.random.default_rng(seed)
    rows = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t")
        if not by_phoneme:
            logger.warning("no local vectors to export")
            return 0
        dim = len(next(iter(records)).vector)
        writer.writerow(["phoneme", "utterance_id"] + [f"v{i}" for i in range(dim)])
        for p in sorted(by_phoneme):
            recs = by_phoneme[p]
            if len(recs) < per_phoneme:
                logger.info("phoneme %s has only %d local vectors (asked for %d)",
                            p, len(recs), per_phoneme)
            pick = rng.choice(len(recs), size=min(per_phoneme, len(recs)), replace=False)
            for i in sorted(pick):
                writer.writerow([p, recs[i].utterance_id] + [repr(float(x)) for x in recs[i].vector])
                rows += 1
    return rows


def cluster_separation(records) -> tuple[float, float]:
    """Mean cosine similarity of local vectors within and across phonemes."""
    labels = [r.phoneme for r in records]
    v = np.stack([r.vector for r in records])
    v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    sim = v @ v.T
    same = np.equal.outer(labels, labels)
    np.fill_diagonal(same, False)
    diff = ~np.equal.outer(labels, labels)
    return float(sim[same].mean()), float(sim[diff].mean())


def db_hash(path) -> str:
    return file_sha256(path)
