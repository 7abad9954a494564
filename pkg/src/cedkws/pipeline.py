"""Pipeline configuration and the end-to-end steps the CLI exposes.

Each step reads its inputs from disk and writes new artifacts; none modifies
its inputs.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .bundle import Bundle
from .encoder import Encoder, EncoderConfig, OptimizerConfig, fine_tune, train_ctc
from .errors import InvalidInputError
from .evaluation import MetricsReport, build_test_pairs
from .features import Manifest, SyntheticCorpusSpec, build_synthetic_corpus, file_sha256
from .p2v import P2VDatabase, build_p2v, export_local_vector_plot_data
from .phonemes import Lexicon, PhonemeVocabulary
from .training import CEDTrainingConfig, train_ced, write_training_log

logger = logging.getLogger(__name__)

SPLIT_SEED_OFFSETS = {"long": 101, "train": 202, "dev": 303, "test": 404}


def default_config() -> dict:
    return json.loads((resources.files("cedkws") / "data" / "desk_config.json").read_text())


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    """Parsed pipeline configuration.  Missing keys take the desk defaults;
    relative paths resolve against ``work_dir`` (``$CED_WORKDIR`` or cwd)."""

    raw: dict
    work_dir: Path = field(default_factory=lambda: Path(os.environ.get("CED_WORKDIR", ".")))

    @classmethod
    def load(cls, path=None, overrides=None) -> "PipelineConfig":
        raw = default_config()
        if path is not None:
            raw = _merge(raw, json.loads(Path(path).read_text()))
        if overrides:
            raw = _merge(raw, overrides)
        cfg = cls(raw)
        for key in ("lexicon", "vocabulary"):
            p = cfg.path(key)
            if p is not None and not p.exists():
                raise InvalidInputError(f"configured {key} file {p} does not exist")
        return cfg

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    def path(self, key):
        value = self.raw.get("paths", {}).get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.work_dir / p

    def vocabulary(self) -> PhonemeVocabulary:
        p = self.path("vocabulary")
        return PhonemeVocabulary.load(p) if p else PhonemeVocabulary.default()

    def lexicon(self) -> Lexicon:
        p = self.path("lexicon")
        vocab = self.vocabulary()
        return Lexicon.load(p, vocabulary=vocab) if p else Lexicon.default()

    def corpus_spec(self, split: str) -> SyntheticCorpusSpec:
        c = self.raw["corpus"]
        s = c["splits"][split]
        keywords = list(c["keywords"])
        if s.get("include_test_keywords"):
            keywords += [k for k in c.get("test_keywords", []) if k not in keywords]
        return SyntheticCorpusSpec(
            keywords=keywords,
            prototype_seed=c.get("prototype_seed", 0),
            frames_per_phoneme=tuple(s.get("frames_per_phoneme", c["frames_per_phoneme"])),
            noise_stddev=s.get("noise_stddev", c["noise_stddev"]),
            utterances_per_keyword=s["utterances_per_keyword"],
            words_per_utterance=tuple(s.get("words_per_utterance", (1, 1))),
            seed=self.seed + SPLIT_SEED_OFFSETS.get(split, 0),
        )

    def encoder_config(self) -> EncoderConfig:
        vocab = self.vocabulary()
        return EncoderConfig.from_dict({**self.raw["encoder"], "num_classes": vocab.num_classes})

    def ctc_config(self) -> OptimizerConfig:
        return OptimizerConfig.from_dict({"seed": self.seed, **self.raw["ctc"]})

    def fine_tune_config(self) -> OptimizerConfig:
        ft = dict(self.raw.get("fine_tune", {}))
        if "peak_lr" not in ft:
            ft["peak_lr"] = self.raw["ctc"].get("peak_lr", 1e-3) / 10
        ft.setdefault("schedule", "constant")
        return OptimizerConfig.from_dict({"seed": self.seed, **ft})

    def ced_config(self, **overrides) -> CEDTrainingConfig:
        return CEDTrainingConfig.from_dict({"seed": self.seed, **self.raw["ced"], **overrides})


# ---------------------------------------------------------------------------
# steps


def synthesize(cfg: PipelineConfig, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lexicon = cfg.lexicon()
    manifests = {}
    for split in cfg.raw["corpus"]["splits"]:
        spec = cfg.corpus_spec(split)
        manifests[split] = build_synthetic_corpus(spec, out_dir, lexicon, name=split)
    (out_dir / "corpus.json").write_text(json.dumps(
        {"seed": cfg.seed, "feature_config": cfg.corpus_spec("train").feature_config(),
         "manifests": {k: v.name for k, v in manifests.items()}}, indent=2, sort_keys=True))
    return manifests


def _feature_config_for(manifest_path, cfg: PipelineConfig) -> dict:
    corpus = Path(manifest_path).parent / "corpus.json"
    if corpus.exists():
        return json.loads(corpus.read_text())["feature_config"]
    return {"kind": "filterbank"}


def train_encoder(cfg: PipelineConfig, manifest_path, out_path, log=None) -> Encoder:
    manifest = Manifest.load(manifest_path)
    encoder, report = train_ctc(manifest, cfg.encoder_config(), cfg.ctc_config(),
                                _feature_config_for(manifest_path, cfg), cfg.vocabulary(), log)
    encoder.save(out_path, seed=cfg.seed)
    logger.info("encoder parameters: %d", encoder.param_count)
    return encoder


def fine_tune_encoder(cfg: PipelineConfig, encoder_path, manifest_path, out_path, log=None) -> Encoder:
    encoder = Encoder.load(encoder_path, cfg.vocabulary())
    manifest = Manifest.load(manifest_path)
    tuned, _ = fine_tune(encoder, manifest, cfg.fine_tune_config(), cfg.vocabulary(), log)
    tuned.save(out_path, seed=cfg.seed)
    return tuned


def make_p2v(encoder_path, manifest_path, out_path, sample_cap=2000, seed=0,
             allow_fallback=False, plot_data=None, per_phoneme=100):
    encoder = Encoder.load(encoder_path)
    manifest = Manifest.load(manifest_path)
    db, report = build_p2v(manifest, encoder, sample_cap, seed, allow_fallback,
                           keep_records=plot_data is not None,
                           checkpoint_hash=encoder.weights_hash())
    db.save(out_path)
    Path(out_path).with_suffix(".report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if plot_data is not None:
        export_local_vector_plot_data(report.records, plot_data, per_phoneme, seed)
    return db, report


def make_bundle(encoder_path, p2v_path, manifest_path, out_dir, ced_config: CEDTrainingConfig,
                dev_manifest_path=None, log=None):
    """Train a verifier head and write a complete bundle directory."""
    encoder = Encoder.load(encoder_path)
    db = P2VDatabase.load(p2v_path)
    manifest = Manifest.load(manifest_path)
    dev = Manifest.load(dev_manifest_path) if dev_manifest_path else None
    result = train_ced(encoder, db, manifest, ced_config, dev, log=log)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    head_path = result.head.save(
        out_dir / "verifier.ckpt",
        vocab_hash=encoder.vocabulary.hash,
        encoder_weights_hash=result.encoder_hash,
        p2v_hash=file_sha256(p2v_path),
        train_manifest_hash=manifest.digest,
        training_config=ced_config.to_dict(),
        skipped_infeasible=result.skipped_infeasible,
        seed=ced_config.seed,
    )
    write_training_log(result.log, out_dir / "train_log.jsonl")
    threshold = result.threshold if result.threshold is not None else 0.5
    Bundle.write(out_dir, encoder_path, p2v_path, head_path, threshold, ced_config.seed,
                 encoder.vocabulary.hash)
    return result


def evaluate_bundle(bundle_dir, manifest_path, mode, per_anchor=20, seed=0, hard_range=(1, 3),
                    report_path=None) -> MetricsReport:
    bundle = Bundle.load(bundle_dir)
    manifest = Manifest.load(manifest_path)
    pairs = build_test_pairs(manifest, mode, per_anchor, rng=seed, hard_range=tuple(hard_range),
                             vocabulary=bundle.encoder.vocabulary,
                             inventory=[p for p in bundle.encoder.vocabulary.pronounceable
                                        if p in bundle.db])
    report, _ = bundle.evaluate(manifest, pairs, mode)
    if report_path is not None:
        report.save(report_path)
    return report


def store_threshold(bundle_dir, threshold):
    path = Path(bundle_dir) / "bundle.json"
    doc = json.loads(path.read_text())
    doc["threshold"] = threshold
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
