"""
A small end-to-end run
======================

Synthesize a corpus, train the encoder with CTC, build the phoneme-to-vector
table, train the verifier head and score test pairs.  The configuration is
shrunk so the whole thing runs in a few minutes on one CPU core; the full
desk-scale run lives in the acceptance tests.

Usage: python demos/03_small_pipeline.py [work_dir]
"""

import json
import sys
from pathlib import Path

from cedkws import pipeline
from cedkws.bundle import Bundle
from cedkws.encoder import evaluate_cer
from cedkws.features import Manifest

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
work.mkdir(exist_ok=True)

small = {
    "corpus": {
        "keywords": ["stop", "shop", "cat", "map", "light", "night", "play", "music",
                     "computer", "banana", "garden", "morning"],
        "test_keywords": ["spot", "bat", "commuter"],
        "noise_stddev": 0.6,
        "splits": {
            "long": {"utterances_per_keyword": 30, "words_per_utterance": [2, 3]},
            "train": {"utterances_per_keyword": 30},
            "dev": {"utterances_per_keyword": 5},
            "test": {"utterances_per_keyword": 10, "include_test_keywords": True},
        },
    },
    "encoder": {"layers": 2, "dim": 96},
    "ctc": {"epochs": 20, "warmup_steps": 60},
    "ced": {"batch_keywords": 12, "epochs": 8, "batches_per_epoch": 8},
}
(work / "config.json").write_text(json.dumps(small, indent=2))
cfg = pipeline.PipelineConfig.load(work / "config.json")

manifests = pipeline.synthesize(cfg, work / "corpus")
print("corpus:", {k: len(Manifest.load(v)) for k, v in manifests.items()})

pipeline.train_encoder(cfg, manifests["long"], work / "encoder_long.ckpt")
encoder = pipeline.fine_tune_encoder(cfg, work / "encoder_long.ckpt", manifests["train"],
                                     work / "encoder.ckpt")
print(f"held-out phoneme CER: {evaluate_cer(encoder, Manifest.load(manifests['dev'])):.3f}")

db, report = pipeline.make_p2v(work / "encoder.ckpt", manifests["train"], work / "p2v.json",
                               seed=cfg.seed, plot_data=work / "local_vectors.tsv")
print(f"P2V: {len(db.vectors)} phonemes, CER-0 yield {report.yield_rate:.2f}")

result = pipeline.make_bundle(work / "encoder.ckpt", work / "p2v.json", manifests["train"],
                              work / "bundle", cfg.ced_config(), manifests["dev"])
for rec in result.log:
    print(rec)

for mode in ("easy", "hard"):
    r = pipeline.evaluate_bundle(work / "bundle", manifests["test"], mode, 10, cfg.seed)
    print(f"{mode}: AUC {r.auc:.2f}  EER {r.eer:.2f}")

bundle = Bundle.load(work / "bundle")
test = Manifest.load(manifests["test"])
entry = next(e for e in test if e.transcript == "spot")
for text in ("spot", "stop", "banana"):
    res = bundle.verify(test.features(entry), text, feature_kind="synthetic")
    print(f"audio 'spot' vs text {text!r}: {res.score:.3f}")
