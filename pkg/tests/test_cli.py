import json

import numpy as np
import pytest
import torch

from cedkws.bundle import Bundle
from cedkws.cli import run
from cedkws.encoder import Encoder, EncoderConfig
from cedkws.features import SyntheticCorpusSpec, build_synthetic_corpus, write_features, write_wav
from cedkws.p2v import P2VDatabase
from cedkws.phonemes import Lexicon, PhonemeVocabulary, phoneme_edit_distance
from cedkws.verifier import VerifierHead

VOCAB = PhonemeVocabulary.default()


@pytest.fixture(scope="module")
def tiny_bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(layers=1, dim=16, attention_heads=2, ffn_expansion=2),
                  {"kind": "synthetic", "n_mels": 80, "prototype_seed": 0})
    enc.save(root / "enc.ckpt")
    rng = np.random.default_rng(0)
    vectors = {p: rng.standard_normal(16) for p in VOCAB.pronounceable}
    P2VDatabase(16, vectors, {p: 1 for p in vectors},
                {"checkpoint_hash": enc.weights_hash()}).save(root / "p2v.json")
    VerifierHead(16, 16).save(root / "head.ckpt", vocab_hash=VOCAB.hash)
    Bundle.write(root / "b", root / "enc.ckpt", root / "p2v.json", root / "head.ckpt", 0.5, 0)
    spec = SyntheticCorpusSpec(["stop", "cat", "computer", "banana"], utterances_per_keyword=3,
                               frames_per_phoneme=(6, 8), seed=1)
    manifest = build_synthetic_corpus(spec, root, name="test")
    return root / "b", manifest


def test_confusables_output(capsys):
    assert run(["confusables", "--keyword", "stop", "--delta", "2", "--count", "20"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 20
    stop = Lexicon.default().pronounce("stop")
    for line in lines:
        d = phoneme_edit_distance(stop, line.split())
        assert 1 <= d <= 2


def test_g2p(capsys):
    assert run(["g2p", "--text", "stop"]) == 0
    assert capsys.readouterr().out.strip() == "S T AA1 P"


def test_usage_errors_exit_1(capsys):
    assert run([]) == 1
    assert run(["confusables", "--keyword", "stop", "--delta", "7"]) == 1
    assert run(["eval", "--bundle", "/nonexistent", "--manifest", "x", "--mode", "easy"]) == 1


def test_oov_exits_2(capsys):
    assert run(["g2p", "--text", "blorptastic"]) == 2
    assert "blorptastic" in capsys.readouterr().err


def test_verify_feature_file(tiny_bundle, tmp_path, capsys):
    bundle, _ = tiny_bundle
    write_features(tmp_path / "x.feat", np.random.default_rng(0).standard_normal((40, 80)))
    assert run(["verify", "--bundle", str(bundle), "--audio", str(tmp_path / "x.feat"),
                "--text", "stop"]) == 0
    score, verdict = capsys.readouterr().out.split("\t")
    assert 0 <= float(score) <= 1
    assert verdict.strip() in ("match", "non-match")


def test_verify_infeasible_scores_zero(tiny_bundle, tmp_path, capsys):
    bundle, _ = tiny_bundle
    write_features(tmp_path / "short.feat", np.zeros((4, 80), dtype=np.float32))
    assert run(["verify", "--bundle", str(bundle), "--audio", str(tmp_path / "short.feat"),
                "--text", "computer"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("0.000000\tnon-match") and "infeasible" in out


def test_verify_rejects_wav_for_synthetic_encoder(tiny_bundle, tmp_path, capsys):
    bundle, _ = tiny_bundle
    write_wav(tmp_path / "a.wav", 0.1 * np.random.default_rng(0).standard_normal(16000))
    assert run(["verify", "--bundle", str(bundle), "--audio", str(tmp_path / "a.wav"),
                "--text", "stop"]) == 2


def test_verify_hash_mismatch_exits_2(tiny_bundle, tmp_path, capsys):
    import shutil

    bundle, _ = tiny_bundle
    broken = tmp_path / "broken"
    shutil.copytree(bundle, broken)
    doc = json.loads((broken / "p2v.json").read_text())
    doc["source"]["seed"] = 99
    (broken / "p2v.json").write_text(json.dumps(doc))
    write_features(tmp_path / "x.feat", np.zeros((40, 80), dtype=np.float32))
    assert run(["verify", "--bundle", str(broken), "--audio", str(tmp_path / "x.feat"),
                "--text", "stop"]) == 2
    assert "IncompatibleBundleError" in capsys.readouterr().err


def test_eval_report_schema(tiny_bundle, tmp_path, capsys):
    bundle, manifest = tiny_bundle
    before = (bundle / "bundle.json").read_bytes()
    out = tmp_path / "report.json"
    assert run(["eval", "--bundle", str(bundle), "--manifest", str(manifest), "--mode", "easy",
                "--per-anchor", "3", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report) == {"mode", "n_pos", "n_neg", "auc", "eer", "threshold_at_eer",
                           "infeasible_pairs", "bundle_hashes"}
    assert report["mode"] == "easy"
    assert set(report["bundle_hashes"]) == {"encoder", "p2v", "verifier"}
    assert 0 <= report["auc"] <= 100 and 0 <= report["eer"] <= 100
    assert (bundle / "bundle.json").read_bytes() == before
