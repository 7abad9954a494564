"""Acceptance suite: one PASS/FAIL line per criterion, printed in the
terminal summary.  The desk-scale pipeline runs once per session."""

import itertools
import time

import numpy as np
import pytest
import torch

from cedkws import pipeline
from cedkws.encoder import Encoder, count_parameters, evaluate_cer, greedy_decode
from cedkws.evaluation import auc, eer
from cedkws.features import Manifest, extract_filterbank
from cedkws.p2v import build_p2v, encode_phonemes
from cedkws.phonemes import PhonemeVocabulary, phoneme_edit_distance
from cedkws.training import ConfusableSpec, generate_confusable
from cedkws.verifier import (
    VerifierHead,
    agreement_for_pair,
    check_path,
    cosine_matrix,
    dsp_align,
    head_loss,
    path_score,
)

pytestmark = pytest.mark.slow

VOCAB = PhonemeVocabulary.default()


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Synthesize, train, fine-tune, build P2V, train both verifier variants
    and evaluate them, recording timings and metrics."""
    out = tmp_path_factory.mktemp("desk")
    cfg = pipeline.PipelineConfig.load()
    res = {"cfg": cfg, "out": out}
    t0 = time.perf_counter()
    manifests = pipeline.synthesize(cfg, out / "corpus")
    res["manifests"] = manifests
    pipeline.train_encoder(cfg, manifests["long"], out / "encoder_long.ckpt")
    encoder = pipeline.fine_tune_encoder(cfg, out / "encoder_long.ckpt", manifests["train"],
                                         out / "encoder.ckpt")
    res["cer"] = evaluate_cer(encoder, Manifest.load(manifests["dev"]))
    db, p2v_report = pipeline.make_p2v(out / "encoder.ckpt", manifests["train"], out / "p2v.json",
                                       cfg.raw["p2v"]["sample_cap"], cfg.seed)
    res["p2v_report"] = p2v_report
    res["hash_before"] = Encoder.load(out / "encoder.ckpt").weights_hash()
    conf = pipeline.make_bundle(out / "encoder.ckpt", out / "p2v.json", manifests["train"],
                                out / "bundle_conf", cfg.ced_config(), manifests["dev"])
    res["hash_during"] = conf.encoder_hash
    res["hash_after"] = Encoder.load(out / "bundle_conf" / "encoder.ckpt").weights_hash()
    ev = cfg.raw["eval"]
    res["easy"] = pipeline.evaluate_bundle(out / "bundle_conf", manifests["test"], "easy",
                                           ev["per_anchor"], cfg.seed, ev["hard_range"])
    res["pipeline_seconds"] = time.perf_counter() - t0
    res["hard_conf"] = pipeline.evaluate_bundle(out / "bundle_conf", manifests["test"], "hard",
                                                ev["per_anchor"], cfg.seed, ev["hard_range"])
    pipeline.make_bundle(out / "encoder.ckpt", out / "p2v.json", manifests["train"],
                         out / "bundle_noconf", cfg.ced_config(use_confusables=False),
                         manifests["dev"])
    res["hard_noconf"] = pipeline.evaluate_bundle(out / "bundle_noconf", manifests["test"], "hard",
                                                  ev["per_anchor"], cfg.seed, ev["hard_range"])
    res["encoder"] = encoder
    res["db"] = db
    return res


def test_criterion_01_end_to_end(desk_run, report_line):
    cfg = desk_run["cfg"]
    corpus = cfg.raw["corpus"]
    manifests = desk_run["manifests"]
    train = Manifest.load(manifests["train"])
    n_keywords = len(train.by_transcript())
    per_keyword = min(len(v) for v in train.by_transcript().values())
    needed = {p for split in manifests.values() for e in Manifest.load(split) for p in e.phonemes}
    covered = needed <= set(desk_run["db"].vectors) and not desk_run["p2v_report"].fallback_used
    easy = desk_run["easy"]
    minutes = desk_run["pipeline_seconds"] / 60
    checks = [n_keywords >= 20, per_keyword >= 50, desk_run["cer"] <= 0.05, covered,
              easy.auc >= 95.0, easy.eer <= 10.0, minutes <= 20.0]
    ok = report_line(1, all(checks),
                     f"{n_keywords} keywords x {per_keyword} utts, noise {corpus['noise_stddev']}; "
                     f"held-out CER {desk_run['cer']:.4f} (<= 0.05); P2V coverage "
                     f"{len(needed & set(desk_run['db'].vectors))}/{len(needed)}; easy AUC "
                     f"{easy.auc:.2f} (>= 95), EER {easy.eer:.2f} (<= 10); {minutes:.1f} min (<= 20)")
    assert ok


def test_criterion_02_confusable_ablation(desk_run, report_line):
    with_conf = desk_run["hard_conf"].auc
    without = desk_run["hard_noconf"].auc
    ok = report_line(2, with_conf >= without,
                     f"hard AUC with confusables {with_conf:.2f} vs without {without:.2f} "
                     f"(EER {desk_run['hard_conf'].eer:.2f} vs {desk_run['hard_noconf'].eer:.2f})")
    assert ok


def _all_paths(m, n):
    for steps in itertools.product((0, 1), repeat=n - 1):
        if sum(steps) == m - 1:
            yield np.concatenate(([0], np.cumsum(steps))).astype(int)


def test_criterion_03_alignment_oracle(report_line):
    rng = np.random.default_rng(3)
    cases = exact = valid = 0
    while cases < 1000:
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        if n < m:
            continue
        s = cosine_matrix(rng.standard_normal((m, 8)), rng.standard_normal((n, 8)))
        path = dsp_align(s)
        try:
            check_path(path, m, n)
            valid += 1
        except Exception:
            pass
        best = max(path_score(s, p) for p in _all_paths(m, n))
        exact += path_score(s, path) == best
        cases += 1
    ok = report_line(3, exact == cases == valid,
                     f"{exact}/{cases} optimal scores equal exhaustive enumeration; {valid}/{cases} valid paths")
    assert ok


def test_criterion_04_p2v_correctness(desk_run, report_line):
    encoder = desk_run["encoder"]
    manifest = Manifest.load(desk_run["manifests"]["train"])
    cap = desk_run["cfg"].raw["p2v"]["sample_cap"]
    db, report = build_p2v(manifest, encoder, cap, desk_run["cfg"].seed, keep_records=True)
    # independent recomputation; valid when every perfect utterance is sampled
    assert report.sampled == report.cer_zero
    pooled, embs, n_lv = {}, {}, 0
    batch = encoder.encode_batch([manifest.features(e) for e in manifest])
    for entry, emb in zip(manifest, batch):
        emb = emb.astype(np.float64)
        dec = greedy_decode(encoder.predict_posteriors(emb), VOCAB.blank_id, VOCAB)
        if dec.phonemes != tuple(entry.phonemes):
            continue
        embs[entry.id] = emb
        for p, (l, r) in zip(dec.phonemes, dec.segments):
            frames = emb[l:r + 1]
            pooled.setdefault(p, []).append(sum(frames) / len(frames))
            n_lv += 1
    worst = 0.0
    for p, vecs in pooled.items():
        worst = max(worst, float(np.max(np.abs(db.vectors[p] - np.mean(vecs, axis=0)))))
    same_keys = set(pooled) == set(db.vectors)
    bounds_ok = len(report.records) == n_lv
    for rec in report.records:
        l, r = rec.frame_range
        block = embs[rec.utterance_id][l:r + 1]
        bounds_ok &= bool(np.all(rec.vector >= block.min(0) - 1e-9)
                          and np.all(rec.vector <= block.max(0) + 1e-9))
    ok = report_line(4, same_keys and worst <= 1e-6 and bounds_ok,
                     f"{len(pooled)} phonemes, {n_lv} local vectors; max |GV - recomputed mean| "
                     f"{worst:.2e} (<= 1e-6); local vectors within frame bounds: {bounds_ok}")
    assert ok


def test_criterion_05_confusable_properties(report_line):
    rng = np.random.default_rng(5)
    words = ["stop", "cat", "go", "computer", "banana", "yesterday", "light", "television"]
    from cedkws.phonemes import Lexicon

    lex = Lexicon.default()
    kws = [lex.pronounce(w) for w in words]
    failures = 0
    for trial in range(10_000):
        kw = kws[trial % len(kws)]
        delta = trial % 3 + 1
        out, edits = generate_confusable(kw, ConfusableSpec(delta), rng, return_edits=True)
        good = out != kw
        good &= 1 <= phoneme_edit_distance(kw, out) <= delta
        for e in edits:
            good &= e.phoneme not in {kw[k] for k in (e.position - 1, e.position, e.position + 1)
                                      if 0 <= k < len(kw)}
        good &= len(out) == len(kw) + sum(e.op == "insert" for e in edits)
        failures += not good
    ok = report_line(5, failures == 0, f"{10_000 - failures}/10000 generations satisfy (a)-(d)")
    assert ok


def test_criterion_06_metric_oracles(report_line):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(500):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.uniform(size=n) + 0.2 * labels, int(rng.integers(1, 4)))
        pos, neg = scores[labels == 1], scores[labels == 0]
        u = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        mismatches += abs(auc(scores, labels) - 100 * u / (len(pos) * len(neg))) > 1e-9
        ts = sorted(set(scores)) + [np.nextafter(scores.max(), np.inf)]
        rates = [((neg >= t).mean(), (pos < t).mean()) for t in ts]
        ref = None
        for (a0, r0), (a1, r1) in zip(rates, rates[1:]):
            if a1 == r1:
                ref = 100 * a1
                break
            if a0 > r0 and a1 < r1:
                w = (a0 - r0) / ((a0 - r0) - (a1 - r1))
                ref = 100 * (a0 + w * (a1 - a0))
                break
        mismatches += abs(eer(scores, labels)[0] - ref) > 1e-9
    sep = [0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]
    perfect = auc(*sep) == 100.0 and eer(*sep)[0] == 0.0
    ok = report_line(6, mismatches == 0 and perfect,
                     f"500 sets, {mismatches} oracle mismatches; separated AUC {auc(*sep)}, EER {eer(*sep)[0]}")
    assert ok


def test_criterion_07_gradient_check(report_line):
    torch.manual_seed(7)
    head = VerifierHead(4, 4).double()
    rng = np.random.default_rng(7)
    mats, labels = [rng.standard_normal((3, 4)) for _ in range(3)], [1, 0, 1]
    loss = head_loss(head, mats, labels, dtype=torch.float64)
    head.zero_grad()
    loss.backward()
    # step 1e-4: at 1e-6 rounding noise (~3e-11) swamps gradients near 1e-7
    worst, eps = 0.0, 1e-4
    for p in head.parameters():
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            with torch.no_grad():
                flat[k] = old + eps
                up = head_loss(head, mats, labels, dtype=torch.float64).item()
                flat[k] = old - eps
                down = head_loss(head, mats, labels, dtype=torch.float64).item()
                flat[k] = old
            numeric = (up - down) / (2 * eps)
            analytic = grad[k].item()
            scale = max(abs(numeric), abs(analytic))
            if scale > 1e-7:
                worst = max(worst, abs(numeric - analytic) / scale)
    n_params = count_parameters(head)
    ok = report_line(7, worst <= 1e-4, f"d=4, h=4, m=3, {n_params} parameters; max relative error {worst:.2e} (<= 1e-4)")
    assert ok


def test_criterion_08_frozen_encoder(desk_run, report_line):
    same = desk_run["hash_before"] == desk_run["hash_during"] == desk_run["hash_after"]
    ok = report_line(8, same, f"encoder sha256 before/after verifier training: {desk_run['hash_before'][:16]}... "
                              f"{'identical' if same else 'DIFFERENT'}")
    assert ok


def test_criterion_09_shapes(desk_run, report_line):
    rng = np.random.default_rng(9)
    encoder, db = desk_run["encoder"], desk_run["db"]
    covered = sorted(db.vectors)
    bad = []
    for k in range(1000):
        n_samples = int(rng.integers(400, 8000))
        if extract_filterbank(rng.standard_normal(n_samples)).shape != (1 + (n_samples - 400) // 160, 80):
            bad.append(("frames", k))
    lengths = rng.integers(1, 300, 1000)
    embs = encoder.encode_batch([rng.standard_normal((int(n), 80)).astype(np.float32) for n in lengths])
    for n, emb in zip(lengths, embs):
        if emb.shape != (-(-int(n) // 4), encoder.dim):
            bad.append(("subsample", int(n)))
        post = encoder.predict_posteriors(emb)
        if post.shape != (len(emb), VOCAB.num_classes) or np.max(np.abs(post.sum(1) - 1)) > 1e-5:
            bad.append(("posterior", int(n)))
        m = int(rng.integers(1, len(emb) + 1))
        phonemes = [covered[int(i)] for i in rng.integers(0, len(covered), m)]
        text = encode_phonemes(phonemes, db)
        if text.shape != (m, encoder.dim):
            bad.append(("text", m))
        if agreement_for_pair(text, emb, check=True).shape != (m, encoder.dim):
            bad.append(("agreement", m))
    ok = report_line(9, not bad, f"1000 random inputs per check; {len(bad)} violations")
    assert ok


def test_criterion_10_parameter_count(report_line):
    cfg = pipeline.PipelineConfig.load()
    encoder = Encoder(cfg.encoder_config(), {"kind": "synthetic", "n_mels": 80})
    head = VerifierHead(encoder.dim, encoder.dim)
    total = encoder.param_count + count_parameters(head)
    rel = total / 3.8e6 - 1
    ok = report_line(10, abs(rel) <= 0.25,
                     f"encoder {encoder.param_count:,} + head {count_parameters(head):,} = {total:,} "
                     f"({rel:+.1%} vs 3.8M; gap from absolute positional encoding, see README)")
    assert ok
