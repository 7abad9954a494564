import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cedkws.errors import InvalidInputError
from cedkws.evaluation import ScoredPair, auc, build_test_pairs, eer
from cedkws.features import Manifest, SyntheticCorpusSpec, build_synthetic_corpus
from cedkws.phonemes import phoneme_edit_distance
from cedkws.training import SamplePair


def auc_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return 100.0 * total / (len(pos) * len(neg))


def eer_oracle(scores, labels):
    """Loop over candidate thresholds and interpolate at the FAR/FRR crossing."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    ts = sorted(set(scores)) + [np.nextafter(max(scores), np.inf)]
    rates = []
    for t in ts:
        far = sum(n >= t for n in neg) / len(neg)
        frr = sum(p < t for p in pos) / len(pos)
        rates.append((t, far, frr))
    for (t0, a0, r0), (t1, a1, r1) in zip(rates, rates[1:]):
        if a1 - r1 == 0:
            return 100 * a1
        if a0 - r0 > 0 > a1 - r1:
            w = (a0 - r0) / ((a0 - r0) - (a1 - r1))
            return 100 * (a0 + w * (a1 - a0))
    raise AssertionError("no crossing")


def test_separated_scores():
    scores, labels = [0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]
    assert auc(scores, labels) == 100.0
    assert eer(scores, labels)[0] == 0.0
    assert auc(scores, [0, 0, 1, 1]) == 0.0
    assert eer(scores, [0, 0, 1, 1])[0] == 100.0


def test_one_misordered_pair():
    scores, labels = [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]
    assert auc(scores, labels) == 75.0
    assert auc_oracle(scores, labels) == 75.0
    assert eer(scores, labels)[0] == 50.0
    assert eer_oracle(scores, labels) == 50.0


def test_all_ties():
    scores, labels = [0.5] * 6, [1, 0, 1, 0, 1, 0]
    assert auc(scores, labels) == 50.0
    assert eer(scores, labels)[0] == pytest.approx(50.0)


def test_single_class_rejected():
    with pytest.raises(InvalidInputError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(InvalidInputError):
        eer([0.1, 0.2], [0, 0])
    with pytest.raises(InvalidInputError):
        auc([0.1, np.nan], [1, 0])


def test_scored_pair_range():
    pair = SamplePair("u", ("S",), 1)
    with pytest.raises(InvalidInputError):
        ScoredPair(pair, 1.5)
    assert ScoredPair(pair, 0.25).score == 0.25


def random_sets(n_sets, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse values force plenty of ties
        scores = np.round(rng.uniform(0, 1, n) + 0.3 * labels, int(rng.integers(1, 3)))
        yield scores.tolist(), labels.tolist()


def test_auc_and_eer_match_oracles():
    for scores, labels in random_sets(500, 0):
        assert auc(scores, labels) == pytest.approx(auc_oracle(scores, labels), abs=1e-9)
        assert eer(scores, labels)[0] == pytest.approx(eer_oracle(scores, labels), abs=1e-9)


def test_eer_threshold_inside_score_range():
    for scores, labels in random_sets(200, 1):
        _, t = eer(scores, labels)
        assert min(scores) <= t <= np.nextafter(max(scores), np.inf)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**16))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, rng.integers(0, 2, 30)]
    scores = rng.uniform(0.05, 0.95, len(labels))
    warped = scores ** 3
    assert auc(warped, labels) == pytest.approx(auc(scores, labels))
    assert eer(warped, labels)[0] == pytest.approx(eer(scores, labels)[0])
    assert auc(scores, labels) + auc(scores, 1 - labels) == pytest.approx(100.0)


def test_eer_symmetric_under_swap_and_negation():
    for scores, labels in random_sets(200, 2):
        flipped = [1 - l for l in labels]
        negated = [-s for s in scores]
        assert eer(negated, flipped)[0] == pytest.approx(eer(scores, labels)[0], abs=1e-9)


def test_random_scores_give_half():
    rng = np.random.default_rng(7)
    scores = rng.uniform(size=20000)
    labels = rng.integers(0, 2, 20000)
    assert abs(auc(scores, labels) - 50) < 2
    assert abs(eer(scores, labels)[0] - 50) < 2


@pytest.fixture(scope="module")
def eval_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    words = ["stop", "shop", "spot", "top", "computer", "banana", "yesterday", "hat", "cat"]
    spec = SyntheticCorpusSpec(words, utterances_per_keyword=4, frames_per_phoneme=(4, 6), seed=1)
    return Manifest.load(build_synthetic_corpus(spec, out, name="test"))


@pytest.mark.parametrize("mode", ["easy", "hard"])
def test_pair_distances(eval_corpus, mode):
    by_id = {e.id: tuple(e.phonemes) for e in eval_corpus}
    pairs = build_test_pairs(eval_corpus, mode, per_anchor=5, rng=0)
    assert pairs
    for p in pairs:
        if p.label == 1:
            assert by_id[p.audio_id] == p.text
            continue
        # for generated confusables the audio is the anchor's own utterance
        d = phoneme_edit_distance(p.text, by_id[p.audio_id])
        if mode == "easy":
            assert d > 3
        else:
            assert 1 <= d <= 3


def test_pairs_are_seeded(eval_corpus):
    assert build_test_pairs(eval_corpus, "hard", 5, rng=3) == build_test_pairs(eval_corpus, "hard", 5, rng=3)


def test_bad_mode(eval_corpus):
    with pytest.raises(InvalidInputError):
        build_test_pairs(eval_corpus, "medium", 5)
