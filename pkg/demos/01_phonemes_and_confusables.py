"""
Phonemes, distances and confusable keywords
===========================================

The text side of the detector never sees letters, only phoneme sequences.
This walk-through converts a few keywords, measures how far apart they are,
and generates the near-miss variants used as hard negatives in training.
"""

import numpy as np

from cedkws import Lexicon, PhonemeVocabulary, grapheme_to_phoneme, phoneme_edit_distance
from cedkws.training import ConfusableSpec, generate_confusable

vocab = PhonemeVocabulary.default()
lexicon = Lexicon.default()
print(f"{len(vocab)} symbols, CTC blank id {vocab.blank_id}")
print("stress variants of OW:", vocab.stress_groups["OW"])

# lexicon lookup, word by word; multi-word text is the concatenation
for text in ["stop", "spot", "shop", "stop shop"]:
    print(f"{text:10s} -> {' '.join(grapheme_to_phoneme(text, lexicon))}")

# phoneme edit distance decides what counts as an easy or a hard negative
words = ["stop", "spot", "shop", "top", "banana"]
seqs = {w: grapheme_to_phoneme(w, lexicon) for w in words}
print("\nedit distances")
print("        " + "".join(f"{w:>8s}" for w in words))
for a in words:
    print(f"{a:8s}" + "".join(f"{phoneme_edit_distance(seqs[a], seqs[b]):8d}" for b in words))

# confusables: delta edits at distinct positions, never re-using a neighbour
rng = np.random.default_rng(7)
stop = seqs["stop"]
for delta in (1, 2, 3):
    print(f"\ndelta = {delta}")
    for _ in range(4):
        out, edits = generate_confusable(stop, ConfusableSpec(delta), rng, return_edits=True)
        steps = ", ".join(f"{e.op} {e.phoneme}@{e.position}" for e in edits)
        print(f"  {' '.join(out):24s} d={phoneme_edit_distance(stop, out)}  ({steps})")
