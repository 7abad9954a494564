"""
From embeddings to a match score
================================

A toy run of the verifier on hand-made vectors: cosine matrix, monotone
alignment, masked agreement matrix, and the GRU head on top.  Nothing here
is trained; the point is to see the shapes and the alignment at work.
"""

import numpy as np
import torch

from cedkws.verifier import (
    VerifierHead,
    cosine_matrix,
    dsp_align,
    masked_agreement,
    path_score,
    score,
)

rng = np.random.default_rng(0)
d = 8

# three "phoneme vectors" and an utterance that holds each for a few frames
phonemes = rng.standard_normal((3, d))
durations = [2, 4, 3]
audio = np.concatenate([np.repeat(p[None], k, axis=0) for p, k in zip(phonemes, durations)])
audio += 0.3 * rng.standard_normal(audio.shape)

S = cosine_matrix(phonemes, audio)
np.set_printoptions(precision=2, suppress=True)
print("cosine matrix (phonemes x frames)\n", S)

path = dsp_align(S)
print("\nframe -> phoneme:", path.tolist())
print("recovered durations:", np.bincount(path).tolist(), "true:", durations)
print(f"path score {path_score(S, path):.3f}")

A = masked_agreement(S, path, audio)
print("\nagreement matrix shape", A.shape)

# wrong text: same phonemes in reverse order aligns far worse
S_rev = cosine_matrix(phonemes[::-1], audio)
print(f"reversed text path score {path_score(S_rev, dsp_align(S_rev)):.3f}")

torch.manual_seed(0)
head = VerifierHead(d, 16)
print(f"\nuntrained head score: {score(A, head):.3f}")
