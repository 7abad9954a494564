"""Audio-text verifier: cosine similarity, monotone alignment, masked
agreement matrix and a GRU scoring head."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import (
    AlignmentInfeasibleError,
    ConsistencyError,
    IncompatibleCheckpointError,
    InvalidInputError,
)

HEAD_VERSION = 1


def cosine_matrix(text_emb, audio_emb) -> np.ndarray:
    """``m x n`` cosine similarities between text rows and audio frames.

    Pairs involving a zero-norm vector get similarity 0.
    """
    f = np.asarray(text_emb, dtype=np.float64)
    e = np.asarray(audio_emb, dtype=np.float64)
    if f.ndim != 2 or e.ndim != 2 or f.shape[1] != e.shape[1]:
        raise InvalidInputError(
            f"embedding dimensions do not match: text {f.shape}, audio {e.shape}"
        )
    fn = np.linalg.norm(f, axis=1)
    en = np.linalg.norm(e, axis=1)
    fs = np.divide(1.0, fn, out=np.zeros_like(fn), where=fn > 0)
    es = np.divide(1.0, en, out=np.zeros_like(en), where=en > 0)
    return np.clip((f * fs[:, None]) @ (e * es[:, None]).T, -1.0, 1.0)


def dsp_align(matrix) -> np.ndarray:
    """Best monotone stepwise assignment of frames to phonemes.

    Frame 0 goes to phoneme 0, the last frame to the last phoneme, and each
    following frame either stays on the current phoneme or advances by one.
    The path maximizing the summed similarity along it is found with

        D[i, j] = S[i, j] + max(D[i, j-1], D[i-1, j-1]),  D[0, 0] = S[0, 0]

    and traced back from ``(m-1, n-1)``, taking the diagonal predecessor on
    ties.

    Returns
    -------
    numpy.ndarray
        Integer array of length ``n``; entry ``j`` is the phoneme index of frame ``j``.
    """
    s = np.asarray(matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1:
        raise InvalidInputError("similarity matrix must be 2-D with at least one row")
    m, n = s.shape
    if n < m:
        raise AlignmentInfeasibleError(f"{n} frames cannot cover {m} phonemes")
    dp = np.full((m, n), -np.inf)
    dp[0, 0] = s[0, 0]
    for j in range(1, n):
        stay = dp[:, j - 1]
        advance = np.concatenate(([-np.inf], dp[:-1, j - 1]))
        dp[:, j] = s[:, j] + np.maximum(stay, advance)
    assign = np.empty(n, dtype=np.int64)
    i = m - 1
    for j in range(n - 1, 0, -1):
        assign[j] = i
        if i > 0 and dp[i - 1, j - 1] >= dp[i, j - 1]:
            i -= 1
    assign[0] = i
    return assign


def path_score(matrix, assign) -> float:
    s = np.asarray(matrix, dtype=np.float64)
    return float(s[np.asarray(assign), np.arange(s.shape[1])].sum())


def check_path(assign, m: int, n: int):
    """Raise :class:`ConsistencyError` unless ``assign`` is a valid alignment."""
    a = np.asarray(assign)
    if a.shape != (n,):
        raise ConsistencyError(f"path has shape {a.shape}, expected ({n},)")
    if a[0] != 0 or a[-1] != m - 1:
        raise ConsistencyError("path endpoints are not pinned")
    steps = np.diff(a)
    if np.any((steps != 0) & (steps != 1)):
        raise ConsistencyError("path is not monotone stepwise")


def masked_agreement(matrix, assign, audio_emb) -> np.ndarray:
    """Zero every similarity off the alignment path, then multiply by the
    audio embedding: row ``i`` is ``sum_{j: a(j)=i} S[i, j] * e_j``."""
    s = np.asarray(matrix, dtype=np.float64)
    e = np.asarray(audio_emb, dtype=np.float64)
    m, n = s.shape
    if e.shape[0] != n:
        raise InvalidInputError(f"matrix has {n} columns but audio has {e.shape[0]} frames")
    a = np.asarray(assign)
    if a.shape != (n,):
        raise InvalidInputError("alignment length does not match the frame count")
    masked = np.zeros_like(s)
    cols = np.arange(n)
    masked[a, cols] = s[a, cols]
    return masked @ e


def agreement_for_pair(text_emb, audio_emb, check=False) -> np.ndarray:
    sim = cosine_matrix(text_emb, audio_emb)
    assign = dsp_align(sim)
    if check:
        check_path(assign, *sim.shape)
    return masked_agreement(sim, assign, audio_emb)


class VerifierHead(nn.Module):
    """Single-layer GRU over agreement rows followed by a 2-way linear layer."""

    def __init__(self, dim=144, hidden=144):
        super().__init__()
        self.dim = dim
        self.hidden = hidden
        self.gru = nn.GRU(dim, hidden, num_layers=1, batch_first=True)
        self.out = nn.Linear(hidden, 2)

    def forward(self, rows, lengths):
        """``rows``: (B, m_max, d) zero-padded; returns logits (B, 2)."""
        packed = pack_padded_sequence(rows, torch.as_tensor(lengths).cpu(),
                                      batch_first=True, enforce_sorted=False)
        _, h_n = self.gru(packed)
        return self.out(h_n[-1])

    def config(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden}

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path, **meta) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.state_dict(), buf)
        path.write_bytes(buf.getvalue())
        meta = dict(meta)
        meta.update(version=HEAD_VERSION, **self.config())
        path.with_name(path.name.rsplit(".", 1)[0] + ".meta.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True)
        )
        return path

    @classmethod
    def load(cls, path) -> "VerifierHead":
        path = Path(path)
        meta_path = path.with_name(path.name.rsplit(".", 1)[0] + ".meta.json")
        try:
            meta = json.loads(meta_path.read_text())
        except FileNotFoundError:
            raise IncompatibleCheckpointError(f"{path}: missing metadata sidecar") from None
        if meta.get("version") != HEAD_VERSION:
            raise IncompatibleCheckpointError(f"{path}: unsupported head version")
        head = cls(meta["dim"], meta["hidden"])
        head.load_state_dict(torch.load(io.BytesIO(path.read_bytes()), weights_only=True))
        head.eval()
        head.metadata = meta
        return head


def batch_tensors(agreements, dtype=torch.float32):
    lengths = [len(a) for a in agreements]
    x = torch.zeros(len(agreements), max(lengths), agreements[0].shape[1], dtype=dtype)
    for k, a in enumerate(agreements):
        x[k, : len(a)] = torch.as_tensor(a, dtype=dtype)
    return x, torch.tensor(lengths)


@torch.no_grad()
def score(agreement, head: VerifierHead) -> float:
    """Match-class probability for one agreement matrix."""
    a = np.asarray(agreement)
    if a.ndim != 2 or a.shape[0] < 1:
        raise InvalidInputError("agreement matrix must be 2-D and non-empty")
    if a.shape[1] != head.dim:
        raise IncompatibleCheckpointError(
            f"head expects {head.dim}-dim rows, agreement has {a.shape[1]}"
        )
    head.eval()
    dtype = next(head.parameters()).dtype
    x = torch.as_tensor(a, dtype=dtype).unsqueeze(0)
    logits = head(x, [a.shape[0]])
    return float(torch.softmax(logits.double(), dim=-1)[0, 1])


@torch.no_grad()
def score_batch(agreements, head: VerifierHead, batch_size=512) -> np.ndarray:
    head.eval()
    out = []
    for start in range(0, len(agreements), batch_size):
        x, lengths = batch_tensors(agreements[start:start + batch_size])
        out.append(torch.softmax(head(x, lengths).double(), dim=-1)[:, 1].numpy())
    return np.concatenate(out) if out else np.zeros(0)


def head_loss(head: VerifierHead, agreements, labels, dtype=torch.float32):
    """Mean two-class cross-entropy over a list of agreement matrices."""
    x, lengths = batch_tensors(agreements, dtype)
    logits = head(x, lengths)
    return nn.functional.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))
