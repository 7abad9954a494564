"""Conformer audio encoder trained with CTC on phoneme targets.

The encoder maps an ``(n', 80)`` feature matrix to ``(n, d)`` frame embeddings,
``n = ceil(n' / subsampling_factor)``, and a final linear layer turns each
embedding into a distribution over the 74 phonemes plus the CTC blank.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import IncompatibleCheckpointError, InvalidInputError
from .features import Manifest
from .phonemes import PhonemeVocabulary, corpus_cer

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    layers: int = 6
    dim: int = 144
    attention_heads: int = 4
    conv_kernel: int = 3
    subsampling_factor: int = 4
    ffn_expansion: int = 4
    dropout: float = 0.1
    n_mels: int = 80
    num_classes: int = 75

    def __post_init__(self):
        if self.dim % self.attention_heads:
            raise InvalidInputError("dim must be divisible by attention_heads")
        f = self.subsampling_factor
        if f < 1 or f & (f - 1):
            raise InvalidInputError("subsampling_factor must be a power of two >= 1")
        if not 0 <= self.dropout < 1:
            raise InvalidInputError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d) -> "EncoderConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerConfig:
    """Adam with the inverse-square-root transformer schedule.

    The learning rate rises linearly to ``peak_lr`` at ``warmup_steps`` and
    decays as ``1/sqrt(step)`` afterwards.  ``schedule="constant"`` keeps it at
    ``peak_lr`` throughout (used for fine-tuning).
    """

    epochs: int = 150
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 5000
    schedule: str = "transformer"
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    grad_clip: float = 5.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d) -> "OptimizerConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def transformer_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Learning rate at 1-based ``step``; equals ``peak_lr`` exactly at warm-up end."""
    step = max(step, 1)
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


# ---------------------------------------------------------------------------
# model


class ConvSubsampling(nn.Module):
    """Stacked stride-2 3x3 convolutions over (time, frequency)."""

    def __init__(self, n_mels, dim, factor):
        super().__init__()
        self.n_convs = int(math.log2(factor))
        layers = []
        in_ch, freq = 1, n_mels
        for _ in range(self.n_convs):
            layers += [nn.Conv2d(in_ch, dim, 3, stride=2, padding=1), nn.ReLU()]
            in_ch = dim
            freq = (freq - 1) // 2 + 1
        self.conv = nn.Sequential(*layers)
        self.out = nn.Linear(in_ch * freq, dim)

    def forward(self, x, lengths):
        # x: (B, T, F); padded frames are zeroed after every stage so a
        # batched sequence sees the same borders as it would alone
        x = x.unsqueeze(1)
        for k in range(self.n_convs):
            x = self.conv[2 * k + 1](self.conv[2 * k](x))  # (B, C, T', F')
            lengths = (lengths + 1) // 2
            valid = torch.arange(x.shape[2]).unsqueeze(0) < lengths.unsqueeze(1)
            x = x * valid[:, None, :, None].to(x.dtype)
        b, c, t, f = x.shape
        x = self.out(x.transpose(1, 2).reshape(b, t, c * f))
        return x, lengths


class FeedForward(nn.Module):
    def __init__(self, dim, expansion, dropout):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim * expansion),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(dim * expansion, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, dim, kernel, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.batch_norm = nn.BatchNorm1d(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask):
        x = self.norm(x).masked_fill(pad_mask.unsqueeze(-1), 0.0).transpose(1, 2)
        x = F.glu(self.pointwise_in(x), dim=1).masked_fill(pad_mask.unsqueeze(1), 0.0)
        x = F.silu(self.batch_norm(self.depthwise(x)))
        x = self.dropout(self.pointwise_out(x))
        return x.transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.dim
        self.ff1 = FeedForward(d, cfg.ffn_expansion, cfg.dropout)
        self.attn_norm = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, cfg.attention_heads, dropout=cfg.dropout, batch_first=True)
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ff2 = FeedForward(d, cfg.ffn_expansion, cfg.dropout)
        self.out_norm = nn.LayerNorm(d)

    def forward(self, x, pad_mask):
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        h, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.attn_dropout(h)
        x = x + self.conv(x, pad_mask)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


def sinusoidal_positions(length, dim):
    pos = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class ConformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.subsampling = ConvSubsampling(cfg.n_mels, cfg.dim, cfg.subsampling_factor)
        self.input_dropout = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.layers))
        self.classifier = nn.Linear(cfg.dim, cfg.num_classes)

    def forward(self, feats, lengths):
        """Returns (embeddings (B, n, d), output lengths (B,))."""
        x, lengths = self.subsampling(feats, lengths)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2]).to(x.dtype)
        x = self.input_dropout(x)
        pad_mask = torch.arange(x.shape[1]).unsqueeze(0) >= lengths.unsqueeze(1)
        for block in self.blocks:
            x = block(x, pad_mask)
        return x, lengths

    def logits(self, embeddings):
        return self.classifier(embeddings)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def subsampled_length(n_frames: int, factor: int) -> int:
    return -(-n_frames // factor)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DecodedSequence:
    """Greedy CTC output.

    ``segments[k]`` is the inclusive, 0-based frame range ``(l, r)`` of the
    run that emitted ``ids[k]``.
    """

    ids: tuple[int, ...]
    segments: tuple[tuple[int, int], ...]
    phonemes: tuple[str, ...] = ()


def greedy_decode(posteriors, blank_id=None, vocabulary=None) -> DecodedSequence:
    """Frame-wise argmax, collapse runs, drop blanks, keep each run's frame range.

    Ties go to the lowest class index.  Blank frames belong to no segment, so
    ``A blank A`` decodes to two emissions of ``A``.
    """
    probs = np.asarray(posteriors)
    if probs.ndim != 2:
        raise InvalidInputError("posteriors must be a 2-D (frames x classes) matrix")
    if blank_id is None:
        blank_id = probs.shape[1] - 1
    path = probs.argmax(axis=1)
    ids, segments = [], []
    start = 0
    for j in range(1, len(path) + 1):
        if j == len(path) or path[j] != path[start]:
            if path[start] != blank_id:
                ids.append(int(path[start]))
                segments.append((start, j - 1))
            start = j
    phonemes = vocabulary.decode(ids) if vocabulary is not None else ()
    return DecodedSequence(tuple(ids), tuple(segments), phonemes)


# ---------------------------------------------------------------------------
# checkpoint


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name.rsplit(".", 1)[0] + ".meta.json")


class Encoder:
    """A conformer together with the metadata that ties it to its features
    and phoneme vocabulary.  Inference methods run in evaluation mode."""

    def __init__(self, config: EncoderConfig, feature_config: dict, vocabulary=None,
                 model: ConformerEncoder | None = None, metadata: dict | None = None):
        self.config = config
        self.feature_config = dict(feature_config)
        self.vocabulary = vocabulary or PhonemeVocabulary.default()
        if config.num_classes != self.vocabulary.num_classes:
            raise IncompatibleCheckpointError(
                f"encoder has {config.num_classes} classes, vocabulary needs {self.vocabulary.num_classes}"
            )
        self.model = model if model is not None else ConformerEncoder(config)
        self.model.eval()
        self.metadata = dict(metadata or {})

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def param_count(self) -> int:
        return count_parameters(self.model)

    # -- persistence --

    def state_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(self.model.state_dict(), buf)
        return buf.getvalue()

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path, **extra_meta) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.state_bytes())
        meta = dict(self.metadata)
        meta.update(extra_meta)
        meta.update(
            version=CHECKPOINT_VERSION,
            encoder_config=self.config.to_dict(),
            vocab_hash=self.vocabulary.hash,
            feature_config=self.feature_config,
            subsampling_factor=self.config.subsampling_factor,
            param_count=self.param_count,
            train_manifest_hash=meta.get("train_manifest_hash"),
        )
        self.metadata = meta
        _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path, vocabulary=None) -> "Encoder":
        path = Path(path)
        try:
            meta = json.loads(_sidecar(path).read_text())
        except FileNotFoundError:
            raise IncompatibleCheckpointError(f"{path}: missing metadata sidecar") from None
        vocabulary = vocabulary or PhonemeVocabulary.default()
        if meta.get("vocab_hash") != vocabulary.hash:
            raise IncompatibleCheckpointError(f"{path}: vocabulary hash mismatch")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise IncompatibleCheckpointError(f"{path}: unsupported version {meta.get('version')}")
        config = EncoderConfig.from_dict(meta["encoder_config"])
        model = ConformerEncoder(config)
        state = torch.load(io.BytesIO(path.read_bytes()), weights_only=True)
        model.load_state_dict(state)
        return cls(config, meta["feature_config"], vocabulary, model, meta)

    def copy(self) -> "Encoder":
        return Encoder(self.config, self.feature_config, self.vocabulary,
                       copy.deepcopy(self.model), copy.deepcopy(self.metadata))

    # -- inference --

    def check_features(self, features, feature_kind=None):
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise InvalidInputError("features must be a non-empty (frames x channels) matrix")
        if feats.shape[1] != self.config.n_mels:
            raise IncompatibleCheckpointError(
                f"encoder expects {self.config.n_mels} channels, got {feats.shape[1]}"
            )
        if feature_kind is not None and feature_kind != self.feature_config.get("kind"):
            raise IncompatibleCheckpointError(
                f"features come from the {feature_kind!r} frontend, encoder was trained on "
                f"{self.feature_config.get('kind')!r} features"
            )
        if not np.all(np.isfinite(feats)):
            raise InvalidInputError("features contain non-finite values")
        return feats

    @torch.no_grad()
    def encode(self, features, feature_kind=None) -> np.ndarray:
        """Frame embeddings, shape ``(ceil(n'/subsampling_factor), d)``."""
        feats = self.check_features(features, feature_kind)
        self.model.eval()
        x = torch.from_numpy(feats).unsqueeze(0)
        emb, _ = self.model(x, torch.tensor([len(feats)]))
        return emb[0].numpy()

    @torch.no_grad()
    def encode_batch(self, feature_list, batch_size=64) -> list[np.ndarray]:
        self.model.eval()
        out = []
        order = sorted(range(len(feature_list)), key=lambda i: len(feature_list[i]))
        results = [None] * len(feature_list)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x, lengths = _pad([self.check_features(feature_list[i]) for i in idx])
            emb, out_len = self.model(x, lengths)
            for k, i in enumerate(idx):
                results[i] = emb[k, : out_len[k]].numpy().copy()
        out.extend(results)
        return out

    @torch.no_grad()
    def predict_posteriors(self, embedding) -> np.ndarray:
        emb = np.asarray(embedding, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[1] != self.config.dim:
            raise InvalidInputError(
                f"embedding must have shape (n, {self.config.dim}), got {emb.shape}"
            )
        logits = self.model.logits(torch.from_numpy(emb))
        return torch.softmax(logits.double(), dim=-1).numpy()

    def decode(self, features, feature_kind=None) -> tuple[np.ndarray, DecodedSequence]:
        emb = self.encode(features, feature_kind)
        return emb, greedy_decode(self.predict_posteriors(emb), self.vocabulary.blank_id, self.vocabulary)


def encode(features, checkpoint: Encoder, feature_kind=None) -> np.ndarray:
    return checkpoint.encode(features, feature_kind)


def predict_posteriors(embedding, checkpoint: Encoder) -> np.ndarray:
    return checkpoint.predict_posteriors(embedding)


# ---------------------------------------------------------------------------
# training


def _pad(feature_list):
    lengths = torch.tensor([len(f) for f in feature_list])
    x = torch.zeros(len(feature_list), int(lengths.max()), feature_list[0].shape[1])
    for i, f in enumerate(feature_list):
        x[i, : len(f)] = torch.from_numpy(np.asarray(f, dtype=np.float32))
    return x, lengths


def ctc_min_frames(target) -> int:
    """Frames CTC needs: one per label plus a blank between equal neighbours."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


@dataclass
class TrainingReport:
    epochs: int = 0
    steps: int = 0
    losses: list[float] = field(default_factory=list)
    initial_loss: float | None = None
    skipped: int = 0
    skipped_ids: list[str] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _load_examples(manifest: Manifest, encoder: Encoder):
    feats, targets, ids, skipped = [], [], [], []
    factor = encoder.config.subsampling_factor
    for entry in manifest:
        f = manifest.features(entry)
        target = encoder.vocabulary.encode(entry.phonemes)
        if not target or ctc_min_frames(target) > subsampled_length(len(f), factor):
            logger.warning("skipping %s: target does not fit in %d frames", entry.id,
                           subsampled_length(len(f), factor))
            skipped.append(entry.id)
            continue
        feats.append(f)
        targets.append(target)
        ids.append(entry.id)
    return feats, targets, ids, skipped


def _ctc_loss(model, feats, targets, blank_id):
    x, lengths = _pad(feats)
    emb, out_len = model(x, lengths)
    log_probs = F.log_softmax(model.logits(emb), dim=-1).transpose(0, 1)
    flat = torch.tensor([t for tgt in targets for t in tgt], dtype=torch.long)
    tgt_len = torch.tensor([len(t) for t in targets])
    return F.ctc_loss(log_probs, flat, out_len, tgt_len, blank=blank_id,
                      reduction="mean", zero_infinity=False)


def _run_training(encoder: Encoder, manifest: Manifest, opt_cfg: OptimizerConfig,
                  report: TrainingReport, log=None):
    feats, targets, ids, skipped = _load_examples(manifest, encoder)
    report.skipped = len(skipped)
    report.skipped_ids = skipped
    if not feats:
        raise InvalidInputError("no trainable utterances in manifest")
    model = encoder.model
    blank = encoder.vocabulary.blank_id
    torch.manual_seed(opt_cfg.seed)
    rng = np.random.default_rng(opt_cfg.seed)

    model.eval()
    with torch.no_grad():
        sample = list(range(min(len(feats), 256)))
        report.initial_loss = float(_ctc_loss(model, [feats[i] for i in sample],
                                              [targets[i] for i in sample], blank))

    optimizer = torch.optim.Adam(model.parameters(), lr=opt_cfg.peak_lr,
                                 betas=opt_cfg.betas, eps=opt_cfg.eps)
    step = 0
    for epoch in range(opt_cfg.epochs):
        model.train()
        order = rng.permutation(len(feats))
        total, batches = 0.0, 0
        for start in range(0, len(order), opt_cfg.batch_size):
            idx = order[start:start + opt_cfg.batch_size]
            step += 1
            if opt_cfg.schedule == "constant":
                lr = opt_cfg.peak_lr
            else:
                lr = transformer_lr(step, opt_cfg.peak_lr, opt_cfg.warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss = _ctc_loss(model, [feats[i] for i in idx], [targets[i] for i in idx], blank)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite CTC loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            if opt_cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), opt_cfg.grad_clip)
            optimizer.step()
            total += loss.item()
            batches += 1
        report.losses.append(total / batches)
        report.learning_rates.append(lr)
        report.epochs = epoch + 1
        report.steps = step
        logger.info("epoch %d loss %.4f lr %.2e", epoch + 1, total / batches, lr)
        if log is not None:
            log(epoch + 1, total / batches)
    model.eval()
    return report


def train_ctc(manifest: Manifest, config: EncoderConfig, opt_cfg: OptimizerConfig,
              feature_config: dict, vocabulary=None, log=None) -> tuple[Encoder, TrainingReport]:
    """Train a fresh encoder with CTC.  Utterances whose phoneme target cannot
    fit the subsampled frame count are skipped and counted in the report."""
    if len(manifest) == 0:
        raise InvalidInputError("empty training manifest")
    torch.manual_seed(opt_cfg.seed)
    encoder = Encoder(config, feature_config, vocabulary)
    report = _run_training(encoder, manifest, opt_cfg, TrainingReport(), log)
    encoder.metadata.update(
        train_manifest_hash=manifest.digest,
        optimizer=opt_cfg.to_dict(),
        training_report=report.to_dict(),
    )
    return encoder, report


def fine_tune(encoder: Encoder, manifest: Manifest, opt_cfg: OptimizerConfig,
              vocabulary=None, log=None) -> tuple[Encoder, TrainingReport]:
    """Continue CTC training from ``encoder``'s weights on another manifest.

    The input encoder is not modified; a trained copy is returned.
    """
    vocabulary = vocabulary or encoder.vocabulary
    if vocabulary.hash != encoder.vocabulary.hash:
        raise IncompatibleCheckpointError("fine-tune vocabulary differs from the checkpoint's")
    if len(manifest) == 0:
        raise InvalidInputError("empty fine-tuning manifest")
    tuned = encoder.copy()
    report = TrainingReport()
    if opt_cfg.epochs > 0:
        _run_training(tuned, manifest, opt_cfg, report, log)
    tuned.metadata.update(
        fine_tune_manifest_hash=manifest.digest,
        fine_tune_optimizer=opt_cfg.to_dict(),
        fine_tune_report=report.to_dict(),
    )
    return tuned, report


def evaluate_cer(encoder: Encoder, manifest: Manifest) -> float:
    """Corpus-level phoneme error rate of greedy decoding over ``manifest``."""
    feats = [manifest.features(e) for e in manifest]
    pairs = []
    for entry, emb in zip(manifest, encoder.encode_batch(feats)):
        dec = greedy_decode(encoder.predict_posteriors(emb), encoder.vocabulary.blank_id,
                            encoder.vocabulary)
        pairs.append((tuple(entry.phonemes), dec.phonemes))
    return corpus_cer(pairs)
