"""Phoneme vocabulary, lexicon-based grapheme-to-phoneme conversion and
phoneme-sequence distances.

Phoneme sequences are plain tuples of ARPAbet symbol strings (``("S", "T",
"AA1", "P")``); :class:`PhonemeVocabulary` maps them to integer ids when a
model needs them.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidInputError, OOVError

SPECIAL_TOKENS = ("<pad>", "<unk>", "<s>", "</s>", "<space>")
CONSONANTS = tuple(
    "B CH D DH F G HH JH K L M N NG P R S SH T TH V W Y Z ZH".split()
)
VOWELS = tuple("AA AE AH AO AW AY EH ER EY IH IY OW OY UH UW".split())
STRESS_MARKS = ("0", "1", "2")
VOCAB_SIZE = 74

_WORD_SPLIT = re.compile(r"\s+")
# CMU dictionary alternate entries are written WORD(1), WORD(2), ...
_ALT_SUFFIX = re.compile(r"\(\d+\)$")


@dataclass(frozen=True)
class PhonemeVocabulary:
    """Ordered phoneme inventory with a CTC blank placed after the last symbol.

    Only the ARPAbet symbols (``pronounceable``) can occur in pronunciations;
    the special tokens exist to fill out the inventory and are never targets.
    """

    symbols: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.symbols) != VOCAB_SIZE:
            raise InvalidInputError(
                f"vocabulary must have {VOCAB_SIZE} symbols, got {len(self.symbols)}"
            )
        if len(set(self.symbols)) != len(self.symbols):
            raise InvalidInputError("vocabulary symbols must be distinct")
        object.__setattr__(self, "index", {s: i for i, s in enumerate(self.symbols)})
        for variant in self.stress_variants():
            if variant[:-1] not in self.stress_groups:
                raise InvalidInputError(f"stress variant {variant} has no base group")

    @classmethod
    def default(cls) -> "PhonemeVocabulary":
        return cls.load(resources.files("cedkws") / "data" / "vocab.txt")

    @classmethod
    def load(cls, path) -> "PhonemeVocabulary":
        text = Path(path).read_text() if not hasattr(path, "read_text") else path.read_text()
        symbols = tuple(line.strip() for line in text.splitlines() if line.strip())
        return cls(symbols)

    def save(self, path):
        Path(path).write_text("\n".join(self.symbols) + "\n")

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self.index

    @property
    def blank_id(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        """Output classes of the acoustic model: every symbol plus blank."""
        return len(self.symbols) + 1

    @property
    def pronounceable(self) -> tuple[str, ...]:
        return tuple(s for s in self.symbols if s not in SPECIAL_TOKENS)

    def stress_variants(self) -> tuple[str, ...]:
        return tuple(
            s for s in self.symbols if s[-1:] in STRESS_MARKS and s[:-1] in VOWELS
        )

    @property
    def stress_groups(self) -> dict[str, tuple[str, ...]]:
        groups: dict[str, list[str]] = {}
        for s in self.symbols:
            if s[-1:] in STRESS_MARKS and s[:-1] in VOWELS:
                groups.setdefault(s[:-1], []).append(s)
        return {k: tuple(v) for k, v in groups.items()}

    def encode(self, phonemes: Iterable[str]) -> list[int]:
        try:
            return [self.index[p] for p in phonemes]
        except KeyError as exc:
            raise InvalidInputError(f"unknown phoneme symbol {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.symbols):
                raise InvalidInputError(f"phoneme id {i} outside vocabulary")
            out.append(self.symbols[i])
        return tuple(out)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode()).hexdigest()


# Crude letter-to-sound table used only by the spelling-fallback OOV policy.
_LETTER_SOUNDS = {
    "a": ("AE1",), "b": ("B",), "c": ("K",), "d": ("D",), "e": ("EH1",),
    "f": ("F",), "g": ("G",), "h": ("HH",), "i": ("IH1",), "j": ("JH",),
    "k": ("K",), "l": ("L",), "m": ("M",), "n": ("N",), "o": ("AA1",),
    "p": ("P",), "q": ("K",), "r": ("R",), "s": ("S",), "t": ("T",),
    "u": ("AH1",), "v": ("V",), "w": ("W",), "x": ("K", "S"), "y": ("Y",),
    "z": ("Z",),
}


def spell_out(word: str) -> tuple[str, ...]:
    """Letter-by-letter pronunciation; letters without a sound are skipped."""
    out: list[str] = []
    for ch in word:
        for p in _LETTER_SOUNDS.get(ch, ()):
            if not out or out[-1] != p:
                out.append(p)
    return tuple(out)


class Lexicon:
    """Word to pronunciation table in CMU pronouncing-dictionary format.

    Parameters
    ----------
    entries : dict
        Lowercase word -> list of pronunciations (tuples of symbols). The first
        pronunciation is the one :func:`grapheme_to_phoneme` uses.
    oov_policy : {"error", "spelling-fallback"}
    vocabulary : PhonemeVocabulary, optional
        Pronunciations are checked against its pronounceable symbols.
    """

    def __init__(self, entries, oov_policy="error", vocabulary=None):
        if oov_policy not in ("error", "spelling-fallback"):
            raise InvalidInputError(f"unknown oov_policy {oov_policy!r}")
        self.vocabulary = vocabulary or PhonemeVocabulary.default()
        allowed = set(self.vocabulary.pronounceable)
        self.entries: dict[str, list[tuple[str, ...]]] = {}
        for word, prons in entries.items():
            prons = [tuple(p) for p in prons]
            if not prons:
                raise InvalidInputError(f"word {word!r} has no pronunciation")
            for pron in prons:
                bad = [p for p in pron if p not in allowed]
                if bad or not pron:
                    raise InvalidInputError(
                        f"pronunciation of {word!r} uses symbols outside the vocabulary: {bad}"
                    )
            self.entries[word.lower()] = prons
        self.oov_policy = oov_policy

    @classmethod
    def load(cls, path, oov_policy="error", vocabulary=None) -> "Lexicon":
        """Read ``WORD PH1 PH2 ...`` lines; ``#`` lines are comments."""
        entries: dict[str, list[tuple[str, ...]]] = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) < 2:
                    raise InvalidInputError(f"{path}:{lineno}: entry without phonemes")
                word = _ALT_SUFFIX.sub("", parts[0]).lower()
                entries.setdefault(word, []).append(tuple(parts[1:]))
        return cls(entries, oov_policy=oov_policy, vocabulary=vocabulary)

    @classmethod
    def default(cls, oov_policy="error") -> "Lexicon":
        return cls.load(resources.files("cedkws") / "data" / "lexicon.txt", oov_policy)

    def __contains__(self, word):
        return word.lower() in self.entries

    def __len__(self):
        return len(self.entries)

    def pronounce(self, word: str) -> tuple[str, ...]:
        word = word.lower()
        if word in self.entries:
            return self.entries[word][0]
        if self.oov_policy == "spelling-fallback":
            pron = spell_out(word)
            if pron:
                return pron
        raise OOVError(word)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for word in sorted(self.entries):
                for pron in self.entries[word]:
                    f.write(f"{word.upper()} {' '.join(pron)}\n")


def normalize_text(text: str | Sequence[str]) -> list[str]:
    if not isinstance(text, str):
        text = " ".join(text)
    return [w for w in _WORD_SPLIT.split(text.strip().lower()) if w]


def grapheme_to_phoneme(text, lexicon: Lexicon) -> tuple[str, ...]:
    """Concatenate the first listed pronunciation of every word in ``text``.

    >>> grapheme_to_phoneme("stop", Lexicon.default())
    ('S', 'T', 'AA1', 'P')
    """
    words = normalize_text(text)
    if not words:
        raise InvalidInputError("empty text")
    out: list[str] = []
    for w in words:
        out.extend(lexicon.pronounce(w))
    return tuple(out)


def phoneme_edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Levenshtein distance over phoneme tokens with unit costs."""
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("edit distance operands must be non-empty")
    prev = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * len(b)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (ai != b[j - 1]),
            )
        prev = cur
    return prev[-1]


def cer(reference: Sequence[str], hypothesis: Sequence[str]) -> float:
    """Phoneme error rate: edit distance divided by the reference length.

    An empty hypothesis is allowed (every reference token is a deletion).
    """
    if len(reference) == 0:
        raise InvalidInputError("reference must be non-empty")
    if len(hypothesis) == 0:
        return float(len(reference)) / len(reference)
    return phoneme_edit_distance(reference, hypothesis) / len(reference)


def corpus_cer(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> float:
    """Total edits over total reference length across (reference, hypothesis) pairs."""
    edits = 0
    total = 0
    for ref, hyp in pairs:
        edits += cer(ref, hyp) * len(ref)
        total += len(ref)
    if total == 0:
        raise InvalidInputError("no reference tokens")
    return edits / total
