"""Character vocabulary, correction pairs and synthetic error injection."""
from __future__ import annotations

import json
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIALS)
UNK_GLYPH = "□"


class PairFormatError(ValueError):
    pass


class SequenceTooLongError(ValueError):
    pass


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:N_SPECIAL]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """Specials first, then characters by descending frequency, ties by codepoint."""
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(ch for ch in nfc(line) if ch not in "\r\n")
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    chars = sorted(counts, key=lambda ch: (-counts[ch], ord(ch)))
    return Vocabulary(list(SPECIALS) + chars)


def encode(text: str, vocab: Vocabulary, max_len: int | None = None) -> list[int]:
    text = nfc(text)
    if max_len is not None and len(text) > max_len - 2:
        raise SequenceTooLongError(f"query of {len(text)} chars exceeds max_len - 2 = {max_len - 2}")
    return [CLS_ID] + [vocab.id_of(ch) for ch in text] + [SEP_ID]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i == UNK_ID:
            out.append(UNK_GLYPH)
        elif i >= N_SPECIAL:
            out.append(vocab.tokens[i])
    return "".join(out)


@dataclass(frozen=True)
class CorrectionPair:
    source: str
    target: str

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise PairFormatError(
                f"source/target length mismatch ({len(self.source)} vs {len(self.target)})"
            )

    @classmethod
    def make(cls, source: str, target: str) -> "CorrectionPair":
        return cls(nfc(source), nfc(target))

    @property
    def error_positions(self) -> frozenset[int]:
        return frozenset(i for i, (a, b) in enumerate(zip(self.source, self.target)) if a != b)

    @property
    def is_clean(self) -> bool:
        return self.source == self.target


def parse_pair_line(line: str, lineno: int = 0) -> CorrectionPair:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 2:
        raise PairFormatError(f"line {lineno}: expected 'source<TAB>target', got {len(parts)} field(s)")
    try:
        return CorrectionPair.make(parts[0], parts[1])
    except PairFormatError as exc:
        raise PairFormatError(f"line {lineno}: {exc}") from None


def load_pairs(path, skip_invalid: bool = False) -> list[CorrectionPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip("\r\n"):
                continue
            try:
                pairs.append(parse_pair_line(line, lineno))
            except PairFormatError:
                if not skip_invalid:
                    raise
    return pairs


def save_pairs(pairs: Iterable[CorrectionPair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(f"{p.source}\t{p.target}\n")


@dataclass
class ConfusionModel:
    """Weighted same-length substitution channel standing in for ASR errors."""

    table: dict[str, list[tuple[str, float]]]
    rate: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"substitution rate must lie in [0, 1], got {self.rate}")
        for ch, options in self.table.items():
            for alt, w in options:
                if alt == ch:
                    raise ValueError(f"confusion entry maps {ch!r} to itself")
                if w <= 0:
                    raise ValueError(f"non-positive weight for {ch!r} -> {alt!r}")

    @classmethod
    def load(cls, path, rate: float = 0.1) -> "ConfusionModel":
        table: dict[str, list[tuple[str, float]]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) not in (2, 3):
                    raise PairFormatError(f"{path}:{lineno}: expected char<TAB>confusable[<TAB>weight]")
                weight = float(parts[2]) if len(parts) == 3 else 1.0
                table.setdefault(nfc(parts[0]), []).append((nfc(parts[1]), weight))
        return cls(table, rate)

    def coverage(self, text: str) -> float:
        if not text:
            return 0.0
        return sum(ch in self.table for ch in text) / len(text)


def inject_errors(sentence: str, model: ConfusionModel, rng: np.random.Generator) -> CorrectionPair:
    """Substitute each confusable character with probability ``model.rate``.

    One uniform draw is consumed per character, so the random stream does not
    depend on which characters happen to be confusable.
    """
    sentence = nfc(sentence)
    out = []
    for ch, u in zip(sentence, rng.random(len(sentence))):
        options = model.table.get(ch)
        if options and u < model.rate:
            weights = np.array([w for _, w in options], dtype=np.float64)
            k = rng.choice(len(options), p=weights / weights.sum())
            out.append(options[k][0])
        else:
            out.append(ch)
    return CorrectionPair("".join(out), sentence)


def load_stopwords(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [nfc(s.strip()) for s in lines if s.strip() and not s.startswith("#")]


def stopword_positions(text: str, stopwords: Iterable[str], granularity: str = "char") -> set[int]:
    """Positions of ``text`` covered by a stopword.

    ``char``: a position is covered when its character is a one-character
    stopword. ``word``: any occurrence of any stopword string covers its span.
    """
    stopwords = list(stopwords)
    if granularity == "char":
        single = {s for s in stopwords if len(s) == 1}
        return {i for i, ch in enumerate(text) if ch in single}
    if granularity != "word":
        raise ValueError(f"unknown stopword granularity {granularity!r}")
    covered: set[int] = set()
    for word in stopwords:
        start = text.find(word)
        while start != -1:
            covered.update(range(start, start + len(word)))
            start = text.find(word, start + 1)
    return covered


def filter_stopword_errors(
    pairs: Iterable[CorrectionPair], stopwords: Iterable[str], granularity: str = "char"
) -> list[CorrectionPair]:
    """Drop pairs whose every error lies on a stopword of the target; clean pairs stay."""
    stopwords = list(stopwords)
    kept = []
    for p in pairs:
        errs = p.error_positions
        if errs and errs <= stopword_positions(p.target, stopwords, granularity):
            continue
        kept.append(p)
    return kept


@dataclass
class DatasetSplit:
    train: list[CorrectionPair]
    dev: list[CorrectionPair]
    test: list[CorrectionPair]
    seed: int
    counts: tuple[int, int, int] = field(default=(0, 0, 0))

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "dev", "test"):
            save_pairs(getattr(self, name), out / f"{name}.tsv")
        manifest = {"seed": self.seed, "counts": {"train": len(self.train), "dev": len(self.dev),
                                                  "test": len(self.test)}}
        (out / "split.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, out_dir) -> "DatasetSplit":
        out = Path(out_dir)
        manifest = json.loads((out / "split.json").read_text(encoding="utf-8"))
        parts = [load_pairs(out / f"{n}.tsv") for n in ("train", "dev", "test")]
        return cls(*parts, seed=manifest["seed"], counts=tuple(len(p) for p in parts))


def split_dataset(pairs: Sequence[CorrectionPair], counts: tuple[int, int, int], seed: int) -> DatasetSplit:
    n_train, n_dev, n_test = counts
    if min(counts) < 0:
        raise ValueError(f"split counts must be non-negative: {counts}")
    if sum(counts) > len(pairs):
        raise ValueError(f"need {sum(counts)} pairs for split {counts}, have {len(pairs)}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    picked = [pairs[i] for i in order]
    return DatasetSplit(
        train=picked[:n_train],
        dev=picked[n_train:n_train + n_dev],
        test=picked[n_train + n_dev:n_train + n_dev + n_test],
        seed=seed,
        counts=(n_train, n_dev, n_test),
    )
