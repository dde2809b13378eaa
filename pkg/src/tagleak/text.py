"""Vocabulary files, greedy WordPiece tokenization, and the bundled corpora.

A vocab file is UTF-8 with one token per line; ids follow line order.  A
corpus file holds ``label<TAB>sentence`` lines.  Three corpora ship with the
package, styled after short acceptability judgements, medium-length movie
reviews and long entailment passages.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"
MAX_WORD_CHARS = 100

CORPUS_STYLES = ("short", "medium", "long")


class VocabError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise VocabError(f"duplicate token {tok!r} at line {i + 1} (first seen at line {index[tok] + 1})")
            index[tok] = i
        missing = [t for t in RESERVED if t not in index]
        if missing:
            raise VocabError(f"vocab lacks reserved token(s) {', '.join(missing)}")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def token_of(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise VocabError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[i]

    def truncated(self, size: int) -> "Vocab":
        """The first ``size`` tokens; the reserved tokens must survive the cut."""
        if not 0 < size <= len(self.tokens):
            raise VocabError(f"cannot truncate a {len(self.tokens)}-token vocab to {size}")
        return Vocab(self.tokens[:size])


def load_vocab(path) -> Vocab:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocab(tuple(line.rstrip("\r") for line in lines))


def bundled_vocab() -> Vocab:
    return load_vocab(_data_path("vocab.txt"))


def _data_path(name: str) -> Path:
    return Path(str(resources.files("tagleak") / "data" / name))


# ---------------------------------------------------------------------------
# tokenization

def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_split(text: str) -> list[str]:
    """Lowercase, then split on whitespace with every punctuation mark its own word."""
    words = []
    for chunk in text.lower().split():
        cur = []
        for ch in chunk:
            if _is_punct(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            else:
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


def wordpiece(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match segmentation; an unsegmentable word becomes a single UNK."""
    if len(word) > MAX_WORD_CHARS:
        return [vocab.unk_id]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.index:
                match = vocab.index[piece]
                break
            end -= 1
        if match is None:
            return [vocab.unk_id]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[int]:
    if not text or not text.strip():
        raise ValueError("cannot tokenize empty text")
    ids = []
    for word in basic_split(text):
        ids.extend(wordpiece(word, vocab))
    return ids


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    out: list[str] = []
    for i in ids:
        tok = vocab.token_of(int(i))
        if tok.startswith(CONTINUATION) and out:
            out[-1] += tok[len(CONTINUATION):]
        else:
            out.append(tok)
    return " ".join(out)


# ---------------------------------------------------------------------------
# corpora

@dataclass(frozen=True)
class Example:
    text: str
    label: int


@dataclass(frozen=True)
class Corpus:
    name: str
    style: str
    examples: tuple[Example, ...]

    def __post_init__(self):
        if self.style not in CORPUS_STYLES:
            raise CorpusError(f"unknown corpus style {self.style!r}")

    def __len__(self) -> int:
        return len(self.examples)

    def check_labels(self, num_classes: int) -> None:
        for i, ex in enumerate(self.examples):
            if not 0 <= ex.label < num_classes:
                raise CorpusError(f"{self.name}: example {i} has label {ex.label}, expected < {num_classes}")


def load_corpus(path, style: str, name: str | None = None) -> Corpus:
    examples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        label, sep, sentence = line.partition("\t")
        if not sep or not sentence.strip():
            raise CorpusError(f"{path}:{lineno}: expected 'label<TAB>sentence'")
        try:
            examples.append(Example(sentence.strip(), int(label)))
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: label {label!r} is not an integer") from None
    if not examples:
        raise CorpusError(f"{path}: no sentences")
    return Corpus(name or Path(path).stem, style, tuple(examples))


def bundled_corpus(style: str) -> Corpus:
    if style not in CORPUS_STYLES:
        raise CorpusError(f"unknown bundled corpus {style!r}; choose from {', '.join(CORPUS_STYLES)}")
    return load_corpus(_data_path(f"{style}.tsv"), style)


def is_canonical(text: str) -> bool:
    """True when ``text`` already has the form :func:`detokenize` produces."""
    return " ".join(basic_split(text)) == text
