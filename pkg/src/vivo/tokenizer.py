"""Greedy longest-match subword tokenizer and vocabulary file handling."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError, UnknownCharacter, VivoIOError

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK)
CONTINUATION = "##"


def normalize(text: str) -> str:
    """Lowercase and collapse runs of whitespace."""
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token table; the id of a token is its index in ``entries``.

    Unknown-token handling is opt-in: pass ``use_unknown=True`` and make sure
    ``[UNK]`` is one of the entries.
    """

    entries: tuple[str, ...]
    use_unknown: bool = False
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        index = {}
        for i, tok in enumerate(entries):
            if not tok or tok != tok.strip() or any(c.isspace() for c in tok):
                raise DataError(f"vocabulary line {i + 1}: invalid token {tok!r}")
            if tok in index:
                raise DataError(f"vocabulary line {i + 1}: duplicate token {tok!r}")
            index[tok] = i
        for tok in SPECIAL_TOKENS:
            if tok not in index:
                raise DataError(f"vocabulary is missing special token {tok}")
        if self.use_unknown and UNK not in index:
            raise DataError(f"unknown-token handling enabled but {UNK} is not in the vocabulary")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index[token]

    def token(self, token_id: int) -> str:
        return self.entries[token_id]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def cls_id(self) -> int:
        return self._index[CLS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    @property
    def unk_id(self) -> int | None:
        return self._index[UNK] if self.use_unknown else None

    @property
    def special(self) -> dict[str, int]:
        return {tok: self._index[tok] for tok in SPECIAL_TOKENS}

    @property
    def special_ids(self) -> frozenset[int]:
        ids = {self._index[tok] for tok in SPECIAL_TOKENS}
        if UNK in self._index:
            ids.add(self._index[UNK])
        return frozenset(ids)

    @classmethod
    def from_words(cls, words: Iterable[str], use_unknown: bool = False) -> "Vocabulary":
        """Specials first, then ``words`` in first-seen order (duplicates dropped)."""
        entries = list(SPECIAL_TOKENS)
        if use_unknown:
            entries.append(UNK)
        seen = set(entries)
        for w in words:
            if w not in seen:
                seen.add(w)
                entries.append(w)
        return cls(tuple(entries), use_unknown=use_unknown)

    def save(self, path: str | os.PathLike) -> None:
        text = "".join(tok + "\n" for tok in self.entries)
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike, use_unknown: bool = False) -> "Vocabulary":
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise VivoIOError(f"cannot read vocabulary {path}: {exc.strerror}") from exc
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"vocabulary {path} is not valid UTF-8") from exc
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(line.rstrip("\r") for line in lines), use_unknown=use_unknown)


def _segment_word(word: str, vocab: Vocabulary) -> list[int]:
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab:
                found = vocab.id(piece)
                break
            end -= 1
        if found is None:
            if vocab.unk_id is not None:
                return [vocab.unk_id]
            raise UnknownCharacter(
                f"cannot segment {word!r}: no vocabulary piece covers {word[start]!r} at offset {start}"
            )
        ids.append(found)
        start = end
    return ids


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first segmentation of each whitespace-separated word."""
    ids: list[int] = []
    for word in normalize(text).split(" "):
        if word:
            ids.extend(_segment_word(word, vocab))
    return ids


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        tok = vocab.token(int(i))
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass(frozen=True)
class TagBlock:
    """A tag and its token ids; the token order inside a block never changes."""

    tag_text: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if not self.token_ids:
            raise DataError(f"tag {self.tag_text!r} produced no tokens")

    def __len__(self) -> int:
        return len(self.token_ids)


def build_tag_blocks(tags: Sequence[str], vocab: Vocabulary) -> list[TagBlock]:
    blocks = []
    for tag in tags:
        if not normalize(tag):
            raise DataError("tags must be non-empty strings")
        blocks.append(TagBlock(normalize(tag), tuple(tokenize(tag, vocab))))
    return blocks
