"""Token inventory and tokenization.

Category names ("zebra", "hot dog") are atomic tokens, never split into
words. The vocabulary is laid out as [text block | singular-category block |
plural-category block]; later expansions append new category tokens at the
end so that existing token ids never move.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import DataError

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

KIND_SPECIAL = "special"
KIND_WORD = "word"
KIND_CATEGORY = "category"

SINGULAR = "s"
PLURAL = "p"

_STRIP_CHARS = ".,!?"


def normalize_caption(text: str) -> List[str]:
    """Lowercase, strip ``.,!?``, collapse whitespace; returns the word list."""
    lowered = text.lower()
    cleaned = "".join(" " if ch in _STRIP_CHARS else ch for ch in lowered)
    return cleaned.split()


@dataclass(frozen=True)
class TokenEntry:
    surface: str
    kind: str
    category: Optional[str] = None  # category name for KIND_CATEGORY entries
    number: Optional[str] = None    # SINGULAR or PLURAL


class Vocabulary:
    """Immutable token table with phrase-aware lookup structures."""

    def __init__(self, entries: Sequence[TokenEntry], text_end: int):
        self.entries: Tuple[TokenEntry, ...] = tuple(entries)
        self.text_end = int(text_end)
        self._word_ids: Dict[str, int] = {}
        self._category_ids: Dict[Tuple[str, str], int] = {}
        # phrase index: word-tuple -> token id, plus the set of lengths present
        self._phrases: Dict[Tuple[str, ...], int] = {}
        for idx, entry in enumerate(self.entries):
            if entry.kind == KIND_CATEGORY:
                key = (entry.category, entry.number)
                if key in self._category_ids:
                    raise DataError(f"duplicate category token {key}")
                self._category_ids[key] = idx
                words = tuple(entry.surface.split())
                if words in self._phrases:
                    raise DataError(f"duplicate category surface {entry.surface!r}")
                self._phrases[words] = idx
            else:
                if entry.surface in self._word_ids:
                    raise DataError(f"duplicate surface {entry.surface!r}")
                self._word_ids[entry.surface] = idx
        self._phrase_lengths = sorted({len(w) for w in self._phrases}, reverse=True)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def bos_id(self) -> int:
        return self._word_ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._word_ids[EOS]

    @property
    def unk_id(self) -> int:
        return self._word_ids[UNK]

    def surface(self, token_id: int) -> str:
        return self.entries[token_id].surface

    def word_id(self, surface: str) -> Optional[int]:
        return self._word_ids.get(surface)

    def category_token_id(self, name: str, number: str) -> Optional[int]:
        return self._category_ids.get((name, number))

    def category_token_ids(self, name: str) -> Tuple[Optional[int], Optional[int]]:
        return (
            self._category_ids.get((name, SINGULAR)),
            self._category_ids.get((name, PLURAL)),
        )

    def has_category(self, name: str) -> bool:
        return (name, SINGULAR) in self._category_ids

    def category_rows(self) -> List[Tuple[int, str, str]]:
        """(token id, category name, number) for every category token, in id order."""
        return [
            (idx, e.category, e.number)
            for idx, e in enumerate(self.entries)
            if e.kind == KIND_CATEGORY
        ]

    def match_phrase(self, words: Sequence[str], start: int) -> Optional[Tuple[int, int]]:
        """Longest category phrase starting at ``words[start]``: (token id, length)."""
        for length in self._phrase_lengths:
            if start + length > len(words):
                continue
            token_id = self._phrases.get(tuple(words[start : start + length]))
            if token_id is not None:
                return token_id, length
        return None

    def with_appended_categories(self, categories) -> "Vocabulary":
        """New vocabulary with singular then plural tokens of ``categories`` appended.

        Existing (surface, id) pairs are untouched; the text block boundary is
        unchanged. Raises on duplicate category names or surfaces.
        """
        for cat in categories:
            if self.has_category(cat.name):
                raise DataError(f"category {cat.name!r} already in vocabulary")
        entries = list(self.entries)
        for cat in categories:
            entries.append(TokenEntry(cat.singular, KIND_CATEGORY, cat.name, SINGULAR))
        for cat in categories:
            entries.append(TokenEntry(cat.plural, KIND_CATEGORY, cat.name, PLURAL))
        return Vocabulary(entries, self.text_end)


def _excise_categories(words: List[str], vocab_like: "Vocabulary") -> List[str]:
    """Words that remain after removing category-phrase spans (longest match)."""
    out = []
    i = 0
    while i < len(words):
        match = vocab_like.match_phrase(words, i)
        if match is not None:
            i += match[1]
        else:
            out.append(words[i])
            i += 1
    return out


def build_vocabulary(captions: Iterable[str], categories, min_count: int = 1) -> Vocabulary:
    """Build the partitioned vocabulary from a caption corpus and category list.

    Text block = specials plus words whose corpus frequency (after excising
    category-phrase spans) is at least ``min_count``, ordered by descending
    frequency then surface. Category blocks follow in the given order.
    """
    if min_count < 1:
        raise DataError("min_count must be >= 1")
    names = [c.name for c in categories]
    if len(set(names)) != len(names):
        raise DataError("duplicate category names")
    surfaces = [c.singular for c in categories] + [c.plural for c in categories]
    if len(set(surfaces)) != len(surfaces):
        raise DataError("duplicate category surfaces")

    # probe vocabulary used only for span excision during counting
    probe_entries = [TokenEntry(BOS, KIND_SPECIAL), TokenEntry(EOS, KIND_SPECIAL), TokenEntry(UNK, KIND_SPECIAL)]
    for cat in categories:
        probe_entries.append(TokenEntry(cat.singular, KIND_CATEGORY, cat.name, SINGULAR))
    for cat in categories:
        probe_entries.append(TokenEntry(cat.plural, KIND_CATEGORY, cat.name, PLURAL))
    probe = Vocabulary(probe_entries, 3)

    counts: Dict[str, int] = {}
    for caption in captions:
        for word in _excise_categories(normalize_caption(caption), probe):
            counts[word] = counts.get(word, 0) + 1

    words = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    entries = [TokenEntry(BOS, KIND_SPECIAL), TokenEntry(EOS, KIND_SPECIAL), TokenEntry(UNK, KIND_SPECIAL)]
    entries.extend(TokenEntry(w, KIND_WORD) for w in words)
    text_end = len(entries)
    for cat in categories:
        entries.append(TokenEntry(cat.singular, KIND_CATEGORY, cat.name, SINGULAR))
    for cat in categories:
        entries.append(TokenEntry(cat.plural, KIND_CATEGORY, cat.name, PLURAL))
    return Vocabulary(entries, text_end)


def tokenize(caption: str, vocab: Vocabulary) -> List[int]:
    """Caption text to token ids, wrapped in bos...eos.

    Category surfaces are matched greedily left to right, longest match
    first, before falling back to single-word lookup; unknown words map to
    the unk token.
    """
    words = normalize_caption(caption)
    if not words:
        raise DataError(f"caption is empty after normalization: {caption!r}")
    out = [vocab.bos_id]
    i = 0
    while i < len(words):
        match = vocab.match_phrase(words, i)
        if match is not None:
            out.append(match[0])
            i += match[1]
            continue
        word_id = vocab.word_id(words[i])
        out.append(word_id if word_id is not None else vocab.unk_id)
        i += 1
    out.append(vocab.eos_id)
    return out


_VOWELS = "aeiou"


def _fix_articles(surfaces: List[str]) -> List[str]:
    out = list(surfaces)
    for i in range(len(out) - 1):
        nxt = out[i + 1][:1]
        if out[i] == "a" and nxt in _VOWELS:
            out[i] = "an"
        elif out[i] == "an" and nxt and nxt not in _VOWELS:
            out[i] = "a"
    return out


def detokenize(tokens: Sequence[int], vocab: Vocabulary, article_fix: bool = False) -> str:
    """Token ids back to text; requires a well-formed bos...eos frame.

    With ``article_fix``, "a" becomes "an" before a vowel-initial surface and
    "an" becomes "a" before a consonant-initial one, as rule-based
    post-processing on the rendered surfaces.
    """
    if len(tokens) < 2 or tokens[0] != vocab.bos_id or tokens[-1] != vocab.eos_id:
        raise DataError("malformed token frame: expected bos ... eos")
    body = list(tokens[1:-1])
    if vocab.bos_id in body or vocab.eos_id in body:
        raise DataError("malformed token frame: interior bos/eos")
    surfaces = [vocab.surface(t) for t in body]
    if article_fix:
        surfaces = _fix_articles(surfaces)
    return " ".join(surfaces)
