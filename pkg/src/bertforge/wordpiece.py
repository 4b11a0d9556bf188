"""Cased WordPiece: vocabulary training and subword segmentation.

Training initializes the vocabulary with the individual characters of the
corpus (word-initial and ``##``-continuation forms) and then iteratively
merges the adjacent symbol pair with the best likelihood score

    score(left, right) = freq(left+right) / (freq(left) * freq(right))

until the target size is reached. Ties are broken by the lexicographically
smallest (left, right) pair, and scores are compared with exact integer
cross-multiplication so results are bit-reproducible across runs.

Segmentation is greedy longest-match-first. A word with any unmatchable
remainder becomes a single ``[UNK]`` span covering the whole word.
"""

from __future__ import annotations

import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from .runtime import bytes_sha256

logger = logging.getLogger(__name__)

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
MASK_TOKEN = "[MASK]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN)

CONTINUATION_PREFIX = "##"

# Words longer than this segment to [UNK]; guards pathological inputs.
MAX_WORD_CHARS = 100


class VocabularyError(ValueError):
    """Raised for malformed vocabularies or infeasible training requests."""


class Vocabulary:
    """Ordered token list; the list index is the token id.

    Ids are dense ``0..size-1`` with ``[PAD]`` pinned at id 0 and all five
    special tokens present. Instances are immutable and safe to share
    across threads.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        ids: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in ids:
                raise VocabularyError(f"duplicate token {tok!r} at ids {ids[tok]} and {i}")
            ids[tok] = i
        for special in SPECIAL_TOKENS:
            if special not in ids:
                raise VocabularyError(f"missing special token {special}")
        if ids[PAD_TOKEN] != 0:
            raise VocabularyError(f"{PAD_TOKEN} must have id 0, got {ids[PAD_TOKEN]}")
        for tok in tokens:
            if tok not in SPECIAL_TOKENS and any(ch.isspace() for ch in tok):
                raise VocabularyError(f"token {tok!r} contains whitespace")
        self._tokens = tokens
        self._ids = ids
        self.pad_id = ids[PAD_TOKEN]
        self.unk_id = ids[UNK_TOKEN]
        self.cls_id = ids[CLS_TOKEN]
        self.sep_id = ids[SEP_TOKEN]
        self.mask_id = ids[MASK_TOKEN]
        self.special_ids = frozenset(ids[t] for t in SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} not in vocabulary") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise VocabularyError(
                f"token id {token_id} out of range for vocabulary of size {len(self._tokens)}"
            )
        return self._tokens[token_id]

    def is_continuation(self, token_id: int) -> bool:
        return self.token_of(token_id).startswith(CONTINUATION_PREFIX)

    def save(self, path: str) -> None:
        """Write one token per line; the line number is the id."""
        with open(path, "w", encoding="utf-8") as f:
            for tok in self._tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)

    def content_hash(self) -> str:
        """SHA-256 of the serialized token list; stable identity for sidecars."""
        return bytes_sha256("\n".join(self._tokens).encode("utf-8"))


@dataclass(frozen=True)
class TokenSpan:
    """One subword occurrence in a source text.

    ``word_index`` groups the subwords of one pre-split word (the
    whole-word unit for masking); ``byte_range`` is a half-open pair of
    UTF-8 byte offsets into the source text.
    """

    token_id: int
    word_index: int
    byte_range: tuple[int, int]


def _is_punctuation(ch: str) -> bool:
    # ASCII symbol ranges count as punctuation even when Unicode says otherwise
    # (e.g. $, +, ~), matching common BERT-style pre-tokenization.
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pre_split(text: str) -> list[tuple[str, int, int]]:
    """Split text into words with half-open character offsets.

    Splits on Unicode whitespace, then isolates every punctuation
    character as a word of its own. Other symbols (e.g. male/female signs)
    stay attached to their neighbors.
    """
    words: list[tuple[str, int, int]] = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace():
            if start is not None:
                words.append((text[start:i], start, i))
                start = None
        elif _is_punctuation(ch):
            if start is not None:
                words.append((text[start:i], start, i))
                start = None
            words.append((ch, i, i + 1))
        else:
            if start is None:
                start = i
    if start is not None:
        words.append((text[start:], start, len(text)))
    return words


def _byte_offsets(text: str) -> list[int]:
    """Cumulative UTF-8 byte offset of each character boundary."""
    offsets = [0]
    total = 0
    for ch in text:
        total += len(ch.encode("utf-8"))
        offsets.append(total)
    return offsets


def tokenize(text: str, vocab: Vocabulary) -> list[TokenSpan]:
    """Segment text into vocabulary subwords with whole-word tracking.

    Pure function of (text, vocab): identical inputs give identical spans.
    """
    byte_of = _byte_offsets(text)
    spans: list[TokenSpan] = []
    for word_index, (word, w_start, w_end) in enumerate(pre_split(text)):
        if len(word) > MAX_WORD_CHARS:
            spans.append(TokenSpan(vocab.unk_id, word_index, (byte_of[w_start], byte_of[w_end])))
            continue
        pieces: list[tuple[int, int, int]] = []  # (token_id, char_start, char_end) in word
        pos = 0
        while pos < len(word):
            end = len(word)
            match = None
            while end > pos:
                piece = word[pos:end]
                if pos > 0:
                    piece = CONTINUATION_PREFIX + piece
                if piece in vocab:
                    match = (vocab.id_of(piece), pos, end)
                    break
                end -= 1
            if match is None:
                pieces = []
                break
            pieces.append(match)
            pos = match[2]
        if not pieces:
            spans.append(TokenSpan(vocab.unk_id, word_index, (byte_of[w_start], byte_of[w_end])))
        else:
            for token_id, c_start, c_end in pieces:
                spans.append(
                    TokenSpan(
                        token_id,
                        word_index,
                        (byte_of[w_start + c_start], byte_of[w_start + c_end]),
                    )
                )
    return spans


def tokenize_to_ids(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids only; convenience for packing pipelines."""
    return [span.token_id for span in tokenize(text, vocab)]


def detokenize(spans: Sequence[TokenSpan], vocab: Vocabulary) -> str:
    """Rebuild text from spans: inverse of ``tokenize`` for UNK-free input.

    Subwords of one word are glued without spaces after stripping the
    continuation prefix. Consecutive words are joined with a single space,
    except when their byte ranges are exactly adjacent in the source (the
    punctuation-isolation case), which restores e.g. ``"x-linked"``.
    """
    parts: list[str] = []
    prev_word = None
    prev_end = None
    for span in spans:
        surface = vocab.token_of(span.token_id)
        if span.word_index == prev_word:
            parts.append(surface.removeprefix(CONTINUATION_PREFIX))
        else:
            if prev_word is not None and span.byte_range[0] != prev_end:
                parts.append(" ")
            parts.append(surface)
            prev_word = span.word_index
        prev_end = span.byte_range[1]
    return "".join(parts)


def ids_to_tokens(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.token_of(i) for i in ids]


def ids_to_text(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Plain reconstruction from bare ids: continuation pieces glued to the
    preceding token, words joined with single spaces."""
    parts: list[str] = []
    for i in ids:
        surface = vocab.token_of(i)
        if surface.startswith(CONTINUATION_PREFIX) and parts:
            parts[-1] += surface.removeprefix(CONTINUATION_PREFIX)
        else:
            parts.append(surface)
    return " ".join(parts)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(
        ch if i == 0 else CONTINUATION_PREFIX + ch for i, ch in enumerate(word)
    )


class _MergeState:
    """Incremental pair/symbol statistics over a weighted word list."""

    def __init__(self, words: list[tuple[list[str], int]]):
        self.words = words
        self.sym_freq: Counter[str] = Counter()
        self.pair_freq: Counter[tuple[str, str]] = Counter()
        self.pair_words: dict[tuple[str, str], set[int]] = {}
        for idx, (syms, count) in enumerate(words):
            self._add_word(idx, syms, count)

    def _add_word(self, idx: int, syms: list[str], count: int) -> None:
        for s in syms:
            self.sym_freq[s] += count
        for a, b in zip(syms, syms[1:]):
            self.pair_freq[(a, b)] += count
            self.pair_words.setdefault((a, b), set()).add(idx)

    def _remove_word(self, idx: int, syms: list[str], count: int) -> None:
        for s in syms:
            self.sym_freq[s] -= count
        for a, b in zip(syms, syms[1:]):
            self.pair_freq[(a, b)] -= count
            if self.pair_freq[(a, b)] <= 0:
                del self.pair_freq[(a, b)]
                self.pair_words.pop((a, b), None)

    def best_pair(self, min_frequency: int) -> tuple[str, str] | None:
        """Highest-scoring pair with freq >= min_frequency.

        score = freq(pair) / (freq(left) * freq(right)); comparisons use
        integer cross-multiplication, ties go to the smallest (left, right).
        """
        best: tuple[str, str] | None = None
        best_num = 0  # freq(pair)
        best_den = 1  # freq(left) * freq(right)
        for pair, freq in self.pair_freq.items():
            if freq < min_frequency:
                continue
            den = self.sym_freq[pair[0]] * self.sym_freq[pair[1]]
            if best is None:
                better = True
            else:
                lhs = freq * best_den
                rhs = best_num * den
                better = lhs > rhs or (lhs == rhs and pair < best)
            if better:
                best, best_num, best_den = pair, freq, den
        return best

    def apply_merge(self, pair: tuple[str, str], merged: str) -> None:
        affected = sorted(self.pair_words.get(pair, ()))
        for idx in affected:
            syms, count = self.words[idx]
            self._remove_word(idx, syms, count)
            new_syms: list[str] = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    new_syms.append(merged)
                    i += 2
                else:
                    new_syms.append(syms[i])
                    i += 1
            self.words[idx] = (new_syms, count)
            self._add_word(idx, new_syms, count)


def train_vocabulary(
    corpus: Iterable[str],
    target_size: int,
    min_frequency: int = 2,
) -> Vocabulary:
    """Train a cased WordPiece vocabulary from a document stream.

    Characters with total corpus frequency >= ``min_frequency`` seed the
    alphabet: the plain form always, the ``##`` form when the character
    occurs word-internally. Merges stop when ``target_size`` is reached or
    no pair with frequency >= ``min_frequency`` remains (then the smaller
    size is reported via a warning).

    Training is case-preserving and fully deterministic.
    """
    if target_size < 1:
        raise VocabularyError(f"target_size must be positive, got {target_size}")
    if min_frequency < 1:
        raise VocabularyError(f"min_frequency must be positive, got {min_frequency}")

    word_counts: Counter[str] = Counter()
    for doc in corpus:
        for word, _, _ in pre_split(doc):
            word_counts[word] += 1
    if not word_counts:
        raise VocabularyError("empty corpus: no words to train on")

    char_totals: Counter[str] = Counter()
    internal_chars: set[str] = set()
    for word, count in word_counts.items():
        for i, ch in enumerate(word):
            char_totals[ch] += count
            if i > 0:
                internal_chars.add(ch)

    alphabet: list[str] = []
    kept_chars: set[str] = set()
    for ch, total in char_totals.items():
        if total >= min_frequency:
            kept_chars.add(ch)
            alphabet.append(ch)
            if ch in internal_chars:
                alphabet.append(CONTINUATION_PREFIX + ch)
    alphabet.sort()

    min_feasible = len(SPECIAL_TOKENS) + len(alphabet)
    if target_size < min_feasible:
        raise VocabularyError(
            f"target_size {target_size} is below the minimum feasible size "
            f"{min_feasible} ({len(alphabet)} alphabet tokens + {len(SPECIAL_TOKENS)} specials)"
        )

    # Words containing a dropped character can never be segmented; exclude
    # them from merge statistics.
    trainable = [
        (list(_word_symbols(word)), count)
        for word, count in sorted(word_counts.items())
        if word and all(ch in kept_chars for ch in word)
    ]

    tokens: list[str] = list(SPECIAL_TOKENS) + alphabet
    state = _MergeState(trainable)
    seen = set(tokens)
    while len(tokens) < target_size:
        pair = state.best_pair(min_frequency)
        if pair is None:
            logger.warning(
                "corpus cannot support target_size %d; stopping at %d tokens",
                target_size,
                len(tokens),
            )
            break
        merged = pair[0] + pair[1].removeprefix(CONTINUATION_PREFIX)
        state.apply_merge(pair, merged)
        if merged not in seen:
            tokens.append(merged)
            seen.add(merged)
    return Vocabulary(tokens)


def count_unk_spans(texts: Iterable[str], vocab: Vocabulary) -> int:
    """Number of [UNK] spans produced over a corpus; coverage diagnostic."""
    total = 0
    for text in texts:
        total += sum(1 for s in tokenize(text, vocab) if s.token_id == vocab.unk_id)
    return total
