"""Pretraining data pipeline: documents to masked MLM+NSP instances.

Raw text is segmented into sentences with a rule-based splitter, packed
into next-sentence pairs filled greedily to the sequence budget, and each
packed pair is masked ``dup_factor`` times (default 20) with whole-word
masking at a 15% rate. All randomness derives from one integer seed, so a
run is reproducible bit for bit.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .runtime import make_rng
from .wordpiece import Vocabulary, tokenize_to_ids

logger = logging.getLogger(__name__)

# Trailing-dot words that do not end a sentence.
ABBREVIATIONS = frozenset(
    "al approx ca cf dr drs e.g eq eqs et etc fig figs i.e inc jr mr mrs ms "
    "no nos pp prof ref refs resp sp spp st vol vols vs".split()
)

# Parenthesized spans shorter than this never contain a sentence break.
PAREN_PROTECT_CHARS = 60


class CorpusError(ValueError):
    """Raised for malformed documents or corpus files."""


class NspLabel(enum.IntEnum):
    IS_NEXT = 0
    NOT_NEXT = 1


@dataclass(frozen=True)
class Document:
    """An ordered list of sentences from one source document."""

    sentences: tuple[str, ...]

    def __post_init__(self):
        if not self.sentences:
            raise CorpusError("document has no sentences")
        for s in self.sentences:
            if not s.strip():
                raise CorpusError("document contains an empty sentence")

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class PackedPair:
    """A [CLS] a.. [SEP] b.. [SEP] sequence before masking."""

    pair_id: int
    input_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    nsp_label: NspLabel


@dataclass(frozen=True)
class PretrainInstance:
    """One masked training example.

    ``masked_positions`` are sorted indices into ``input_ids`` (after
    replacement); ``mlm_labels`` hold the original ids at those positions.
    """

    pair_id: int
    duplicate_index: int
    input_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    masked_positions: tuple[int, ...]
    mlm_labels: tuple[int, ...]
    nsp_label: NspLabel


def _round_half_up(x: float) -> int:
    # round() half-to-even would map 0.5-boundary targets down half the
    # time; masking budgets use the conventional half-up rule instead.
    return int(math.floor(x + 0.5))


def _protected_ranges(text: str) -> list[tuple[int, int]]:
    """Balanced parenthesized spans shorter than PAREN_PROTECT_CHARS."""
    ranges = []
    stack = []
    for i, ch in enumerate(text):
        if ch == "(":
            stack.append(i)
        elif ch == ")" and stack:
            start = stack.pop()
            if i - start < PAREN_PROTECT_CHARS:
                ranges.append((start, i))
    return ranges


def _word_before(text: str, dot_index: int) -> str:
    j = dot_index
    while j > 0 and not text[j - 1].isspace():
        j -= 1
    return text[j:dot_index]


def _word_after(text: str, start: int) -> str:
    k = start
    while k < len(text) and not text[k].isspace():
        k += 1
    return text[start:k]


def segment_sentences(text: str) -> Document:
    """Split text into sentences with a rule-based approximation.

    A sentence ends at ``. ! ?`` followed by whitespace and an uppercase
    letter or digit. Periods after stop-list abbreviations ("et al.",
    "e.g.") and after initials ("Smith J. A.") do not split, and no split
    occurs inside short parenthesized spans.
    """
    if not text.strip():
        raise CorpusError("cannot segment whitespace-only text into a document")
    protected = _protected_ranges(text)
    breaks = []
    for i, ch in enumerate(text):
        if ch not in ".!?":
            continue
        if i + 1 >= len(text) or not text[i + 1].isspace():
            continue
        k = i + 1
        while k < len(text) and text[k].isspace():
            k += 1
        if k == len(text) or not (text[k].isupper() or text[k].isdigit()):
            continue
        if any(lo < i < hi for lo, hi in protected):
            continue
        if ch == ".":
            before = _word_before(text, i)
            if before.lower().rstrip(".") in ABBREVIATIONS:
                continue
            nxt = _word_after(text, k)
            if (
                len(before) == 1
                and before.isupper()
                and len(nxt) == 2
                and nxt[0].isupper()
                and nxt[1] == "."
            ):
                # initials run: "J. A."
                continue
        breaks.append(i + 1)
    sentences = []
    start = 0
    for b in breaks + [len(text)]:
        piece = text[start:b].strip()
        if piece:
            sentences.append(piece)
        start = b
    return Document(tuple(sentences))


def read_corpus(path: str, pre_segmented: bool = False) -> list[Document]:
    """Read blank-line-separated documents from a UTF-8 file.

    With ``pre_segmented`` each line is taken as one sentence; otherwise
    the lines of a block are joined and run through the segmenter.
    """
    docs = []
    block: list[str] = []

    def flush():
        if not block:
            return
        if pre_segmented:
            docs.append(Document(tuple(block)))
        else:
            docs.append(segment_sentences(" ".join(block)))
        block.clear()

    with open(path, encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if line:
                block.append(line)
            else:
                flush()
    flush()
    if not docs:
        raise CorpusError(f"corpus file {path} contains no documents")
    return docs


def build_nsp_pairs(
    docs: Sequence[Document],
    vocab: Vocabulary,
    max_seq_len: int,
    rng_seed: int,
    short_seq_prob: float = 0.1,
) -> Iterator[tuple[list[int], list[int], NspLabel]]:
    """Pack documents into (tokens_a, tokens_b, label) pairs.

    Sentences are accumulated into chunks up to a target length; each
    chunk is split at a random point into segment A and either its true
    continuation (IsNext) or a span from a random other document
    (NotNext), with probability 0.5 each. Unused continuation sentences
    are pushed back for the next chunk. With probability
    ``short_seq_prob`` a chunk uses a shorter target length. Segments are
    trimmed to ``max_seq_len - 3`` (room for [CLS] and two [SEP]) by
    dropping tokens from the end of the longer one.
    """
    if len(docs) < 2:
        raise CorpusError(
            "need at least 2 documents so NotNext segments can come from another document"
        )
    if max_seq_len < 5:
        raise CorpusError(f"max_seq_len must be at least 5, got {max_seq_len}")
    rng = make_rng(rng_seed, "nsp-pack")
    max_num_tokens = max_seq_len - 3
    doc_tokens = [
        [tokenize_to_ids(sentence, vocab) for sentence in doc.sentences] for doc in docs
    ]
    for doc_index, sentences in enumerate(doc_tokens):
        target_len = max_num_tokens
        if rng.random() < short_seq_prob:
            target_len = int(rng.integers(2, max_num_tokens + 1))
        chunk: list[list[int]] = []
        chunk_len = 0
        i = 0
        while i < len(sentences):
            chunk.append(sentences[i])
            chunk_len += len(sentences[i])
            if i == len(sentences) - 1 or chunk_len >= target_len:
                a_end = 1
                if len(chunk) >= 2:
                    a_end = int(rng.integers(1, len(chunk)))
                tokens_a = [t for seg in chunk[:a_end] for t in seg]
                if len(chunk) == 1 or rng.random() < 0.5:
                    label = NspLabel.NOT_NEXT
                    target_b = target_len - len(tokens_a)
                    other = int(rng.integers(0, len(doc_tokens) - 1))
                    if other >= doc_index:
                        other += 1
                    other_sentences = doc_tokens[other]
                    start = int(rng.integers(0, len(other_sentences)))
                    tokens_b = []
                    for seg in other_sentences[start:]:
                        tokens_b.extend(seg)
                        if len(tokens_b) >= target_b:
                            break
                    # continuation sentences go back on the stream
                    i -= len(chunk) - a_end
                else:
                    label = NspLabel.IS_NEXT
                    tokens_b = [t for seg in chunk[a_end:] for t in seg]
                tokens_a, tokens_b = _trim_pair(tokens_a, tokens_b, max_num_tokens)
                if tokens_a and tokens_b:
                    yield tokens_a, tokens_b, label
                chunk = []
                chunk_len = 0
                target_len = max_num_tokens
                if rng.random() < short_seq_prob:
                    target_len = int(rng.integers(2, max_num_tokens + 1))
            i += 1


def _trim_pair(
    tokens_a: list[int], tokens_b: list[int], max_num_tokens: int
) -> tuple[list[int], list[int]]:
    """Drop tokens from the end of the longer segment until the pair fits."""
    while len(tokens_a) + len(tokens_b) > max_num_tokens:
        if len(tokens_a) > len(tokens_b):
            tokens_a.pop()
        else:
            tokens_b.pop()
    return tokens_a, tokens_b


def assemble_pair(
    pair_id: int,
    tokens_a: Sequence[int],
    tokens_b: Sequence[int],
    nsp_label: NspLabel,
    vocab: Vocabulary,
) -> PackedPair:
    """Add [CLS]/[SEP] delimiters and segment ids to a token pair."""
    input_ids = (vocab.cls_id, *tokens_a, vocab.sep_id, *tokens_b, vocab.sep_id)
    segment_ids = (0,) * (len(tokens_a) + 2) + (1,) * (len(tokens_b) + 1)
    return PackedPair(pair_id, input_ids, segment_ids, nsp_label)


def default_max_predictions(max_seq_len: int, masking_rate: float = 0.15) -> int:
    """Masking budget for a full-length sequence (77 at length 512)."""
    return _round_half_up(masking_rate * max_seq_len)


def apply_whole_word_masking(
    pair: PackedPair,
    vocab: Vocabulary,
    masking_rate: float = 0.15,
    max_predictions: int | None = None,
    duplicate_index: int = 0,
    rng_seed: int = 0,
) -> PretrainInstance:
    """Mask whole words in a packed pair.

    Words (maximal runs of a non-special token plus its ``##``
    continuations) are visited in random order; a word is masked whole
    unless doing so would exceed the budget
    ``min(max_predictions, round(rate * non_special_count))``, in which
    case it is skipped and the scan continues. Each masked position
    independently becomes [MASK] with probability 0.8, a random
    non-special id with 0.1, or stays unchanged with 0.1.

    The random stream is derived from (rng_seed, pair_id,
    duplicate_index), so the duplicates of one pair differ from each
    other and from every other pair.
    """
    word_groups: list[list[int]] = []
    for pos, token_id in enumerate(pair.input_ids):
        if token_id in vocab.special_ids:
            continue
        if (
            vocab.is_continuation(token_id)
            and word_groups
            and word_groups[-1][-1] == pos - 1
        ):
            word_groups[-1].append(pos)
        else:
            word_groups.append([pos])
    maskable = sum(len(g) for g in word_groups)
    if maskable == 0:
        raise CorpusError("pair has no maskable tokens")
    if max_predictions is None:
        max_predictions = default_max_predictions(len(pair.input_ids), masking_rate)
    target = max(1, min(max_predictions, _round_half_up(masking_rate * maskable)))

    rng = make_rng(rng_seed, pair.pair_id, duplicate_index)
    order = rng.permutation(len(word_groups))
    selected: list[int] = []
    for gi in order:
        group = word_groups[gi]
        if len(selected) + len(group) > target:
            continue
        selected.extend(group)
    if not selected:
        # every word overflows the rate budget; take the smallest that
        # respects the hard cap so at least one word is always masked
        fitting = [g for g in word_groups if len(g) <= max_predictions]
        if fitting:
            selected = min(fitting, key=len)[:]

    selected.sort()
    non_special_ids = np.array(
        [i for i in range(len(vocab)) if i not in vocab.special_ids], dtype=np.int64
    )
    input_ids = list(pair.input_ids)
    labels = []
    for pos in selected:
        labels.append(pair.input_ids[pos])
        u = rng.random()
        if u < 0.8:
            input_ids[pos] = vocab.mask_id
        elif u < 0.9:
            input_ids[pos] = int(non_special_ids[rng.integers(0, len(non_special_ids))])
        # else keep the original id
    return PretrainInstance(
        pair_id=pair.pair_id,
        duplicate_index=duplicate_index,
        input_ids=tuple(input_ids),
        segment_ids=pair.segment_ids,
        masked_positions=tuple(selected),
        mlm_labels=tuple(labels),
        nsp_label=pair.nsp_label,
    )


def generate_pretraining_set(
    docs: Sequence[Document],
    vocab: Vocabulary,
    max_seq_len: int,
    dup_factor: int = 20,
    masking_rate: float = 0.15,
    max_predictions: int | None = None,
    seed: int = 0,
) -> Iterator[PretrainInstance]:
    """Pack and mask a corpus: dup_factor instances per packed pair.

    Duplicates share input text, segment layout, and NSP label; only the
    masking differs. Fixed arguments give a byte-identical stream.
    """
    if dup_factor < 1:
        raise CorpusError(f"dup_factor must be positive, got {dup_factor}")
    if max_predictions is None:
        max_predictions = default_max_predictions(max_seq_len, masking_rate)
    for pair_id, (tokens_a, tokens_b, label) in enumerate(
        build_nsp_pairs(docs, vocab, max_seq_len, seed)
    ):
        pair = assemble_pair(pair_id, tokens_a, tokens_b, label, vocab)
        for dup in range(dup_factor):
            yield apply_whole_word_masking(
                pair,
                vocab,
                masking_rate=masking_rate,
                max_predictions=max_predictions,
                duplicate_index=dup,
                rng_seed=seed,
            )


def check_instance(instance: PretrainInstance, vocab: Vocabulary) -> None:
    """Validate the structural invariants of one instance; raises on breach."""
    ids = instance.input_ids
    if not ids or ids[0] != vocab.cls_id:
        raise CorpusError("instance does not start with [CLS]")
    sep_positions = [i for i, t in enumerate(ids) if t == vocab.sep_id]
    if len(sep_positions) != 2 or sep_positions[1] != len(ids) - 1:
        raise CorpusError("instance must contain exactly two [SEP], the last at the end")
    first_sep = sep_positions[0]
    expected_segments = tuple(0 if i <= first_sep else 1 for i in range(len(ids)))
    if instance.segment_ids != expected_segments:
        raise CorpusError("segment ids do not match [SEP] layout")
    if list(instance.masked_positions) != sorted(set(instance.masked_positions)):
        raise CorpusError("masked_positions must be sorted and unique")
    if len(instance.masked_positions) != len(instance.mlm_labels):
        raise CorpusError("masked_positions and mlm_labels lengths differ")
    structural = {0, *sep_positions}
    for pos in instance.masked_positions:
        if pos in structural:
            raise CorpusError(f"masked position {pos} is a [CLS]/[SEP] slot")


# ---------------------------------------------------------------------------
# Binary pretraining-set files
#
# Each record is a little-endian u32 length prefix followed by that many
# bytes of u32 fields:
#   pair_id, duplicate_index, nsp_label, n_tokens, n_masked,
#   input_ids[n_tokens], segment_ids[n_tokens],
#   masked_positions[n_masked], mlm_labels[n_masked]
# A JSON sidecar at <path>.json records the generation parameters.

_U32 = struct.Struct("<I")


def sidecar_path(path: str) -> str:
    return path + ".json"


def write_pretraining_set(
    instances: Iterable[PretrainInstance],
    path: str,
    seed: int,
    masking_rate: float,
    dup_factor: int,
    vocab: Vocabulary,
) -> int:
    """Write instances as length-prefixed binary records; returns the count."""
    count = 0
    with open(path, "wb") as f:
        for inst in instances:
            fields = [
                inst.pair_id,
                inst.duplicate_index,
                int(inst.nsp_label),
                len(inst.input_ids),
                len(inst.masked_positions),
                *inst.input_ids,
                *inst.segment_ids,
                *inst.masked_positions,
                *inst.mlm_labels,
            ]
            payload = np.asarray(fields, dtype="<u4").tobytes()
            f.write(_U32.pack(len(payload)))
            f.write(payload)
            count += 1
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(
            {
                "seed": seed,
                "masking_rate": masking_rate,
                "dup_factor": dup_factor,
                "vocab_sha256": vocab.content_hash(),
                "instance_count": count,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    return count


def read_pretraining_set(path: str) -> Iterator[PretrainInstance]:
    """Stream instances back from a binary pretraining-set file."""
    with open(path, "rb") as f:
        while True:
            prefix = f.read(_U32.size)
            if not prefix:
                break
            if len(prefix) < _U32.size:
                raise CorpusError(f"truncated record length prefix in {path}")
            (byte_len,) = _U32.unpack(prefix)
            payload = f.read(byte_len)
            if len(payload) < byte_len:
                raise CorpusError(f"truncated record payload in {path}")
            fields = np.frombuffer(payload, dtype="<u4")
            if len(fields) < 5:
                raise CorpusError(f"record too short in {path}")
            pair_id, dup, label, n_tokens, n_masked = (int(x) for x in fields[:5])
            expected = 5 + 2 * n_tokens + 2 * n_masked
            if len(fields) != expected:
                raise CorpusError(
                    f"record field count {len(fields)} does not match header "
                    f"(expected {expected}) in {path}"
                )
            off = 5
            input_ids = tuple(int(x) for x in fields[off : off + n_tokens])
            off += n_tokens
            segment_ids = tuple(int(x) for x in fields[off : off + n_tokens])
            off += n_tokens
            masked_positions = tuple(int(x) for x in fields[off : off + n_masked])
            off += n_masked
            mlm_labels = tuple(int(x) for x in fields[off : off + n_masked])
            yield PretrainInstance(
                pair_id=pair_id,
                duplicate_index=dup,
                input_ids=input_ids,
                segment_ids=segment_ids,
                masked_positions=masked_positions,
                mlm_labels=mlm_labels,
                nsp_label=NspLabel(label),
            )


def read_sidecar(path: str) -> dict:
    with open(sidecar_path(path), encoding="utf-8") as f:
        return json.load(f)
