"""Task datasets, preprocessing, and the tuning protocol for four tasks:
token-level tagging (NER), passage-level relation classification (RE),
multi-label document classification (DC), and extractive span QA.

The protocol mirrors the reference recipe: grid-search batch size and
learning rate on a dev split, keep the dev-best checkpoint within each
cell, then rerun the winning cell with several seeds and report the mean
test score.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import IGNORE_INDEX, Tensor, no_grad
from .checkpoint import Checkpoint
from .metrics import (
    EntityPrediction,
    RankedAnswerList,
    bioasq_factoid,
    entity_f1,
    micro_macro_f1,
)
from .model import EncoderModel, Heads, ModelConfig, all_params, no_decay_names
from .optim import AdamConfig, AdamW, DivergenceError
from .runtime import make_rng
from .wordpiece import Vocabulary, tokenize, tokenize_to_ids

logger = logging.getLogger(__name__)

TASK_KINDS = ("ner", "re", "dc", "qa")

DEFAULT_MAX_SEQ_LEN = {"ner": 256, "re": 256, "dc": 512, "qa": 384}

DEFAULT_SELECTION_METRIC = {
    "ner": "entity_f1",
    "re": "micro_f1",
    "dc": "micro_f1",
    "qa": "mrr",
}


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dataset records


@dataclass(frozen=True)
class NerSentence:
    words: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.words) != len(self.tags):
            raise DatasetError(
                f"{len(self.words)} words but {len(self.tags)} tags"
            )
        for w in self.words:
            if not w or any(ch.isspace() for ch in w):
                raise DatasetError(f"invalid NER token {w!r}")


@dataclass(frozen=True)
class SeqExample:
    """One passage/document with its label(s).

    ``entities`` optionally carries (start, end, tag) character spans to
    be replaced by their type tags before tokenization.
    """

    example_id: str
    text: str
    labels: tuple[str, ...]
    entities: tuple[tuple[int, int, str], ...] = ()


@dataclass(frozen=True)
class QaExample:
    qid: str
    question: str
    context: str
    answers: tuple[str, ...]
    answer_starts: tuple[int, ...]

    def __post_init__(self):
        if not self.answers or len(self.answers) != len(self.answer_starts):
            raise DatasetError(f"question {self.qid}: malformed answer list")


def validate_bio(tags: Sequence[str]) -> None:
    """Reject tag sequences that break the B/I/O chaining rules.

    Raises DatasetError with ``position`` set to the offending index.
    """
    prev = "O"
    for i, tag in enumerate(tags):
        if tag != "O" and not (len(tag) > 2 and tag[:2] in ("B-", "I-")):
            err = DatasetError(f"tag {tag!r} is not O, B-<type>, or I-<type>")
            err.position = i
            raise err
        if tag.startswith("I-") and prev[2:] != tag[2:]:
            err = DatasetError(
                f"{tag} does not continue an entity (previous tag {prev})"
            )
            err.position = i
            raise err
        prev = tag


@dataclass(frozen=True)
class TaskDataset:
    task_kind: str
    examples: tuple
    label_space: tuple[str, ...]

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise DatasetError(
                f"unknown task kind {self.task_kind!r}; expected one of {TASK_KINDS}"
            )
        if len(set(self.label_space)) != len(self.label_space):
            raise DatasetError("label space contains duplicates")
        known = set(self.label_space)
        check = getattr(self, f"_check_{self.task_kind}")
        for i, ex in enumerate(self.examples):
            try:
                check(ex, known)
            except DatasetError as e:
                raise DatasetError(f"example {i}: {e}") from None

    def _check_ner(self, ex: NerSentence, known):
        validate_bio(ex.tags)
        bad = set(ex.tags) - known
        if bad:
            raise DatasetError(f"tags outside the label space: {sorted(bad)}")

    def _check_re(self, ex: SeqExample, known):
        if len(ex.labels) != 1:
            raise DatasetError(f"needs exactly one label, got {ex.labels}")
        if ex.labels[0] not in known:
            raise DatasetError(f"label {ex.labels[0]!r} outside the label space")

    def _check_dc(self, ex: SeqExample, known):
        bad = set(ex.labels) - known
        if bad:
            raise DatasetError(f"labels outside the label space: {sorted(bad)}")

    def _check_qa(self, ex: QaExample, known):
        for ans, start in zip(ex.answers, ex.answer_starts):
            if ex.context[start : start + len(ans)] != ans:
                raise DatasetError(
                    f"question {ex.qid}: answer {ans!r} not at offset {start}"
                )

    def __len__(self) -> int:
        return len(self.examples)

    def subset(self, indices: Sequence[int]) -> "TaskDataset":
        return TaskDataset(
            self.task_kind,
            tuple(self.examples[i] for i in indices),
            self.label_space,
        )


# ---------------------------------------------------------------------------
# file loaders


def _ner_label_space(sentences) -> tuple[str, ...]:
    tags = {t for s in sentences for t in s.tags}
    tags.discard("O")
    return ("O", *sorted(tags))


def load_ner_tsv(path) -> TaskDataset:
    """CoNLL-style token<TAB>tag lines; blank lines separate sentences."""
    sentences = []
    words: list[str] = []
    tags: list[str] = []
    lines: list[int] = []

    def flush():
        if words:
            try:
                validate_bio(tags)
            except DatasetError as e:
                at = lines[getattr(e, "position", 0)]
                raise DatasetError(f"{path}:{at}: {e}") from None
            sentences.append(NerSentence(tuple(words), tuple(tags)))
        words.clear()
        tags.clear()
        lines.clear()

    prev_blank = True
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                if prev_blank:
                    logger.warning("%s:%d: empty sentence skipped", path, lineno)
                flush()
                prev_blank = True
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DatasetError(
                    f"{path}:{lineno}: expected token<TAB>tag, got {line!r}"
                )
            words.append(parts[0])
            tags.append(parts[1])
            lines.append(lineno)
            prev_blank = False
    flush()
    if not sentences:
        raise DatasetError(f"{path}: no sentences found")
    return TaskDataset("ner", tuple(sentences), _ner_label_space(sentences))


def load_text_tsv(path, task_kind: str, label_space=None) -> TaskDataset:
    """id<TAB>text<TAB>labels rows; labels comma-separated for multi-label."""
    if task_kind not in ("re", "dc"):
        raise DatasetError(f"load_text_tsv handles re/dc, not {task_kind!r}")
    examples = []
    seen_labels: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(
                    f"{path}:{lineno}: expected id<TAB>text<TAB>labels, "
                    f"got {len(parts)} fields"
                )
            ex_id, text, label_field = parts
            labels = tuple(l for l in label_field.split(",") if l) if label_field else ()
            if task_kind == "re" and len(labels) != 1:
                raise DatasetError(
                    f"{path}:{lineno}: single-label task needs exactly one label"
                )
            seen_labels.update(labels)
            examples.append(SeqExample(ex_id, text, labels))
    if not examples:
        raise DatasetError(f"{path}: no examples found")
    space = tuple(label_space) if label_space is not None else tuple(sorted(seen_labels))
    return TaskDataset(task_kind, tuple(examples), space)


def load_squad_json(path) -> TaskDataset:
    """SQuAD-v1.1-shaped JSON: data -> paragraphs -> qas with answer_start."""
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    try:
        articles = payload["data"]
    except (TypeError, KeyError):
        raise DatasetError(f"{path}: top-level 'data' key missing") from None
    examples = []
    for article in articles:
        for para in article["paragraphs"]:
            context = para["context"]
            for qa in para["qas"]:
                answers = tuple(a["text"] for a in qa["answers"])
                starts = tuple(int(a["answer_start"]) for a in qa["answers"])
                examples.append(
                    QaExample(str(qa["id"]), qa["question"], context, answers, starts)
                )
    if not examples:
        raise DatasetError(f"{path}: no questions found")
    return TaskDataset("qa", tuple(examples), ())


# ---------------------------------------------------------------------------
# preprocessing: NER


@dataclass(frozen=True)
class NerFeature:
    sentence_index: int
    word_offset: int
    input_ids: tuple[int, ...]
    label_ids: tuple[int, ...]  # IGNORE_INDEX on [CLS]/[SEP]/continuations


def preprocess_ner(
    dataset: TaskDataset, vocab: Vocabulary, max_seq_len: int
) -> list[NerFeature]:
    """Subword features; each word's tag sits on its first subword.

    Sentences whose subwords exceed the budget are split at word
    boundaries into several features of the same sentence_index.
    """
    if dataset.task_kind != "ner":
        raise DatasetError(f"expected a ner dataset, got {dataset.task_kind!r}")
    capacity = max_seq_len - 2
    if capacity < 2:
        raise DatasetError(f"max_seq_len {max_seq_len} leaves no room for content")
    tag_id = {t: i for i, t in enumerate(dataset.label_space)}
    features = []
    for si, sent in enumerate(dataset.examples):
        if not sent.words:
            logger.warning("sentence %d is empty, skipped", si)
            continue
        ids: list[int] = []
        labels: list[int] = []
        offset = 0
        next_offset = 0

        def flush():
            nonlocal ids, labels, offset
            if ids:
                features.append(
                    NerFeature(
                        si,
                        offset,
                        (vocab.cls_id, *ids, vocab.sep_id),
                        (IGNORE_INDEX, *labels, IGNORE_INDEX),
                    )
                )
            ids = []
            labels = []
            offset = next_offset

        for word, tag in zip(sent.words, sent.tags):
            sub = [s.token_id for s in tokenize(word, vocab)][:capacity]
            if ids and len(ids) + len(sub) > capacity:
                flush()
            ids.extend(sub)
            labels.extend([tag_id[tag]] + [IGNORE_INDEX] * (len(sub) - 1))
            next_offset += 1
        flush()
    return features


def decode_ner(
    features: Sequence[NerFeature],
    predictions: Sequence[Sequence[int]],
    label_space: Sequence[str],
) -> dict[int, list[str]]:
    """Word-level labels per sentence from per-position predictions.

    Positions carrying a real label id in the feature mark first
    subwords; exactly one output label per word results.
    """
    if len(features) != len(predictions):
        raise DatasetError(
            f"{len(features)} features but {len(predictions)} prediction rows"
        )
    pieces: dict[int, list[tuple[int, list[str]]]] = {}
    for feat, pred in zip(features, predictions):
        words = [
            str(label_space[pred[pos]])
            for pos, lab in enumerate(feat.label_ids)
            if lab != IGNORE_INDEX
        ]
        pieces.setdefault(feat.sentence_index, []).append((feat.word_offset, words))
    out = {}
    for si, parts in pieces.items():
        merged: list[str] = []
        for _, words in sorted(parts):
            merged.extend(words)
        out[si] = merged
    return out


def bio_to_entities(sentence_id, tags: Sequence[str]) -> list[EntityPrediction]:
    """Chunk a tag sequence into typed spans; orphan I- opens a chunk."""
    entities = []
    start = None
    kind = None
    for i, tag in enumerate(tags):
        if tag.startswith("B-") or (tag.startswith("I-") and tag[2:] != kind):
            if start is not None:
                entities.append(EntityPrediction(sentence_id, kind, start, i))
            start, kind = i, tag[2:]
        elif tag == "O":
            if start is not None:
                entities.append(EntityPrediction(sentence_id, kind, start, i))
            start, kind = None, None
    if start is not None:
        entities.append(EntityPrediction(sentence_id, kind, start, len(tags)))
    return entities


# ---------------------------------------------------------------------------
# preprocessing: sequence classification (RE and DC)


def replace_entities(
    text: str, entities: Sequence[tuple[int, int, str]]
) -> str:
    """Swap each (start, end, tag) span for its tag; rest untouched.

    Spans are character offsets, half-open, and may not overlap.
    """
    ordered = sorted(entities)
    out = []
    cursor = 0
    for start, end, tag in ordered:
        if not 0 <= start < end <= len(text):
            raise DatasetError(f"entity span ({start}, {end}) outside the text")
        if start < cursor:
            raise DatasetError(
                f"entity span ({start}, {end}) overlaps the previous span"
            )
        out.append(text[cursor:start])
        out.append(tag)
        cursor = end
    out.append(text[cursor:])
    return "".join(out)


@dataclass(frozen=True)
class SeqFeature:
    example_index: int
    input_ids: tuple[int, ...]
    target: int | tuple[int, ...]  # label id (re) or multi-hot vector (dc)


def preprocess_sequence(
    dataset: TaskDataset, vocab: Vocabulary, max_seq_len: int
) -> list[SeqFeature]:
    """[CLS]-classification features for RE (single) or DC (multi-label)."""
    if dataset.task_kind not in ("re", "dc"):
        raise DatasetError(f"expected re or dc, got {dataset.task_kind!r}")
    label_index = {l: i for i, l in enumerate(dataset.label_space)}
    features = []
    for ei, ex in enumerate(dataset.examples):
        text = replace_entities(ex.text, ex.entities) if ex.entities else ex.text
        ids = tokenize_to_ids(text, vocab)[: max_seq_len - 2]
        if dataset.task_kind == "re":
            target = label_index[ex.labels[0]]
        else:
            hot = [0] * len(dataset.label_space)
            for l in ex.labels:
                hot[label_index[l]] = 1
            target = tuple(hot)
        features.append(
            SeqFeature(ei, (vocab.cls_id, *ids, vocab.sep_id), target)
        )
    return features


# ---------------------------------------------------------------------------
# preprocessing: QA


@dataclass(frozen=True)
class QaFeature:
    example_index: int
    input_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    # byte range into the context per position; None outside the passage
    context_byte_spans: tuple[tuple[int, int] | None, ...]
    start_position: int  # 0 ([CLS]) when this window misses the answer
    end_position: int


def _locate_answer(ranges, byte_start: int, byte_end: int):
    tok_start = tok_end = None
    for i, (lo, hi) in enumerate(ranges):
        if lo <= byte_start < hi:
            tok_start = i
        if lo < byte_end <= hi:
            tok_end = i
    if tok_start is None or tok_end is None or tok_end < tok_start:
        return None
    return tok_start, tok_end


def preprocess_qa(
    dataset: TaskDataset,
    vocab: Vocabulary,
    max_seq_len: int,
    doc_stride: int = 128,
    max_query_tokens: int = 64,
) -> tuple[list[QaFeature], int]:
    """Sliding-window span features; returns (features, dropped_count).

    An example is dropped when its gold answer cannot be recovered from
    the tokenization (for instance, an answer inside an unknown word).
    """
    if dataset.task_kind != "qa":
        raise DatasetError(f"expected a qa dataset, got {dataset.task_kind!r}")
    if doc_stride < 1:
        raise DatasetError(f"doc_stride must be >= 1, got {doc_stride}")
    features = []
    dropped = 0
    for ei, ex in enumerate(dataset.examples):
        q_ids = tokenize_to_ids(ex.question, vocab)[:max_query_tokens]
        spans = tokenize(ex.context, vocab)
        capacity = max_seq_len - len(q_ids) - 3
        if capacity < 1 or not spans:
            dropped += 1
            continue
        context_bytes = ex.context.encode("utf-8")
        answer = ex.answers[0]
        byte_start = len(ex.context[: ex.answer_starts[0]].encode("utf-8"))
        byte_end = byte_start + len(answer.encode("utf-8"))
        ranges = [s.byte_range for s in spans]
        located = _locate_answer(ranges, byte_start, byte_end)
        if located is None:
            dropped += 1
            continue
        tok_start, tok_end = located
        recovered = context_bytes[ranges[tok_start][0] : ranges[tok_end][1]]
        if recovered.decode("utf-8").strip() != answer.strip():
            dropped += 1
            continue
        ctx_ids = [s.token_id for s in spans]
        base = len(q_ids) + 2  # [CLS] question [SEP]
        window = 0
        while True:
            stop = min(window + capacity, len(ctx_ids))
            ids = (
                vocab.cls_id,
                *q_ids,
                vocab.sep_id,
                *ctx_ids[window:stop],
                vocab.sep_id,
            )
            segments = (0,) * base + (1,) * (stop - window + 1)
            byte_spans = (
                (None,) * base
                + tuple(ranges[window:stop])
                + (None,)
            )
            if window <= tok_start and tok_end < stop:
                start_pos = base + tok_start - window
                end_pos = base + tok_end - window
            else:
                start_pos = end_pos = 0
            features.append(
                QaFeature(ei, ids, segments, byte_spans, start_pos, end_pos)
            )
            if stop == len(ctx_ids):
                break
            window += doc_stride
    return features, dropped


def decode_qa(
    dataset: TaskDataset,
    features: Sequence[QaFeature],
    start_logits: Sequence[np.ndarray],
    end_logits: Sequence[np.ndarray],
    n_best: int = 5,
    max_answer_tokens: int = 30,
) -> dict[int, list[str]]:
    """Top-scoring distinct answer strings per example.

    Span score is start_logit + end_logit over in-passage positions;
    candidates are deduplicated by surface string, keeping the best
    score, and returned best-first.
    """
    scored: dict[int, dict[str, float]] = {}
    for feat, s_log, e_log in zip(features, start_logits, end_logits):
        ex = dataset.examples[feat.example_index]
        context_bytes = ex.context.encode("utf-8")
        ctx_positions = [
            i for i, span in enumerate(feat.context_byte_spans) if span is not None
        ]
        pool = scored.setdefault(feat.example_index, {})
        for a, i in enumerate(ctx_positions):
            for j in ctx_positions[a : a + max_answer_tokens]:
                score = float(s_log[i]) + float(e_log[j])
                lo = feat.context_byte_spans[i][0]
                hi = feat.context_byte_spans[j][1]
                text = context_bytes[lo:hi].decode("utf-8").strip()
                if text and (text not in pool or score > pool[text]):
                    pool[text] = score
    return {
        ei: [t for t, _ in sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))][:n_best]
        for ei, pool in scored.items()
    }


# ---------------------------------------------------------------------------
# batching


def _pad_ids(rows: list[tuple[int, ...]], fill: int = 0) -> np.ndarray:
    s = max(len(r) for r in rows)
    out = np.full((len(rows), s), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _length_mask(rows: list[tuple[int, ...]]) -> np.ndarray:
    s = max(len(r) for r in rows)
    mask = np.zeros((len(rows), s), dtype=np.float32)
    for i, r in enumerate(rows):
        mask[i, : len(r)] = 1.0
    return mask


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# task runners


class NerRunner:
    task = "ner"

    def __init__(self, vocab: Vocabulary, max_seq_len: int, dataset: TaskDataset):
        self.vocab = vocab
        self.max_seq_len = max_seq_len
        self.label_space = dataset.label_space

    @property
    def num_labels(self) -> int:
        return len(self.label_space)

    def featurize(self, dataset: TaskDataset):
        return preprocess_ner(dataset, self.vocab, self.max_seq_len)

    def batch_loss(self, model, heads, features, train, rng) -> Tensor:
        ids = _pad_ids([f.input_ids for f in features])
        mask = _length_mask([f.input_ids for f in features])
        labels = _pad_ids([f.label_ids for f in features], fill=IGNORE_INDEX)
        hidden, _ = model.forward(ids, None, mask, train=train, dropout_rng=rng)
        logits = heads.token_classifier.logits(hidden)
        return ag.cross_entropy(logits, labels.reshape(-1))

    def _predict(self, model, heads, features, batch_size=32):
        preds = []
        with no_grad():
            for at in range(0, len(features), batch_size):
                chunk = features[at : at + batch_size]
                ids = _pad_ids([f.input_ids for f in chunk])
                mask = _length_mask([f.input_ids for f in chunk])
                hidden, _ = model.forward(ids, None, mask)
                logits = heads.token_classifier.logits(hidden).data
                rows = logits.argmax(axis=-1).reshape(ids.shape)
                for f, row in zip(chunk, rows):
                    preds.append(row[: len(f.input_ids)].tolist())
        return preds

    def score(self, model, heads, dataset, features, metric) -> float:
        if metric != "entity_f1":
            raise DatasetError(f"metric {metric!r} is not a ner metric")
        decoded = decode_ner(features, self._predict(model, heads, features), self.label_space)
        gold = []
        pred = []
        for si, sent in enumerate(dataset.examples):
            gold.extend(bio_to_entities(si, sent.tags))
            pred.extend(bio_to_entities(si, decoded.get(si, [])))
        return entity_f1(gold, pred).f1


class SequenceRunner:
    """Shared runner for RE (softmax) and DC (multi-label sigmoid)."""

    def __init__(self, task: str, vocab: Vocabulary, max_seq_len: int, dataset: TaskDataset):
        self.task = task
        self.vocab = vocab
        self.max_seq_len = max_seq_len
        self.label_space = dataset.label_space

    @property
    def num_labels(self) -> int:
        return len(self.label_space)

    def featurize(self, dataset: TaskDataset):
        return preprocess_sequence(dataset, self.vocab, self.max_seq_len)

    def batch_loss(self, model, heads, features, train, rng) -> Tensor:
        ids = _pad_ids([f.input_ids for f in features])
        mask = _length_mask([f.input_ids for f in features])
        _, pooled = model.forward(ids, None, mask, train=train, dropout_rng=rng)
        logits = heads.sequence_classifier.logits(pooled)
        if self.task == "re":
            targets = np.array([f.target for f in features], dtype=np.int64)
            return ag.cross_entropy(logits, targets)
        targets = np.array([f.target for f in features], dtype=np.float32)
        return ag.bce_with_logits(logits, targets)

    def _predict(self, model, heads, features, batch_size=32):
        out = []
        with no_grad():
            for at in range(0, len(features), batch_size):
                chunk = features[at : at + batch_size]
                ids = _pad_ids([f.input_ids for f in chunk])
                mask = _length_mask([f.input_ids for f in chunk])
                _, pooled = model.forward(ids, None, mask)
                logits = heads.sequence_classifier.logits(pooled).data
                if self.task == "re":
                    for k in logits.argmax(axis=-1):
                        out.append(self.label_space[int(k)])
                else:
                    for row in logits:
                        out.append({self.label_space[int(k)] for k in np.nonzero(row > 0)[0]})
        return out

    def score(self, model, heads, dataset, features, metric) -> float:
        pred = self._predict(model, heads, features)
        mode = {"micro_f1": "micro", "macro_f1": "macro"}.get(metric)
        if mode is None:
            raise DatasetError(f"metric {metric!r} is not a {self.task} metric")
        if self.task == "re":
            gold = [ex.labels[0] for ex in dataset.examples]
            return micro_macro_f1(gold, pred, self.label_space, mode)
        gold = [set(ex.labels) for ex in dataset.examples]
        return micro_macro_f1(gold, pred, self.label_space, mode, multi_label=True)


class QaRunner:
    task = "qa"

    def __init__(self, vocab: Vocabulary, max_seq_len: int, dataset: TaskDataset,
                 doc_stride: int = 128):
        self.vocab = vocab
        self.max_seq_len = max_seq_len
        self.doc_stride = doc_stride
        self.dropped = 0

    @property
    def num_labels(self) -> int:
        return 0

    def featurize(self, dataset: TaskDataset):
        features, dropped = preprocess_qa(
            dataset, self.vocab, self.max_seq_len, self.doc_stride
        )
        if dropped:
            logger.warning("%d QA examples dropped during preprocessing", dropped)
        self.dropped += dropped
        return features

    def batch_loss(self, model, heads, features, train, rng) -> Tensor:
        ids = _pad_ids([f.input_ids for f in features])
        segs = _pad_ids([f.segment_ids for f in features])
        mask = _length_mask([f.input_ids for f in features])
        hidden, _ = model.forward(ids, segs, mask, train=train, dropout_rng=rng)
        start, end = heads.qa_span.start_end_logits(hidden)
        start_t = np.array([f.start_position for f in features], dtype=np.int64)
        end_t = np.array([f.end_position for f in features], dtype=np.int64)
        both = ag.add(ag.cross_entropy(start, start_t), ag.cross_entropy(end, end_t))
        return ag.scale(both, 0.5)

    def _logits(self, model, heads, features, batch_size=32):
        starts, ends = [], []
        with no_grad():
            for at in range(0, len(features), batch_size):
                chunk = features[at : at + batch_size]
                ids = _pad_ids([f.input_ids for f in chunk])
                segs = _pad_ids([f.segment_ids for f in chunk])
                mask = _length_mask([f.input_ids for f in chunk])
                hidden, _ = model.forward(ids, segs, mask)
                s, e = heads.qa_span.start_end_logits(hidden)
                for f, srow, erow in zip(chunk, s.data, e.data):
                    starts.append(srow[: len(f.input_ids)])
                    ends.append(erow[: len(f.input_ids)])
        return starts, ends

    def ranked_answers(self, model, heads, dataset, features) -> list[RankedAnswerList]:
        starts, ends = self._logits(model, heads, features)
        best = decode_qa(dataset, features, starts, ends)
        items = []
        # examples without features (dropped) stay in the denominator
        for ei, ex in enumerate(dataset.examples):
            items.append(
                RankedAnswerList(tuple(best.get(ei, ())), frozenset(ex.answers))
            )
        return items

    def score(self, model, heads, dataset, features, metric) -> float:
        if metric not in ("mrr", "strict_accuracy", "lenient_accuracy"):
            raise DatasetError(f"metric {metric!r} is not a qa metric")
        scores = bioasq_factoid(self.ranked_answers(model, heads, dataset, features))
        return getattr(scores, metric)


def make_runner(task: str, vocab: Vocabulary, max_seq_len: int, dataset: TaskDataset):
    if task == "ner":
        return NerRunner(vocab, max_seq_len, dataset)
    if task in ("re", "dc"):
        return SequenceRunner(task, vocab, max_seq_len, dataset)
    if task == "qa":
        return QaRunner(vocab, max_seq_len, dataset)
    raise DatasetError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# tuning protocol


@dataclass(frozen=True)
class TuneProtocol:
    batch_sizes: tuple[int, ...] = (8, 16, 32)
    lrs: tuple[float, ...] = (1e-5, 3e-5, 5e-5)
    max_epochs: int = 20
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    selection_metric: str = "auto"  # per-task default
    stop_at: float | None = None  # dev score that ends a cell early
    holdout_fraction: float = 0.1
    holdout_seed: int = 0

    def __post_init__(self):
        if not self.batch_sizes or not self.lrs:
            raise DatasetError("tuning grid must be non-empty")
        if any(b < 1 for b in self.batch_sizes) or any(lr <= 0 for lr in self.lrs):
            raise DatasetError("batch sizes must be >= 1 and learning rates positive")
        if self.max_epochs < 1:
            raise DatasetError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise DatasetError("seeds must be non-empty and distinct")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise DatasetError("holdout_fraction must be in (0, 1)")

    def metric_for(self, task: str) -> str:
        if self.selection_metric != "auto":
            return self.selection_metric
        return DEFAULT_SELECTION_METRIC[task]


def split_off_dev(dataset: TaskDataset, fraction: float, seed: int):
    """Seeded example-level holdout for datasets shipping no dev split."""
    n = len(dataset)
    if n < 2:
        raise DatasetError("cannot hold out a dev split from fewer than 2 examples")
    n_dev = max(1, int(round(n * fraction)))
    if n_dev >= n:
        n_dev = n - 1
    perm = make_rng(seed, "dev-holdout").permutation(n)
    dev_idx = sorted(int(i) for i in perm[:n_dev])
    train_idx = sorted(int(i) for i in perm[n_dev:])
    return dataset.subset(train_idx), dataset.subset(dev_idx)


def _state_arrays(source) -> dict[str, np.ndarray]:
    if isinstance(source, Checkpoint):
        return dict(source.tensors)
    return dict(source)


def init_task_model(
    config: ModelConfig,
    task: str,
    num_labels: int,
    init_state: Mapping[str, np.ndarray] | Checkpoint,
    seed: int,
    dropout_rate: float | None = None,
):
    """Model plus task head, with pretrained tensors copied in bitwise.

    Every backbone parameter must be covered by ``init_state``; head
    parameters start fresh unless the state provides them (staged
    initialization from a previously fine-tuned model).
    """
    if dropout_rate is not None:
        config = replace(config, dropout_rate=dropout_rate)
    model = EncoderModel(config, seed=seed)
    heads = Heads.for_task(model, task, num_labels=max(num_labels, 1), seed=seed)
    params = all_params(model, heads)
    state = _state_arrays(init_state)
    missing = [n for n in model.params if n not in state]
    if missing:
        raise DatasetError(
            f"initialization state misses {len(missing)} backbone tensors "
            f"(first: {missing[0]})"
        )
    for name, arr in state.items():
        if name not in params:
            continue  # pretraining heads, optimizer moments
        if params[name].data.shape != arr.shape:
            raise DatasetError(
                f"tensor {name}: shape {arr.shape} does not fit {params[name].data.shape}"
            )
        params[name].data[...] = arr
    return model, heads


@dataclass
class CellResult:
    batch_size: int
    lr: float
    dev_score: float | None  # None when the cell diverged
    epochs_run: int


@dataclass
class FinetuneResult:
    task: str
    metric: str
    cells: list[CellResult]
    best_batch_size: int
    best_lr: float
    best_dev_score: float
    seed_scores: tuple[float, ...]
    mean_test_score: float
    trained_params: dict[str, np.ndarray]
    dropped_examples: int = 0


def _train_cell(
    config: ModelConfig,
    runner,
    init_state,
    train_features,
    dev_dataset,
    dev_features,
    batch_size: int,
    lr: float,
    protocol: TuneProtocol,
    metric: str,
    seed: int,
    dropout_rate: float | None,
):
    """Train up to max_epochs; returns (best_dev, best_params, epochs)."""
    model, heads = init_task_model(
        config, runner.task, runner.num_labels, init_state, seed, dropout_rate
    )
    params = all_params(model, heads)
    optimizer = AdamW(params, AdamConfig(lr=lr), no_decay=no_decay_names(params))
    best_score = -1.0
    best_state: dict[str, np.ndarray] = {}
    epochs_run = 0
    for epoch in range(protocol.max_epochs):
        order_rng = make_rng(seed, "order", epoch)
        for bi, batch_idx in enumerate(_epoch_batches(len(train_features), batch_size, order_rng)):
            batch = [train_features[int(i)] for i in batch_idx]
            optimizer.zero_grad()
            loss = runner.batch_loss(
                model, heads, batch, True, make_rng(seed, "dropout", epoch, bi)
            )
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
        epochs_run = epoch + 1
        dev_score = runner.score(model, heads, dev_dataset, dev_features, metric)
        if dev_score > best_score:
            best_score = dev_score
            best_state = {n: p.data.copy() for n, p in params.items()}
        if protocol.stop_at is not None and best_score >= protocol.stop_at:
            break
    return best_score, best_state, epochs_run


def finetune_task(
    checkpoint: Checkpoint,
    train: TaskDataset,
    dev: TaskDataset | None,
    test: TaskDataset,
    vocab: Vocabulary,
    protocol: TuneProtocol | None = None,
    max_seq_len: int | None = None,
    stage_checkpoint: Checkpoint | Mapping[str, np.ndarray] | None = None,
    dropout_rate: float | None = None,
) -> FinetuneResult:
    """Grid-search, then seed-average the winning cell on the test split.

    ``stage_checkpoint``, when given, replaces ``checkpoint`` as the
    initialization (staged fine-tuning; its tensors are copied bitwise,
    task head included when present).
    """
    protocol = protocol or TuneProtocol()
    task = train.task_kind
    if test.task_kind != task or (dev is not None and dev.task_kind != task):
        raise DatasetError("train/dev/test task kinds differ")
    if len(train) == 0 or len(test) == 0 or (dev is not None and len(dev) == 0):
        raise DatasetError("empty dataset split")
    for name, split in (("dev", dev), ("test", test)):
        if split is not None and split.label_space != train.label_space:
            raise DatasetError(f"{name} label space differs from train")
    metric = protocol.metric_for(task)
    if max_seq_len is None:
        max_seq_len = DEFAULT_MAX_SEQ_LEN[task]
    if dev is None:
        train, dev = split_off_dev(train, protocol.holdout_fraction, protocol.holdout_seed)
        logger.info("held out %d of %d examples for dev selection",
                    len(dev), len(train) + len(dev))

    runner = make_runner(task, vocab, max_seq_len, train)
    train_features = runner.featurize(train)
    dev_features = runner.featurize(dev)
    test_features = runner.featurize(test)
    if not train_features or not dev_features or not test_features:
        raise DatasetError("a split produced no usable features")

    init_state = _state_arrays(stage_checkpoint if stage_checkpoint is not None else checkpoint)
    config = checkpoint.config

    cells = []
    tuning_seed = protocol.seeds[0]
    for batch_size in protocol.batch_sizes:
        for lr in protocol.lrs:
            try:
                dev_score, _, epochs = _train_cell(
                    config, runner, init_state, train_features, dev, dev_features,
                    batch_size, lr, protocol, metric, tuning_seed, dropout_rate,
                )
                cells.append(CellResult(batch_size, lr, dev_score, epochs))
            except DivergenceError as e:
                logger.warning(
                    "cell (batch=%d, lr=%g) diverged and is excluded: %s",
                    batch_size, lr, e,
                )
                cells.append(CellResult(batch_size, lr, None, 0))
    viable = [c for c in cells if c.dev_score is not None]
    if not viable:
        raise DivergenceError("every tuning cell diverged")
    best = max(viable, key=lambda c: c.dev_score)

    seed_scores = []
    best_seed_state: dict[str, np.ndarray] = {}
    best_seed_score = -1.0
    for seed in protocol.seeds:
        _, state, _ = _train_cell(
            config, runner, init_state, train_features, dev, dev_features,
            best.batch_size, best.lr, protocol, metric, seed, dropout_rate,
        )
        model, heads = init_task_model(
            config, task, runner.num_labels, state, seed, dropout_rate
        )
        test_score = runner.score(model, heads, test, test_features, metric)
        seed_scores.append(test_score)
        if test_score > best_seed_score:
            best_seed_score = test_score
            best_seed_state = state

    return FinetuneResult(
        task=task,
        metric=metric,
        cells=cells,
        best_batch_size=best.batch_size,
        best_lr=best.lr,
        best_dev_score=best.dev_score,
        seed_scores=tuple(seed_scores),
        mean_test_score=sum(seed_scores) / len(seed_scores),
        trained_params=best_seed_state,
        dropped_examples=getattr(runner, "dropped", 0),
    )
