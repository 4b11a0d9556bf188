"""WordPiece trainer and tokenizer tests.

The trainer is checked against a deliberately naive reference
implementation that recomputes all statistics from scratch each iteration
and scores pairs with exact fractions.
"""

from __future__ import annotations

from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bertforge.wordpiece import (
    CONTINUATION_PREFIX,
    MAX_WORD_CHARS,
    SPECIAL_TOKENS,
    TokenSpan,
    Vocabulary,
    VocabularyError,
    count_unk_spans,
    detokenize,
    ids_to_text,
    pre_split,
    tokenize,
    tokenize_to_ids,
    train_vocabulary,
)


def naive_train(corpus, target_size, min_frequency):
    """From-scratch reference trainer: full recount every iteration.

    Returns the token list. Quadratic and slow; only for small corpora.
    """
    word_counts = Counter()
    for doc in corpus:
        for word, _, _ in pre_split(doc):
            word_counts[word] += 1

    char_totals = Counter()
    internal = set()
    for word, count in word_counts.items():
        for i, ch in enumerate(word):
            char_totals[ch] += count
            if i > 0:
                internal.add(ch)
    alphabet = []
    kept = set()
    for ch, total in char_totals.items():
        if total >= min_frequency:
            kept.add(ch)
            alphabet.append(ch)
            if ch in internal:
                alphabet.append(CONTINUATION_PREFIX + ch)
    alphabet.sort()

    words = {
        word: (
            [ch if i == 0 else CONTINUATION_PREFIX + ch for i, ch in enumerate(word)],
            count,
        )
        for word, count in word_counts.items()
        if all(ch in kept for ch in word)
    }
    tokens = list(SPECIAL_TOKENS) + alphabet
    seen = set(tokens)
    while len(tokens) < target_size:
        sym_freq = Counter()
        pair_freq = Counter()
        for syms, count in words.values():
            for s in syms:
                sym_freq[s] += count
            for a, b in zip(syms, syms[1:]):
                pair_freq[(a, b)] += count
        candidates = [
            (Fraction(freq, sym_freq[p[0]] * sym_freq[p[1]]), p)
            for p, freq in pair_freq.items()
            if freq >= min_frequency
        ]
        if not candidates:
            break
        best_score = max(score for score, _ in candidates)
        pair = min(p for score, p in candidates if score == best_score)
        merged = pair[0] + pair[1].removeprefix(CONTINUATION_PREFIX)
        for word, (syms, count) in words.items():
            out = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[word] = (out, count)
        if merged not in seen:
            tokens.append(merged)
            seen.add(merged)
    return tokens


class TestTrainer:
    """Merge selection: likelihood score with lexicographic tie-break."""

    def test_toy_corpus_single_merge(self):
        # Tie at score 1/5 between ("a","##a") and ("##a","##b");
        # the lexicographically smaller pair wins.
        vocab = train_vocabulary(["aaab aaab aab"], target_size=10, min_frequency=2)
        assert vocab.tokens == (
            "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
            "##a", "##b", "a", "b", "##ab",
        )

    def test_single_char_corpus(self):
        vocab = train_vocabulary(["x"], target_size=6, min_frequency=1)
        assert vocab.tokens == ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "x")

    def test_matches_naive_reference(self):
        corpus = [
            "the cat sat on the mat",
            "the bat and the cat chat",
            "that mat is flat, that hat is tan",
            "catnap on the flat mat",
        ]
        for target in (24, 30, 40, 60):
            got = train_vocabulary(corpus, target_size=target, min_frequency=2)
            assert list(got.tokens) == naive_train(corpus, target, 2)

    def test_matches_naive_reference_min_freq_one(self):
        corpus = ["abracadabra alakazam", "abra kadabra", "banana bandana"]
        got = train_vocabulary(corpus, target_size=30, min_frequency=1)
        assert list(got.tokens) == naive_train(corpus, 30, 1)

    def test_stops_early_when_corpus_exhausted(self, caplog):
        # 3 distinct chars, min_freq 1: merges run out well before 10_000.
        with caplog.at_level("WARNING"):
            vocab = train_vocabulary(["abc abc"], target_size=10_000, min_frequency=1)
        assert len(vocab) < 10_000
        assert any("cannot support" in r.message for r in caplog.records)

    def test_case_is_preserved(self):
        vocab = train_vocabulary(["Cat cat Cat cat"], target_size=20, min_frequency=1)
        assert "C" in vocab and "c" in vocab
        assert tokenize_to_ids("Cat", vocab) != tokenize_to_ids("cat", vocab)

    def test_rare_chars_dropped(self):
        # "z" appears once; with min_frequency=2 it cannot enter the alphabet.
        vocab = train_vocabulary(["aa aa za"], target_size=50, min_frequency=2)
        assert "z" not in vocab
        spans = tokenize("za", vocab)
        assert [s.token_id for s in spans] == [vocab.unk_id]

    def test_deterministic_across_runs(self):
        corpus = ["protein kinase binds the receptor", "kinase inhibitors bind proteins"]
        a = train_vocabulary(corpus, target_size=40, min_frequency=1)
        b = train_vocabulary(corpus, target_size=40, min_frequency=1)
        assert a.tokens == b.tokens
        assert a.content_hash() == b.content_hash()

    def test_empty_corpus_rejected(self):
        with pytest.raises(VocabularyError, match="empty corpus"):
            train_vocabulary([], target_size=10)
        with pytest.raises(VocabularyError, match="empty corpus"):
            train_vocabulary(["   \n\t "], target_size=10)

    def test_target_below_feasible_names_minimum(self):
        # alphabet for "ab ab" is {a, b, ##b}: minimum feasible 5 + 3 = 8.
        with pytest.raises(VocabularyError, match="minimum feasible size 8"):
            train_vocabulary(["ab ab"], target_size=7, min_frequency=1)

    def test_invalid_knobs_rejected(self):
        with pytest.raises(VocabularyError):
            train_vocabulary(["ab"], target_size=0)
        with pytest.raises(VocabularyError):
            train_vocabulary(["ab"], target_size=10, min_frequency=0)


class TestCoverageMonotonicity:
    """Growing the vocabulary along one training trajectory never
    increases the number of [UNK] spans on any text."""

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_unk_count_non_increasing(self, seed):
        import numpy as np

        rng = np.random.default_rng(seed)
        letters = "abcdef"
        corpus = [
            " ".join(
                "".join(rng.choice(list(letters), size=rng.integers(1, 7)))
                for _ in range(rng.integers(3, 10))
            )
            for _ in range(5)
        ]
        sizes = [20, 28, 36]
        vocabs = [train_vocabulary(corpus, s, min_frequency=2) for s in sizes]
        counts = [count_unk_spans(corpus, v) for v in vocabs]
        assert counts[0] >= counts[1] >= counts[2]


class TestTokenizer:
    """Greedy longest-match segmentation and its inverse."""

    @pytest.fixture
    def affix_vocab(self):
        return Vocabulary(
            list(SPECIAL_TOKENS)
            + ["un", "##aff", "##able", "##ff", "##a", "a", "b", "##le", "runn", "##ing"]
        )

    def test_greedy_longest_match(self, affix_vocab):
        spans = tokenize("unaffable", affix_vocab)
        tokens = [affix_vocab.token_of(s.token_id) for s in spans]
        assert tokens == ["un", "##aff", "##able"]
        assert all(s.word_index == 0 for s in spans)
        assert [s.byte_range for s in spans] == [(0, 2), (2, 5), (5, 9)]

    def test_unmatchable_remainder_unks_whole_word(self, affix_vocab):
        # "unz": "un" matches but "##z" has no cover, so the whole
        # word collapses to one [UNK] span.
        spans = tokenize("unz running", affix_vocab)
        assert spans[0].token_id == affix_vocab.unk_id
        assert spans[0].byte_range == (0, 3)
        assert [affix_vocab.token_of(s.token_id) for s in spans[1:]] == ["runn", "##ing"]

    def test_overlong_word_is_unk(self, affix_vocab):
        word = "a" * (MAX_WORD_CHARS + 1)
        spans = tokenize(word, affix_vocab)
        assert [s.token_id for s in spans] == [affix_vocab.unk_id]

    def test_empty_text(self, affix_vocab):
        assert tokenize("", affix_vocab) == []
        assert detokenize([], affix_vocab) == ""

    def test_punctuation_isolated(self):
        vocab = train_vocabulary(["x-linked, yes (x)"], target_size=30, min_frequency=1)
        words = [w for w, _, _ in pre_split("x-linked, yes (x)")]
        assert words == ["x", "-", "linked", ",", "yes", "(", "x", ")"]
        assert detokenize(tokenize("x-linked, yes (x)", vocab), vocab) == "x-linked, yes (x)"

    def test_byte_offsets_multibyte(self):
        # "µ" is 2 bytes in UTF-8; offsets are byte-accurate.
        vocab = Vocabulary(list(SPECIAL_TOKENS) + ["µ", "##g", "per"])
        spans = tokenize("µg per", vocab)
        assert [s.byte_range for s in spans] == [(0, 2), (2, 3), (4, 7)]

    def test_word_index_groups_subwords(self, affix_vocab):
        spans = tokenize("unaffable running b", affix_vocab)
        assert [s.word_index for s in spans] == [0, 0, 0, 1, 1, 2]

    def test_ids_to_text_glues_continuations(self, affix_vocab):
        ids = tokenize_to_ids("unaffable b", affix_vocab)
        assert ids_to_text(ids, affix_vocab) == "unaffable b"


class TestRoundTrip:
    """detokenize(tokenize(s)) == s up to whitespace normalization."""

    @given(
        st.lists(
            st.text(alphabet="abcdeXY.,-", min_size=1, max_size=8).filter(
                lambda w: any(not c in ".,-" for c in w) or len(w) == 1
            ),
            min_size=1,
            max_size=12,
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, words):
        text = " ".join(words)
        vocab = train_vocabulary([text], target_size=200, min_frequency=1)
        assert count_unk_spans([text], vocab) == 0
        assert detokenize(tokenize(text, vocab), vocab) == " ".join(text.split())

    def test_whitespace_normalized(self):
        vocab = train_vocabulary(["a  b\tc"], target_size=20, min_frequency=1)
        assert detokenize(tokenize("a  b\tc", vocab), vocab) == "a b c"


class TestVocabulary:
    """Structural invariants and file round-trip."""

    def test_specials_pinned(self):
        vocab = Vocabulary(list(SPECIAL_TOKENS) + ["a"])
        assert vocab.pad_id == 0
        assert (vocab.unk_id, vocab.cls_id, vocab.sep_id, vocab.mask_id) == (1, 2, 3, 4)
        assert vocab.special_ids == {0, 1, 2, 3, 4}

    def test_duplicate_rejected(self):
        with pytest.raises(VocabularyError, match="duplicate"):
            Vocabulary(list(SPECIAL_TOKENS) + ["a", "a"])

    def test_missing_special_rejected(self):
        with pytest.raises(VocabularyError, match=r"\[MASK\]"):
            Vocabulary(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a"])

    def test_pad_not_first_rejected(self):
        with pytest.raises(VocabularyError, match=r"\[PAD\] must have id 0"):
            Vocabulary(["[UNK]", "[PAD]", "[CLS]", "[SEP]", "[MASK]"])

    def test_whitespace_token_rejected(self):
        with pytest.raises(VocabularyError, match="whitespace"):
            Vocabulary(list(SPECIAL_TOKENS) + ["a b"])

    def test_lookup_errors(self):
        vocab = Vocabulary(list(SPECIAL_TOKENS) + ["a"])
        with pytest.raises(VocabularyError, match="not in vocabulary"):
            vocab.id_of("zzz")
        with pytest.raises(VocabularyError, match="out of range"):
            vocab.token_of(99)
        with pytest.raises(VocabularyError, match="out of range"):
            vocab.token_of(-1)

    def test_save_load_round_trip(self, tmp_path):
        vocab = train_vocabulary(["the cat sat on the mat"], target_size=25, min_frequency=1)
        path = str(tmp_path / "vocab.txt")
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded == vocab
        assert loaded.content_hash() == vocab.content_hash()
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines == list(vocab.tokens)

    def test_is_continuation(self):
        vocab = Vocabulary(list(SPECIAL_TOKENS) + ["a", "##a"])
        assert not vocab.is_continuation(vocab.id_of("a"))
        assert vocab.is_continuation(vocab.id_of("##a"))

    def test_token_span_is_frozen(self):
        span = TokenSpan(7, 0, (0, 1))
        with pytest.raises(AttributeError):
            span.token_id = 8
