"""Normalization, vocabulary, encoding, and dataset persistence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from querycat.errors import FormatVersionMismatch, InvalidArgument
from querycat.textprep import (
    PAD_ID,
    PAD_TOKEN,
    UNK_ID,
    UNK_TOKEN,
    Dataset,
    Vocabulary,
    build_vocab,
    encode,
    encode_dataset,
    load_dataset,
    normalize,
    persist_dataset,
    split,
)


def eq1_vocab():
    """Vocabulary with the hand-pinned ids used by the encoding example."""
    id_to_word = [PAD_TOKEN, UNK_TOKEN] + [f"w{i}" for i in range(2, 1644)]
    id_to_word[1235] = "giving"
    id_to_word[1643] = "away"
    id_to_word[1245] = "free"
    return Vocabulary(
        word_to_id={w: i for i, w in enumerate(id_to_word)},
        id_to_word=id_to_word,
        max_size=1644,
    )


class TestNormalize:
    def test_lowercases_and_collapses(self):
        assert normalize("  Giving   AWAY\tfree ") == "giving away free"

    def test_punctuation_becomes_space(self):
        assert normalize("b&q!") == "b q"
        assert normalize("2007-civic, low/miles") == "2007 civic low miles"

    def test_unicode_punctuation(self):
        assert normalize("cars—cheap “deal”") == "cars cheap deal"

    def test_can_become_empty(self):
        assert normalize("!!! ... ---") == ""
        assert normalize("") == ""

    @given(st.text(max_size=60))
    def test_idempotent(self, raw):
        once = normalize(raw)
        assert normalize(once) == once

    @given(st.text(max_size=60))
    def test_output_alphabet(self, raw):
        out = normalize(raw)
        assert out == out.lower()
        assert "  " not in out
        assert out == out.strip()


class TestBuildVocab:
    def test_frequency_ranking_with_tie_break(self):
        corpus = ["sofa sofa table", "table sofa", "chair"]
        vocab = build_vocab(corpus, max_size=10)
        # sofa:3 table:2 chair:1
        assert vocab.id_for("sofa") == 2
        assert vocab.id_for("table") == 3
        assert vocab.id_for("chair") == 4

    def test_lexicographic_on_equal_counts(self):
        vocab = build_vocab(["zebra apple"], max_size=10)
        assert vocab.id_for("apple") == 2
        assert vocab.id_for("zebra") == 3

    def test_max_size_caps_rows(self):
        corpus = [" ".join(f"t{i}" for i in range(50))]
        vocab = build_vocab(corpus, max_size=10)
        assert vocab.num_rows == 10
        assert len(vocab.id_to_word) == 10

    def test_specials_present(self):
        vocab = build_vocab(["hello"], max_size=5)
        assert vocab.id_to_word[PAD_ID] == PAD_TOKEN
        assert vocab.id_to_word[UNK_ID] == UNK_TOKEN

    def test_rejects_tiny_max_size(self):
        with pytest.raises(InvalidArgument):
            build_vocab(["hello"], max_size=2)

    @given(st.lists(st.text(alphabet="abc ", max_size=12), max_size=20),
           st.integers(min_value=3, max_value=40))
    def test_ids_contiguous(self, corpus, max_size):
        corpus = [normalize(c) for c in corpus]
        vocab = build_vocab(corpus, max_size=max_size)
        assert vocab.id_to_word[:2] == [PAD_TOKEN, UNK_TOKEN]
        assert sorted(vocab.word_to_id.values()) == list(range(vocab.num_rows))


class TestEncode:
    def test_worked_example(self):
        # "giving away free free" at seq_len 9, with repeated words sharing an id
        out = encode("giving away free free", eq1_vocab(), seq_len=9)
        np.testing.assert_array_equal(out, [1235, 1643, 1245, 1245, 0, 0, 0, 0, 0])

    def test_unknown_words_map_to_unk(self):
        vocab = build_vocab(["known words"], max_size=10)
        out = encode("known mystery", vocab, seq_len=4)
        assert out[0] == vocab.id_for("known")
        assert out[1] == UNK_ID

    def test_truncates_to_seq_len(self):
        vocab = build_vocab(["a b c d e"], max_size=10)
        out = encode("a b c d e", vocab, seq_len=3)
        assert out.shape == (3,)
        assert list(out) == [vocab.id_for("a"), vocab.id_for("b"), vocab.id_for("c")]

    def test_rejects_bad_seq_len(self):
        with pytest.raises(InvalidArgument):
            encode("a", build_vocab(["a"], max_size=3), seq_len=0)

    @given(st.text(alphabet="ab c", max_size=40), st.integers(min_value=1, max_value=12))
    def test_length_always_seq_len(self, raw, seq_len):
        vocab = build_vocab(["a b"], max_size=5)
        out = encode(normalize(raw), vocab, seq_len)
        assert out.shape == (seq_len,)
        assert out.dtype == np.int64


class TestDataset:
    def test_validation(self):
        with pytest.raises(InvalidArgument):
            Dataset(ids=np.zeros((2, 3), dtype=np.int64),
                    labels=np.zeros(3, dtype=np.int64),
                    class_ids=[1, 2], seq_len=3)
        with pytest.raises(InvalidArgument):
            Dataset(ids=np.zeros((2, 3), dtype=np.int64),
                    labels=np.array([0, 5]),
                    class_ids=[1, 2], seq_len=3)

    def test_encode_dataset_infers_sorted_class_ids(self):
        vocab = build_vocab(["a b"], max_size=6)
        ds = encode_dataset([("a", 27), ("b", 1), ("a b", 27)], vocab, seq_len=4)
        assert ds.class_ids == [1, 27]
        np.testing.assert_array_equal(ds.labels, [1, 0, 1])

    def test_encode_dataset_rejects_foreign_category(self):
        vocab = build_vocab(["a"], max_size=4)
        with pytest.raises(InvalidArgument):
            encode_dataset([("a", 9)], vocab, seq_len=2, class_ids=[1, 2])


class TestSplit:
    def make(self, n):
        return Dataset(
            ids=np.arange(n * 2, dtype=np.int64).reshape(n, 2) % 7,
            labels=np.zeros(n, dtype=np.int64),
            class_ids=[1, 2],
            seq_len=2,
        )

    def test_half_split_sizes_round_up(self):
        tr, te = split(self.make(11), 0.5, seed=0)
        assert (len(tr), len(te)) == (6, 5)

    def test_deterministic(self):
        a1, b1 = split(self.make(40), 0.7, seed=9)
        a2, b2 = split(self.make(40), 0.7, seed=9)
        np.testing.assert_array_equal(a1.ids, a2.ids)
        np.testing.assert_array_equal(b1.labels, b2.labels)

    @given(st.integers(min_value=2, max_value=200),
           st.floats(min_value=0.05, max_value=0.95))
    @settings(max_examples=40)
    def test_partition_disjoint_exhaustive(self, n, ratio):
        ds = Dataset(
            ids=np.arange(n, dtype=np.int64).reshape(n, 1),
            labels=np.zeros(n, dtype=np.int64),
            class_ids=[1, 2],
            seq_len=1,
        )
        tr, te = split(ds, ratio, seed=3)
        assert len(tr) == int(np.ceil(n * ratio))
        assert len(tr) + len(te) == n
        seen = sorted(tr.ids[:, 0].tolist() + te.ids[:, 0].tolist())
        assert seen == list(range(n))

    def test_rejects_degenerate_ratio(self):
        with pytest.raises(InvalidArgument):
            split(self.make(4), 1.0, seed=0)


class TestVocabularyPersistence:
    def test_round_trip(self, tmp_path):
        vocab = build_vocab(["sofa table sofa", "chair"], max_size=10)
        path = tmp_path / "v.tsv"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.word_to_id == vocab.word_to_id
        assert loaded.id_to_word == vocab.id_to_word
        assert loaded.content_hash() == vocab.content_hash()

    def test_tsv_format(self):
        vocab = build_vocab(["b a a"], max_size=4)
        lines = vocab.to_tsv().splitlines()
        assert lines[0] == f"{PAD_TOKEN}\t0"
        assert lines[1] == f"{UNK_TOKEN}\t1"
        assert lines[2] == "a\t2"

    def test_hash_changes_with_content(self):
        v1 = build_vocab(["aa"], max_size=4)
        v2 = build_vocab(["bb"], max_size=4)
        assert v1.content_hash() != v2.content_hash()

    def test_load_rejects_gap_in_ids(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text(f"{PAD_TOKEN}\t0\n{UNK_TOKEN}\t1\nword\t5\n")
        with pytest.raises(FormatVersionMismatch):
            Vocabulary.load(path)

    def test_load_rejects_missing_specials(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("word\t0\nother\t1\n")
        with pytest.raises(FormatVersionMismatch):
            Vocabulary.load(path)

    def test_load_rejects_malformed_row(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text(f"{PAD_TOKEN}\t0\n{UNK_TOKEN}\t1\nnoid\n")
        with pytest.raises(FormatVersionMismatch):
            Vocabulary.load(path)


class TestDatasetPersistence:
    def make(self):
        vocab = build_vocab(["sofa table", "free sofa"], max_size=8)
        return encode_dataset(
            [("sofa table", 10), ("free sofa", 1), ("table", 10)], vocab, seq_len=4
        )

    def test_round_trip_exact(self, tmp_path):
        ds = self.make()
        path = tmp_path / "d.tsv"
        persist_dataset(ds, path)
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.ids, ds.ids)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        assert loaded.class_ids == ds.class_ids
        assert loaded.seq_len == ds.seq_len

    def test_header_format(self, tmp_path):
        ds = self.make()
        path = tmp_path / "d.tsv"
        persist_dataset(ds, path)
        first = path.read_text().splitlines()[0]
        assert first == "seq_len=4 classes=1,10"

    @pytest.mark.parametrize("content", [
        "bogus header\n0\t1 2\n",
        "seq_len=3 classes=1,10\n9\t1 2 3\n",          # label out of range
        "seq_len=3 classes=1,10\n0\t1 2\n",            # wrong id count
        "seq_len=3 classes=1,10\n0\t1 2 -4\n",         # negative id
        "seq_len=x classes=1,10\n",
    ])
    def test_load_rejects_malformed(self, tmp_path, content):
        path = tmp_path / "bad.tsv"
        path.write_text(content)
        with pytest.raises(FormatVersionMismatch):
            load_dataset(path)
