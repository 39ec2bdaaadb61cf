import numpy as np
import pytest

from masklab.data import (
    BOS_ID,
    CLASS_KEYWORDS,
    EOS_ID,
    NUM_SPECIAL,
    PAD_ID,
    CorpusError,
    Vocabulary,
    build_vocab,
    decode_ids,
    encode_corpus,
    synth_corpus,
    unigram_perplexity,
)


class TestVocabulary:
    def test_tiny_corpus(self):
        vocab = build_vocab(["a a b"])
        assert vocab.tokens[NUM_SPECIAL:] == ["a", "b"]
        assert vocab.frequencies == {"a": 2, "b": 1}
        assert vocab.id_of("a") == NUM_SPECIAL

    def test_min_count_drops_rare(self):
        vocab = build_vocab(["a a b"], min_count=2)
        assert vocab.tokens[NUM_SPECIAL:] == ["a"]
        assert vocab.id_of("b") == 3  # <unk>

    def test_frequency_sort_with_lexicographic_ties(self):
        vocab = build_vocab(["z y z y x"])
        assert vocab.tokens[NUM_SPECIAL:] == ["y", "z", "x"]

    def test_max_size_caps_total(self):
        vocab = build_vocab(["a b c d e f"], max_size=NUM_SPECIAL + 3)
        assert len(vocab) == NUM_SPECIAL + 3

    def test_empty_corpus_rejected(self):
        with pytest.raises(CorpusError, match="empty"):
            build_vocab([" "])

    def test_save_load_round_trip(self, tmp_path):
        vocab = build_vocab(["the cat sat on the mat"])
        vocab.save(tmp_path / "vocab.txt")
        loaded = Vocabulary.load(tmp_path / "vocab.txt")
        assert loaded.tokens == vocab.tokens
        assert loaded.frequencies == vocab.frequencies
        assert all(loaded.id_of(t) == vocab.id_of(t) for t in vocab.tokens)


class TestEncodeCorpus:
    def test_short_document_padding(self):
        vocab = build_vocab(["x y z"])
        ds = encode_corpus(["x y z"], vocab, n=8)
        assert ds.ids.shape == (1, 8)
        row = ds.ids[0]
        assert row[0] == BOS_ID and row[4] == EOS_ID
        np.testing.assert_array_equal(row[5:], [PAD_ID] * 3)

    def test_every_sequence_begins_with_bos(self):
        vocab = build_vocab(["a b c d e f g h i j k"])
        ds = encode_corpus(["a b c d e f g h i j k"], vocab, n=6)
        assert (ds.ids[:, 0] == BOS_ID).all()

    def test_decode_round_trip(self):
        vocab = build_vocab(["hello little world"])
        ds = encode_corpus(["hello little world"], vocab, n=8)
        assert decode_ids(ds.ids[0], vocab) == ["hello", "little", "world"]

    def test_payload_count_preserved_across_chunking(self):
        doc = " ".join(f"t{i}" for i in range(57))
        vocab = build_vocab([doc])
        ds = encode_corpus([doc], vocab, n=10)
        payload_tokens = (ds.ids >= NUM_SPECIAL).sum()
        assert payload_tokens == 57
        assert len(ds) == int(np.ceil(57 / 8))

    def test_no_cross_document_packing(self):
        vocab = build_vocab(["a b", "c d"])
        ds = encode_corpus(["a b", "c d"], vocab, n=16)
        assert len(ds) == 2  # one short row per document, never merged

    def test_eligibility_grouping(self):
        vocab = build_vocab(["a b c", "d e", "f g"])
        ds = encode_corpus(["a b c", "d e", "f g"], vocab, n=8)
        groups = ds.rows_by_eligibility()
        assert sorted(groups) == [2, 3]
        assert len(groups[2]) == 2 and len(groups[3]) == 1


class TestSynthCorpus:
    def test_same_seed_identical_bytes(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        synth_corpus("trigram_grammar", 50, seed=7, out_dir=a)
        synth_corpus("trigram_grammar", 50, seed=7, out_dir=b)
        assert (a / "corpus.txt").read_bytes() == (b / "corpus.txt").read_bytes()

    def test_different_seed_differs(self):
        assert synth_corpus("trigram_grammar", 20, seed=1) != synth_corpus("trigram_grammar", 20, seed=2)

    def test_classification_labels_balanced(self):
        _, labels = synth_corpus("separable_classification", 101, seed=3)
        counts = np.bincount(labels)
        assert abs(int(counts[0]) - int(counts[1])) <= 1

    def test_keyword_count_oracle_is_perfect(self):
        lines, labels = synth_corpus("separable_classification", 200, seed=4)
        hits = []
        for line in lines:
            tokens = set(line.split())
            score_b = len(tokens & set(CLASS_KEYWORDS[1]))
            score_a = len(tokens & set(CLASS_KEYWORDS[0]))
            hits.append(1 if score_b > score_a else 0)
        assert hits == labels

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            synth_corpus("sonnets", 5, seed=0)

    def test_trigram_structure_beats_unigram(self):
        # successor entropy is ~1.16 bits; unigram over ~200 symbols is far higher
        lines = synth_corpus("trigram_grammar", 400, seed=5)
        vocab = build_vocab(lines)
        ds = encode_corpus(lines, vocab, n=64)
        assert unigram_perplexity(ds) > 30.0
