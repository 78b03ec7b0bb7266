import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routedlm.tokenizer import (BOS, EOS, PAD, Vocabulary, build_vocab,
                                format_number, parse_number, quantize, tokenize)


class TestFormatNumber:
    def test_pads_to_four_decimals(self):
        assert format_number(0.95) == "0.9500"

    def test_linear_task_value(self):
        assert format_number(-6.0 + 10.0) == "4.0000"

    def test_round_half_even_boundary(self):
        assert format_number(0.97365) == "0.9736"

    def test_negative(self):
        assert format_number(-6.0) == "-6.0000"

    def test_non_finite_rejected(self):
        for bad in (float("nan"), float("inf"), float("-inf")):
            with pytest.raises(ValueError):
                format_number(bad)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            format_number(1e6)

    @given(st.floats(-999999, 999999))
    @settings(max_examples=200, deadline=None)
    def test_quantization_bound(self, x):
        assert abs(parse_number(format_number(x)) - x) <= 5e-5

    @given(st.floats(-999999, 999999))
    @settings(max_examples=200, deadline=None)
    def test_format_parse_fixpoint(self, x):
        s = format_number(x)
        assert format_number(parse_number(s)) == s

    def test_quantize_is_idempotent(self):
        for x in (0.123456, -41.99995, 249.00004):
            assert quantize(quantize(x)) == quantize(x)


WORDS = st.lists(st.sampled_from(["alpha", "beta,", "is", "the", "cost."]),
                 min_size=1, max_size=6)
NUMS = st.lists(st.floats(-500, 500), min_size=0, max_size=3)


class TestTokenize:
    def test_number_splits_to_characters(self):
        assert tokenize("0.95") == ["0", ".", "9", "5"]

    def test_mixed_sentence(self):
        toks = tokenize("The health is 0.9500, ok.")
        assert "".join(toks) == "The health is 0.9500, ok."
        assert "0" in toks and " is" in toks and " " in toks

    @given(WORDS, NUMS)
    @settings(max_examples=100, deadline=None)
    def test_roundtrip_concatenation(self, words, nums):
        text = " ".join(words + [format_number(n) for n in nums])
        assert "".join(tokenize(text)) == text


class TestVocabulary:
    def test_special_ids_fixed(self):
        v = build_vocab(["a b a"])
        assert (BOS, EOS, PAD) == (0, 1, 2)
        assert v.token_string(0) == "<bos>"

    def test_word_tokens_registered(self):
        v = build_vocab(["a b a"])
        assert "a" in v and " b" in v and " a" in v

    def test_deterministic_build(self, tmp_path):
        v1 = build_vocab(["x y z 1.0000"])
        v2 = build_vocab(["x y z 1.0000"])
        p1, p2 = tmp_path / "v1.json", tmp_path / "v2.json"
        v1.save(p1)
        v2.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_encode_empty(self):
        v = build_vocab(["a"])
        assert v.encode("") == []

    def test_roundtrip_on_corpus(self):
        corpus = ["The profit is 4.0000, end.", "value -1.2345 listed"]
        v = build_vocab(corpus)
        for text in corpus:
            assert v.decode(v.encode(text)) == text

    def test_unknown_word_falls_back_to_characters(self):
        v = build_vocab(["abc def"])
        ids = v.encode("fed")  # unseen word, known characters
        assert v.decode(ids) == "fed"
        assert len(ids) == 3

    def test_unknown_character_rejected(self):
        v = build_vocab(["abc"])
        with pytest.raises(KeyError):
            v.encode("q")

    def test_decode_out_of_range(self):
        v = build_vocab(["abc"])
        with pytest.raises(IndexError):
            v.decode([len(v)])

    def test_decode_skips_specials(self):
        v = build_vocab(["hi there"])
        ids = [BOS] + v.encode("hi there") + [EOS, PAD]
        assert v.decode(ids) == "hi there"

    def test_save_load_roundtrip(self, tmp_path):
        v = build_vocab(["some words 0.1000"])
        v.save(tmp_path / "v.json")
        v2 = Vocabulary.load(tmp_path / "v.json")
        assert v2.id_to_token == v.id_to_token

    def test_load_rejects_unknown_format(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"format": "nope", "tokens": []}')
        with pytest.raises(ValueError):
            Vocabulary.load(tmp_path / "bad.json")

    def test_digit_ids(self):
        v = build_vocab(["a 1.0000"])
        digit_ids = [i for i in range(len(v)) if v.is_digit_id(i)]
        assert len(digit_ids) == 10
