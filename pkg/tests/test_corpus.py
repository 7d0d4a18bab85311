import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrs.corpus import (
    JAVA_KEYWORDS, PAD, STOPWORDS, UNK, CodeRecord, ExtractionError, IngestReport, LengthConfig,
    Vocabulary, build_vocab, encode_corpus, encode_pair, extract_features, filter_body_tokens,
    read_corpus, record_from_json, split_camel,
)
from csrs.synthetic import lexical_records

FIXTURES = Path(__file__).parent / "fixtures"


def load_methods():
    with open(FIXTURES / "methods.jsonl") as fh:
        return [json.loads(line) for line in fh]


class TestSplitCamel:
    @pytest.mark.parametrize("ident,expected", [
        ("getValue", ["get", "value"]),
        ("x", ["x"]),
        ("parseHTTPResponse2Json", ["parse", "http", "response", "2", "json"]),
        ("snake_case_name", ["snake", "case", "name"]),
        ("HashMap", ["hash", "map"]),
        ("quickSort", ["quick", "sort"]),
    ])
    def test_examples(self, ident, expected):
        assert split_camel(ident) == expected

    def test_no_alnum_falls_back_to_lowercased_input(self):
        assert split_camel("$$") == ["$$"]


class TestExtractFeatures:
    def test_fixture_matches_hand_extracted_golden(self):
        golden = json.loads((FIXTURES / "golden_features.json").read_text())
        for m in load_methods():
            expected = golden[m["id"]]
            if expected is None:
                with pytest.raises(ExtractionError):
                    extract_features(m["source"], m["comment"], record_id=m["id"])
                continue
            rec = extract_features(m["source"], m["comment"], record_id=m["id"])
            assert rec.method_name_tokens == expected["name"], m["id"]
            assert rec.api_sequence_tokens == expected["api"], m["id"]
            assert rec.body_tokens == expected["tokens"], m["id"]
            assert rec.description_tokens == expected["description"], m["id"]

    def test_theme_image_style_record(self):
        src = """public void cacheThemeImage(String key) {
            Image image = getThemeImage(key);
            Map.put(key, image);
        }"""
        rec = extract_features(src, "/** Caches a theme image. */")
        assert rec.method_name_tokens == ["cache", "theme", "image"]
        assert rec.api_sequence_tokens == ["getThemeImage", "Map", "put"]

    def test_empty_body_dropped(self):
        with pytest.raises(ExtractionError, match="empty"):
            extract_features("void f() { }", "/** f. */")

    def test_unparseable_rejected(self):
        with pytest.raises(ExtractionError):
            extract_features("int x = 3;", "nothing")
        with pytest.raises(ExtractionError, match="unbalanced"):
            extract_features("void f() { if (x) { y(); }", "doc")

    def test_body_tokens_invariants(self):
        for m in load_methods():
            try:
                rec = extract_features(m["source"], m["comment"])
            except ExtractionError:
                continue
            assert len(rec.body_tokens) == len(set(rec.body_tokens))
            assert not set(rec.body_tokens) & JAVA_KEYWORDS
            assert not set(rec.body_tokens) & STOPWORDS

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(sorted(JAVA_KEYWORDS | STOPWORDS) + ["alpha", "beta", "gamma", "x"]),
                    max_size=30))
    def test_filtering_is_idempotent(self, words):
        once = filter_body_tokens(words)
        assert filter_body_tokens(once) == once


class TestReadCorpus:
    def test_skips_and_counts_bad_lines(self, tmp_path):
        lines = [
            json.dumps({"id": 1, "method_name": "getValue", "api_sequence": "Map.get",
                        "tokens": "value map", "description": "Get the value."}),
            "{not json",
            json.dumps({"id": 2, "method_name": "f", "api_sequence": "", "tokens": "x",
                        "description": "d"}),
            json.dumps({"id": 3, "method_name": "g"}),
        ]
        path = tmp_path / "c.jsonl"
        path.write_text("\n".join(lines) + "\n")
        records, report = read_corpus(path)
        assert [r.id for r in records] == ["1"]
        assert records[0].description_tokens == ["get", "the", "value"]
        assert report.kept == 1 and report.dropped == 3
        assert report.reasons == Counter({"invalid_json": 1, "empty_field": 1, "malformed": 1})


class TestVocabulary:
    def test_single_record_size(self):
        rec = CodeRecord("r", ["a"], ["b"], ["a", "b"], ["q"])
        code_vocab, desc_vocab = build_vocab([rec])
        assert len(code_vocab) == 4
        assert code_vocab.itos[:2] == ["<pad>", "<unk>"]

    def test_min_frequency_drops_hapax(self):
        v = Vocabulary.from_counts(Counter({"a": 3, "b": 1, "c": 2}), min_frequency=2)
        assert v.itos == ["<pad>", "<unk>", "a", "c"]
        assert v.id("b") == UNK

    def test_max_size_keeps_specials(self):
        v = Vocabulary.from_counts(Counter({"a": 3, "b": 2, "c": 1}), max_size=3)
        assert v.itos == ["<pad>", "<unk>", "a"]

    def test_ids_dense_and_round_trip(self):
        v = Vocabulary.from_counts(Counter({"x": 2, "y": 2, "z": 5}))
        assert sorted(v.stoi.values()) == list(range(len(v)))
        for w in v.itos:
            assert v.word(v.id(w)) == w

    def test_matches_independent_count_script(self):
        records = lexical_records(100, seed=3)
        code_vocab, desc_vocab = build_vocab(records)
        # independent oracle: plain dict counting, then sort by (-count, word)
        counts = {}
        for r in records:
            for w in r.method_name_tokens + r.api_sequence_tokens + r.body_tokens:
                counts[w] = counts.get(w, 0) + 1
        expected = ["<pad>", "<unk>"] + sorted(counts, key=lambda w: (-counts[w], w))
        assert code_vocab.itos == expected
        dcounts = {}
        for r in records:
            for w in r.description_tokens:
                dcounts[w] = dcounts.get(w, 0) + 1
        assert desc_vocab.itos == ["<pad>", "<unk>"] + sorted(dcounts, key=lambda w: (-dcounts[w], w))

    def test_file_round_trip(self, tmp_path):
        v = Vocabulary(["b", "a"])
        v.save(tmp_path / "v.txt")
        assert (tmp_path / "v.txt").read_text().splitlines() == ["b", "a"]
        assert Vocabulary.load(tmp_path / "v.txt") == v

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])


class TestEncodePair:
    def setup_method(self):
        self.rec = CodeRecord("r", ["get", "value"], ["Map", "get"], ["value", "map"],
                              ["get", "the", "value"])
        self.code_vocab, self.desc_vocab = build_vocab([self.rec])

    def test_exact_length_no_pad(self):
        lengths = LengthConfig(description=3, name=2, api=2, tokens=2)
        pair = encode_pair(self.rec, self.code_vocab, self.desc_vocab, lengths)
        for m in pair.masks.values():
            assert m.all()

    def test_unknown_word_becomes_unk(self):
        rec = CodeRecord("s", ["get", "zzz"], ["Map"], ["value"], ["the", "qqq"])
        pair = encode_pair(rec, self.code_vocab, self.desc_vocab, LengthConfig(4, 3, 3, 3))
        assert pair.name_ids[1] == UNK
        assert pair.desc_ids[1] == UNK
        assert pair.name_ids[2] == PAD

    def test_truncation_counted(self):
        report = IngestReport(kept=1)
        encode_pair(self.rec, self.code_vocab, self.desc_vocab, LengthConfig(2, 1, 2, 2), report=report)
        assert report.truncated == Counter({"description": 1, "name": 1})

    def test_bad_label(self):
        with pytest.raises(ValueError):
            encode_pair(self.rec, self.code_vocab, self.desc_vocab, label=2)

    def test_round_trip_against_reference(self):
        rng = np.random.default_rng(0)
        records = lexical_records(50, seed=1)
        code_vocab, desc_vocab = build_vocab(records[:25])
        lengths = LengthConfig(description=5, name=2, api=2, tokens=6)
        for rec in records:
            pair = encode_pair(rec, code_vocab, desc_vocab, lengths, label=int(rng.integers(0, 2)))
            for field_name, ids, vocab in (("description", pair.desc_ids, desc_vocab),
                                           ("name", pair.name_ids, code_vocab),
                                           ("api", pair.api_ids, code_vocab),
                                           ("tokens", pair.tok_ids, code_vocab)):
                words = rec.field_tokens(field_name)[:lengths.of(field_name)]
                expected = [w if w in vocab else "<unk>" for w in words]
                assert vocab.decode(ids) == expected
                assert len(ids) == lengths.of(field_name)
                nonpad = ids != PAD
                # no PAD before a non-PAD id
                assert not np.any(~nonpad[:-1] & nonpad[1:])
                np.testing.assert_array_equal(pair.masks[field_name], nonpad)

    def test_encoding_deterministic(self, tmp_path):
        records = lexical_records(20, seed=2)
        paths = []
        for k in range(2):
            code_vocab, desc_vocab = build_vocab(records)
            corpus = encode_corpus(records, code_vocab, desc_vocab)
            paths.append(tmp_path / f"enc{k}.jsonl")
            corpus.save(paths[-1])
        assert paths[0].read_bytes() == paths[1].read_bytes()


def test_record_from_json_splits_camel_names():
    rec = record_from_json({"id": 7, "method_name": "readFileLines", "api_sequence": "Files.readAllLines",
                            "tokens": "path lines path return", "description": "Reads all lines!"})
    assert rec.method_name_tokens == ["read", "file", "lines"]
    assert rec.body_tokens == ["path", "lines"]
    assert rec.description_tokens == ["reads", "all", "lines"]
