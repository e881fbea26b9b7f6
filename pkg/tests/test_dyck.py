"""Dyck enumeration and validity parser against grammar-based oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dptab import dyck

from oracles import catalan, dyck_member_by_grammar, enumerate_dyck_bruteforce


class TestGenerate:
    def test_k2(self):
        assert dyck.generate_dyck(2) == ["()"]

    def test_k6_contains_known_members(self):
        strings = dyck.generate_dyck(6)
        assert "((()))" in strings and "(()())" in strings
        assert len(strings) == catalan(3)

    def test_counts_match_catalan_recurrence(self):
        for k in range(2, 18, 2):
            assert len(dyck.generate_dyck(k)) == catalan(k // 2)

    def test_lexicographic_and_duplicate_free(self):
        strings = dyck.generate_dyck(10)
        assert strings == sorted(strings)
        assert len(set(strings)) == len(strings)

    def test_all_enumerated_strings_are_valid(self):
        for k in (2, 8, 12):
            assert all(dyck.is_valid_dyck(s) for s in dyck.generate_dyck(k))

    def test_matches_bruteforce_grammar_enumeration(self):
        for k in (2, 4, 6, 8, 10):
            assert dyck.generate_dyck(k) == enumerate_dyck_bruteforce(k)

    def test_odd_k_warns_and_returns_empty(self):
        with pytest.warns(UserWarning):
            assert dyck.generate_dyck(5) == []

    def test_out_of_range_k(self):
        with pytest.raises(ValueError):
            dyck.generate_dyck(1)
        with pytest.raises(ValueError):
            dyck.generate_dyck(26)


class TestValidity:
    def test_known_valid(self):
        assert dyck.is_valid_dyck("((()))")

    def test_known_invalid(self):
        assert not dyck.is_valid_dyck(")(())(")

    def test_empty_string_valid(self):
        assert dyck.is_valid_dyck("")

    def test_foreign_character(self):
        with pytest.raises(ValueError):
            dyck.is_valid_dyck("(a)")

    def test_agrees_with_grammar_oracle_up_to_length_12(self):
        # exhaustive agreement on short strings, sampled beyond
        import itertools
        for n in range(0, 13):
            if n <= 10:
                pool = ["".join(c) for c in itertools.product("()", repeat=n)]
            else:
                rng = np.random.default_rng(n)
                pool = ["".join(rng.choice(["(", ")"], size=n)) for _ in range(2000)]
            for s in pool:
                assert dyck.is_valid_dyck(s) == dyck_member_by_grammar(s), s

    @given(st.text(alphabet="()", max_size=40))
    @settings(max_examples=300)
    def test_counter_scan_properties(self, s):
        valid = dyck.is_valid_dyck(s)
        if valid:
            assert s.count("(") == s.count(")")
        if s.count("(") != s.count(")"):
            assert not valid


class TestRates:
    def test_full_enumeration_rate_is_one(self):
        assert dyck.validity_rate(dyck.generate_dyck(8)) == 1.0

    def test_all_open_rate_is_zero(self):
        assert dyck.validity_rate(["((((", "(((("]) == 0.0

    def test_empty_sample_rejected(self):
        with pytest.raises(dyck.DataError):
            dyck.validity_rate([])


class TestDataset:
    def test_encoded_dataset_shape_and_sharing(self):
        ds = dyck.dyck_dataset(6)
        assert ds.rows.shape == (catalan(3), 6)
        assert ds.vocab.shared and ds.vocab.total == 2
        strings = dyck.rows_to_strings(ds.rows)
        assert all(dyck.is_valid_dyck(s) for s in strings)

    def test_roundtrip_strings(self):
        ds = dyck.dyck_dataset(4)
        assert dyck.rows_to_strings(ds.rows) == dyck.generate_dyck(4)
