import pytest
from hypothesis import given, strategies as st

from gcot_forge.targets import (
    MAX_TARGETS_PER_COT,
    NUMBER_RE,
    blocklist,
    build_sub_questions,
    extract_targets,
    is_noun_token,
    stopwords,
)


class TestExtractTargets:
    def test_price_sentence(self):
        # Hand-derived from the extraction grammar.
        targets = extract_targets("The price of beef sauce is $1.85 per kilogram")
        assert [(t.surface, t.kind) for t in targets] == [
            ("beef sauce", "noun"),
            ("$1.85", "number"),
        ]

    def test_arithmetic_line(self):
        targets = extract_targets("Total = 204 + 274 = 478")
        assert [(t.surface, t.kind) for t in targets] == [
            ("204", "number"),
            ("274", "number"),
            ("478", "number"),
        ]

    def test_whitespace_only(self):
        assert extract_targets("   \n\t ") == []

    def test_dedup_case_folded_first_span_wins(self):
        targets = extract_targets("Beef Sauce near the shelf, then beef sauce again")
        surfaces = [t.surface for t in targets]
        assert surfaces.count("Beef Sauce") == 1
        assert "beef sauce" not in surfaces
        assert targets[0].span[0] == 0

    def test_cap_at_twelve(self):
        text = " ".join(str(100 + i) for i in range(20))
        targets = extract_targets(text)
        assert len(targets) == MAX_TARGETS_PER_COT
        assert targets[0].surface == "100"

    def test_answer_tail_not_mined(self):
        targets = extract_targets("The beef sauce is $1.85. *Answer*: 3.02")
        assert [t.surface for t in targets] == ["beef sauce", "$1.85"]

    def test_thousands_percent_currency(self):
        targets = extract_targets("There were 1,234.50 which is 45% above €7.20")
        assert [t.surface for t in targets] == ["1,234.50", "45%", "€7.20"]

    def test_noun_run_capped_at_four_tokens(self):
        targets = extract_targets("shiny copper kettle lantern basket holder")
        assert all(len(t.surface.split()) <= 4 for t in targets)

    def test_spans_reconstruct_surfaces(self, small_world):
        for wq in small_world.qa:
            from gcot_forge.synthworld import cot_body

            text = cot_body(wq)
            for t in extract_targets(text):
                assert text[t.span[0] : t.span[1]] == t.surface

    @given(st.text(max_size=300))
    def test_deterministic_and_well_formed(self, text):
        first = extract_targets(text)
        second = extract_targets(text)
        assert first == second
        for t in first:
            assert text[t.span[0] : t.span[1]] == t.surface
            if t.kind == "number":
                m = NUMBER_RE.match(t.surface)
                assert m is not None and m.group() == t.surface
            else:
                for token in t.surface.split():
                    assert token.casefold() not in stopwords()

    def test_no_stopword_or_blocklist_targets(self):
        text = "We need to identify the total number of items in the table"
        assert extract_targets(text) == []


class TestNumberGrammar:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ("$1.85", "$1.85"),
            ("1,234,567", "1,234,567"),
            ("50%", "50%"),
            ("6.04.", "6.04"),
            ("475", "475"),
        ],
    )
    def test_matches(self, text, expected):
        m = NUMBER_RE.match(text)
        assert m is not None and m.group() == expected

    def test_no_match_inside_words(self):
        assert NUMBER_RE.search("v1.85kg") is None
        assert NUMBER_RE.search("abc123") is None


class TestSubQuestions:
    def test_prompt_template(self):
        targets = extract_targets("The price of beef sauce is $1.85")
        subqs = build_sub_questions(targets)
        assert subqs[0].prompt == "Where is the beef sauce?"
        assert subqs[1].prompt == "Where is the $1.85?"

    def test_empty(self):
        assert build_sub_questions([]) == []

    def test_indices_one_based(self):
        targets = extract_targets("204 + 274 = 478")
        subqs = build_sub_questions(targets)
        assert [sq.index_t for sq in subqs] == [1, 2, 3]


def test_wordlists_loaded():
    assert "the" in stopwords()
    assert "price" in blocklist()
    assert "kilogram" in blocklist()
    assert len(stopwords()) >= 120
    assert len(blocklist()) >= 180
    assert not is_noun_token("the")
    assert not is_noun_token("price")
    assert is_noun_token("kettle")
