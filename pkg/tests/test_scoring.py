from __future__ import annotations

import json
from fractions import Fraction
from importlib import resources

import pytest
from hypothesis import given
from hypothesis import strategies as st

from servebench.scoring import (
    GradeReason,
    accuracy,
    evaluate_constant,
    extract_answer,
    grade,
    last_boxed,
    normalize_math,
    score_text,
)

KINDS = ("gsm8k", "math500", "aime", "gpqa")


def corpus(kind: str) -> list[dict]:
    text = resources.files("servebench").joinpath(f"fixtures/{kind}.jsonl").read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.mark.parametrize("kind", KINDS)
def test_corpus_size(kind):
    rows = corpus(kind)
    assert len(rows) >= 20
    assert {True, False} <= {r["expect_correct"] for r in rows}


@pytest.mark.parametrize("kind", KINDS)
def test_corpus_agreement(kind):
    wrong = [r for r in corpus(kind) if score_text(r["visible_text"], r["gold"], kind).correct != r["expect_correct"]]
    assert wrong == []


# --- extraction ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "text,expected",
    [
        ("\\boxed{\\dfrac{1}{2}}", "\\frac{1}{2}"),
        ("\\boxed{ \\text{east} }", "east"),
        ("a \\boxed{1} b \\boxed{\\frac{2}{3}}", "\\frac{2}{3}"),
        ("\\boxed{\\left( 1, 2 \\right)}", "(1,2)"),
        ("no box here", None),
    ],
)
def test_math500_extraction(text, expected):
    assert extract_answer(text, "math500") == expected


def test_last_boxed_matches_nested_braces():
    assert last_boxed("x \\boxed{\\frac{a}{b^{2}}} y") == "\\frac{a}{b^{2}}"
    assert last_boxed("\\boxed{unclosed") is None
    assert last_boxed("\\fbox{7}") == "7"


@pytest.mark.parametrize(
    "text,expected",
    [
        ("The correct option is (C).", "C"),
        ("Answer: B", "B"),
        ("A. first, then I pick D.", "D"),
        ("The answer is a bit unclear, but B", "B"),
        ("answer: c", "C"),
        ("no letters here", None),
    ],
)
def test_gpqa_extraction(text, expected):
    assert extract_answer(text, "gpqa") == expected


def test_gsm8k_takes_last_number_without_commas():
    assert extract_answer("first 12 then 1,234", "gsm8k") == "1234"
    assert extract_answer("nothing", "gsm8k") is None


def test_aime_rejects_out_of_range():
    assert extract_answer("so 1024", "aime") is None
    assert extract_answer("so \\boxed{073}", "aime") == "73"


def test_extraction_never_sees_reasoning():
    # Only the visible text is an input; an answer buried in reasoning cannot leak in.
    assert score_text("", "42", "gsm8k").reason is GradeReason.NO_ANSWER_FOUND


# --- grading ----------------------------------------------------------------------------


def test_exact_integer_match():
    assert grade("1234", "1234", "gsm8k").reason is GradeReason.MATCH


def test_numeric_fallback_half():
    out = grade("0.5", "\\frac{1}{2}", "math500")
    assert out.correct and out.reason is GradeReason.MATCH


def test_absent_extraction():
    out = grade(None, "3", "math500")
    assert out == type(out)(extracted=None, correct=False, reason=GradeReason.NO_ANSWER_FOUND)


def test_gpqa_letter_match():
    assert grade("C", "C", "gpqa").correct and not grade("B", "C", "gpqa").correct


def test_normalize_math_table():
    table = {
        "\\dfrac{3}{4}": "\\frac{3}{4}",
        " x ^ 2 ": "x^2",
        "\\text{(B)}": "(B)",
        "90^\\circ": "90",
        "5.": "5",
        "\\$18": "18",
    }
    for raw, expected in table.items():
        assert normalize_math(raw) == expected


@given(st.integers(-500, 500), st.integers(1, 500))
def test_evaluate_constant_on_fractions(num, den):
    assert evaluate_constant(f"\\frac{{{num}}}{{{den}}}") == Fraction(num, den)
    assert evaluate_constant(f"{num}/{den}") == Fraction(num, den)


def test_evaluate_constant_rejects_symbols():
    assert evaluate_constant("x+1") is None
    assert evaluate_constant("2\\sqrt{3}") is None


def test_accuracy_helper():
    outcomes = [grade(x, "1", "gsm8k") for x in ("1", "2", "1", "1")]
    assert accuracy(outcomes) == 0.75
    with pytest.raises(ValueError):
        accuracy([])
