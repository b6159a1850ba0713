"""Answer extraction and grading per task kind."""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from enum import Enum
from fractions import Fraction
from typing import Iterable

from .core import TaskKind


class GradeReason(str, Enum):
    MATCH = "match"
    MISMATCH = "mismatch"
    NO_ANSWER_FOUND = "no_answer_found"


@dataclass(frozen=True)
class GradeOutcome:
    extracted: str | None
    correct: bool
    reason: GradeReason


_NUMBER = re.compile(r"-?\d[\d,]*(?:\.\d+)?|-?\.\d+")
_INTEGER = re.compile(r"(?<![\d.])-?\d+(?![\d.]*\d)")
_LETTER_STRONG = re.compile(
    r"(?i:answer|option|choice)\s*(?i:is)?\s*[:\s]*\(?\s*(?:([A-D])\b|([a-d])(?=\)|\.?\s*$))"
    r"|\\boxed\{\s*\(?([A-D])\)?\s*\}"
    r"|\(([A-D])\)"
    r"|\b([A-D])[.)](?!\w)",
    re.MULTILINE,
)
_LETTER_STANDALONE = re.compile(r"(?<![A-Za-z\\])([A-D])(?![A-Za-z])")


def last_boxed(text: str) -> str | None:
    """Content of the last ``\\boxed{...}`` (or ``\\fbox``) with balanced braces."""
    for m in reversed(list(re.finditer(r"\\(?:boxed|fbox)\s*\{", text))):
        depth = 1
        i = m.end()
        while i < len(text):
            ch = text[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[m.end() : i]
            i += 1
    return None


def _strip_wrapper(s: str, command: str) -> str:
    prefix = f"\\{command}{{"
    if s.startswith(prefix) and s.endswith("}"):
        inner = s[len(prefix) : -1]
        # Only unwrap when the braces are the command's own pair.
        depth = 0
        for ch in inner:
            depth += ch == "{"
            depth -= ch == "}"
            if depth < 0:
                return s
        return inner
    return s


def normalize_math(s: str) -> str:
    s = re.sub(r"\s+", "", s)
    s = s.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac")
    s = s.replace("\\left", "").replace("\\right", "")
    s = s.replace("\\!", "").replace("\\,", "").replace("\\;", "").replace("\\$", "").replace("$", "")
    s = s.replace("^{\\circ}", "").replace("^\\circ", "")
    for cmd in ("text", "textbf", "mathrm", "mbox"):
        s = _strip_wrapper(s, cmd)
    return s.rstrip(".")


def extract_answer(visible_text: str, task_kind: TaskKind | str) -> str | None:
    """Normalized final answer from the visible (post-reasoning) text, last occurrence wins."""
    kind = TaskKind(task_kind)
    if not visible_text:
        return None
    if kind is TaskKind.GSM8K:
        nums = _NUMBER.findall(visible_text)
        return nums[-1].replace(",", "") if nums else None
    if kind is TaskKind.MATH500:
        boxed = last_boxed(visible_text)
        return None if boxed is None else normalize_math(boxed)
    if kind is TaskKind.AIME:
        ints = _INTEGER.findall(visible_text.replace(",", ""))
        if not ints:
            return None
        value = int(ints[-1])
        return str(value) if 0 <= value <= 999 else None
    strong = list(_LETTER_STRONG.finditer(visible_text))
    if strong:
        return next(g for g in strong[-1].groups() if g).upper()
    loose = _LETTER_STANDALONE.findall(visible_text)
    return loose[-1] if loose else None


def _as_decimal(s: str) -> Decimal | None:
    try:
        return Decimal(s.replace(",", "").strip())
    except InvalidOperation:
        return None


class _Arith:
    """Recursive-descent evaluator for constant arithmetic: + - * / ^int, \\frac, \\cdot, parens."""

    _TOKEN = re.compile(r"\\frac|\\cdot|\\times|\\div|\d+\.?\d*|\.\d+|[-+*/^(){}]")

    def __init__(self, text: str):
        text = text.replace("\\left", "").replace("\\right", "")
        pos = 0
        self.tokens: list[str] = []
        for m in self._TOKEN.finditer(text):
            if text[pos : m.start()].strip():
                raise ValueError("not plain arithmetic")
            self.tokens.append(m.group())
            pos = m.end()
        if text[pos:].strip() or not self.tokens:
            raise ValueError("not plain arithmetic")
        self.i = 0

    def peek(self) -> str | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise ValueError("unexpected token")
        self.i += 1
        return tok

    def parse(self) -> Fraction:
        value = self.expr()
        if self.peek() is not None:
            raise ValueError("trailing tokens")
        return value

    def expr(self) -> Fraction:
        value = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def term(self) -> Fraction:
        value = self.unary()
        while self.peek() in ("*", "/", "\\cdot", "\\times", "\\div"):
            op = self.take()
            rhs = self.unary()
            value = value / rhs if op in ("/", "\\div") else value * rhs
        return value

    def unary(self) -> Fraction:
        if self.peek() == "-":
            self.take()
            return -self.unary()
        if self.peek() == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Fraction:
        base = self.atom()
        if self.peek() == "^":
            self.take()
            exp = self.atom()
            if exp.denominator != 1 or abs(exp) > 64:
                raise ValueError("non-integer exponent")
            return base ** int(exp)
        return base

    def atom(self) -> Fraction:
        tok = self.take()
        if tok == "\\frac":
            self.take("{")
            num = self.expr()
            self.take("}")
            self.take("{")
            den = self.expr()
            self.take("}")
            return num / den
        if tok in ("(", "{"):
            value = self.expr()
            self.take(")" if tok == "(" else "}")
            return value
        if tok[0].isdigit() or tok[0] == ".":
            return Fraction(tok)
        raise ValueError("unexpected token")


def evaluate_constant(expr: str) -> Fraction | None:
    """Exact rational value of a plain arithmetic constant, else None."""
    try:
        return _Arith(expr).parse()
    except (ValueError, ZeroDivisionError):
        return None


def grade(extracted: str | None, gold: str, task_kind: TaskKind | str) -> GradeOutcome:
    kind = TaskKind(task_kind)
    if extracted is None:
        return GradeOutcome(None, False, GradeReason.NO_ANSWER_FOUND)
    if kind in (TaskKind.GSM8K, TaskKind.AIME):
        a, b = _as_decimal(extracted), _as_decimal(gold)
        ok = a is not None and b is not None and a == b
    elif kind is TaskKind.MATH500:
        a, b = normalize_math(extracted), normalize_math(gold)
        ok = a == b
        if not ok:
            va, vb = evaluate_constant(a), evaluate_constant(b)
            ok = va is not None and va == vb
    else:
        ok = extracted.strip().upper() == gold.strip().upper()
    return GradeOutcome(extracted, ok, GradeReason.MATCH if ok else GradeReason.MISMATCH)


def score_text(visible_text: str, gold: str, task_kind: TaskKind | str) -> GradeOutcome:
    return grade(extract_answer(visible_text, task_kind), gold, task_kind)


def accuracy(outcomes: Iterable[GradeOutcome]) -> float:
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("accuracy of an empty outcome list")
    return sum(1 for o in outcomes if o.correct) / len(outcomes)
