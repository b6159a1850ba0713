"""Writes the hand-labeled scoring corpus under src/servebench/fixtures/."""

import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "servebench" / "fixtures"

GSM8K = [
    ("She pays 3 * 6 = 18 dollars. The answer is 18.", "18", True),
    ("Total is 1,234 apples.", "1234", True),
    ("So he has 42 marbles left.\n#### 42", "42", True),
    ("First 5 + 7 = 12, then 12 * 3 = 36. Final answer: \\boxed{36}", "36", True),
    ("The answer is 35.", "36", False),
    ("I cannot determine this.", "7", False),
    ("She earns $2,500 per month.", "2500", True),
    ("Half of 9 is 4.5", "4.5", True),
    ("The result is 4.50", "4.5", True),
    ("It costs -3 dollars net, i.e. a refund of -3", "-3", True),
    ("Answer: 10 cookies, because 2 boxes of 5.", "10", False),
    ("2 boxes of 5 make 10 cookies.", "10", True),
    ("We get 100. Wait, recheck: 99.", "99", True),
    ("We get 99. Wait, recheck: 100.", "99", False),
    ("1,000,000 grains", "1000000", True),
    ("The total is 18.0", "18", True),
    ("", "5", False),
    ("Therefore 7 apples remain.", "7", True),
    ("After 3 weeks, 21", "21", True),
    ("He ran 26.2 miles", "26", False),
    ("The answer is \\boxed{1,050}.", "1050", True),
    ("Final: 0", "0", True),
]

MATH500 = [
    ("Thus the answer is \\boxed{\\dfrac{1}{2}}.", "\\frac{1}{2}", True),
    ("So \\boxed{0.5}", "\\frac{1}{2}", True),
    ("\\boxed{\\frac{1}{3}}", "\\frac{1}{2}", False),
    ("We find \\boxed{ 12 }.", "12", True),
    ("First \\boxed{3}, but correcting, \\boxed{4}", "4", True),
    ("First \\boxed{4}, but correcting, \\boxed{3}", "4", False),
    ("The value is \\boxed{\\text{(B)}}", "(B)", True),
    ("\\boxed{\\left(1,2\\right)}", "(1,2)", True),
    ("Answer: 5", "5", False),
    ("\\boxed{2\\sqrt{3}}", "2\\sqrt{3}", True),
    ("\\boxed{2 \\sqrt 3}", "2\\sqrt{3}", False),
    ("\\boxed{\\frac{\\sqrt{2}}{2}}", "\\frac{\\sqrt{2}}{2}", True),
    ("\\boxed{90^\\circ}", "90", True),
    ("\\boxed{\\tfrac{3}{4}}", "0.75", True),
    ("\\boxed{1/4}", "\\frac{1}{4}", True),
    ("\\boxed{-\\frac{2}{3}}", "-\\frac{2}{3}", True),
    ("\\boxed{x^2+1}", "x^2 + 1", True),
    ("\\boxed{\\{1,2\\}}", "\\{1,2\\}", True),
    ("The answer is \\boxed{10}.", "10.0", True),
    ("\\boxed{7}", "8", False),
    ("\\boxed{\\frac{1}{2", "\\frac{1}{2}", False),
    ("No final answer given.", "3", False),
    ("\\boxed{\\$18}", "18", True),
    ("$\\boxed{\\pi}$", "\\pi", True),
]

AIME = [
    ("The answer is 204.", "204", True),
    ("So the remainder is \\boxed{073}.", "73", True),
    ("Therefore \\boxed{25}", "25", True),
    ("We get 1000 total, so remainder 0", "0", True),
    ("The sum is 1024", "24", False),
    ("The answer is 33.", "34", False),
    ("Answer: 999", "999", True),
    ("Nothing conclusive here.", "5", False),
    ("Candidates 12 and 15; final 15", "15", True),
    ("Candidates 12 and 15; final 15", "12", False),
    ("m+n = 3 + 4 = 7", "7", True),
    ("The answer is -5", "5", False),
    ("\\boxed{116}", "116", True),
    ("Thus $m+n=\\boxed{321}$.", "321", True),
    ("After simplifying, 2024", "24", False),
    ("Final answer: 080", "80", True),
    ("There are 55 ways.", "55", True),
    ("The probability is 3/8 so m+n=11", "11", True),
    ("It equals 12.5", "12", False),
    ("", "1", False),
    ("Result: 500.", "500", True),
    ("The answer is 42", "42", True),
]

GPQA = [
    ("The correct option is (C).", "C", True),
    ("Answer: B", "B", True),
    ("Answer: B", "C", False),
    ("I think it's A. Actually, the answer is D.", "D", True),
    ("\\boxed{A}", "A", True),
    ("The answer is (b)", "B", True),
    ("B. Because the orbital is degenerate.", "B", True),
    ("After elimination, only C) remains.", "C", True),
    ("I am not sure.", "A", False),
    ("This is a tricky question. The final answer is A", "A", True),
    ("Options A and B are wrong, so D", "D", True),
    ("Options A and B are wrong, so D", "A", False),
    ("answer: c", "C", True),
    ("The correct choice is D.", "D", True),
    ("The correct choice is D.", "B", False),
    ("E", "A", False),
    ("Final answer: (A)", "A", True),
    ("Option B", "B", True),
    ("After checking each option, the answer is C.", "C", True),
    ("A", "A", True),
    ("Considering a small perturbation, the result is B", "B", True),
    ("The energy is 5 eV, which matches (A).", "A", True),
]


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for kind, rows in {"gsm8k": GSM8K, "math500": MATH500, "aime": AIME, "gpqa": GPQA}.items():
        with open(OUT / f"{kind}.jsonl", "w", encoding="utf-8") as f:
            for text, gold, ok in rows:
                f.write(json.dumps({"visible_text": text, "gold": gold, "expect_correct": ok}) + "\n")


if __name__ == "__main__":
    main()
