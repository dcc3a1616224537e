"""Judge panel: form-structured reviews, score normalization, rating.

A review runs in two phases — qualitative feedback first, then rubric
scores conditioned on that feedback. Scores are exact rationals
(`fractions.Fraction`) validated against each criterion's range and step
grid, then affinely normalized to the common 1-5 scale:

    v' = 1 + 4 * (v - min) / (max - min)

The scalar rating of an artifact is its normalized headline criterion
(Overall Assessment / Rating / Overall). Ties between artifacts are broken
downstream by the documented chain: secondary criterion, tertiary
criterion, younger generation, lexicographic id.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources

from .errors import OutOfRangeScore, ParseError
from .gateway import Gateway


@dataclass(frozen=True)
class Criterion:
    name: str
    min: Fraction
    max: Fraction
    step: Fraction


@dataclass(frozen=True)
class ReviewForm:
    name: str
    rubric: tuple[Criterion, ...]
    feedback_sections: tuple[str, ...]
    aggregate_key: str   # headline criterion
    tiebreak_keys: tuple[str, str]

    def criterion(self, name: str) -> Criterion:
        for c in self.rubric:
            if c.name == name:
                return c
        raise KeyError(name)


def _c(name: str, lo: int, hi: int, step: str = "1") -> Criterion:
    return Criterion(name, Fraction(lo), Fraction(hi), Fraction(step))


FORMS: dict[str, ReviewForm] = {
    "acl": ReviewForm(
        name="acl",
        rubric=(
            _c("Reviewer Confidence", 1, 5, "1/2"),
            _c("Soundness", 1, 5, "1/2"),
            _c("Excitement", 1, 5, "1/2"),
            _c("Overall Assessment", 1, 5, "1/2"),
        ),
        feedback_sections=(
            "Paper Summary",
            "Summary of Strengths",
            "Summary of Weaknesses",
            "Comments Suggestions And Typos",
        ),
        aggregate_key="Overall Assessment",
        tiebreak_keys=("Soundness", "Excitement"),
    ),
    "iclr": ReviewForm(
        name="iclr",
        rubric=(
            _c("Soundness", 1, 4),
            _c("Presentation", 1, 4),
            _c("Contribution", 1, 4),
            _c("Rating", 1, 10),
            _c("Confidence", 1, 5),
        ),
        feedback_sections=("Summary", "Strengths", "Weaknesses", "Questions"),
        aggregate_key="Rating",
        tiebreak_keys=("Soundness", "Contribution"),
    ),
    "neurips": ReviewForm(
        name="neurips",
        rubric=(
            _c("Quality", 1, 4),
            _c("Clarity", 1, 4),
            _c("Significance", 1, 4),
            _c("Originality", 1, 4),
            _c("Overall", 1, 6),
            _c("Confidence", 1, 5),
        ),
        feedback_sections=(
            "Summary", "Strengths And Weaknesses", "Questions", "Limitations",
        ),
        aggregate_key="Overall",
        tiebreak_keys=("Quality", "Significance"),
    ),
}


@dataclass
class Review:
    form: str
    feedback: dict[str, str]
    scores: dict[str, Fraction]
    artifact_id: str = ""


@dataclass(frozen=True)
class Rating:
    value: Fraction

    def __post_init__(self):
        if not (1 <= self.value <= 5):
            raise ValueError(f"rating {self.value} outside [1, 5]")

    def __float__(self) -> float:
        return float(self.value)


# -- score parsing ------------------------------------------------------

_BLOCK_RE = re.compile(r"```scores\s*\n(.*?)```", re.DOTALL)
_SCORE_LINE_RE = re.compile(r"^\s*(.+?)\s*:\s*(-?\d+(?:\.\d+)?)\s*$")


def parse_score_block(text: str, form: ReviewForm) -> dict[str, Fraction]:
    """Parse the fenced score block; strict about criteria and the step grid.

    Off-grid or malformed values are parse failures (the caller re-prompts
    once); a value outside the criterion's range is a hard error.
    """
    match = _BLOCK_RE.search(text)
    if not match:
        raise ParseError("no ```scores block in response")
    scores: dict[str, Fraction] = {}
    known = {c.name for c in form.rubric}
    for raw in match.group(1).splitlines():
        if not raw.strip():
            continue
        m = _SCORE_LINE_RE.match(raw)
        if not m:
            raise ParseError(f"bad score line: {raw!r}")
        name, value_text = m.group(1), m.group(2)
        if name not in known:
            raise ParseError(f"unknown criterion {name!r} for form {form.name}")
        if name in scores:
            raise ParseError(f"criterion {name!r} scored twice")
        value = Fraction(value_text)
        crit = form.criterion(name)
        if not (crit.min <= value <= crit.max):
            raise OutOfRangeScore(
                f"{form.name} {name} = {value_text} outside "
                f"[{crit.min}, {crit.max}]"
            )
        if (value - crit.min) % crit.step != 0:
            raise ParseError(
                f"{form.name} {name} = {value_text} not on the {crit.step} step grid"
            )
        scores[name] = value
    missing = known - set(scores)
    if missing:
        raise ParseError(f"missing criteria: {sorted(missing)}")
    return scores


def split_feedback(text: str, form: ReviewForm) -> dict[str, str]:
    """Best-effort split of feedback text into the form's named sections."""
    sections = {"raw": text}
    names = "|".join(re.escape(s) for s in form.feedback_sections)
    pattern = re.compile(rf"^({names})\s*:", re.MULTILINE)
    marks = [(m.start(), m.group(1), m.end()) for m in pattern.finditer(text)]
    for i, (_, name, body_start) in enumerate(marks):
        body_end = marks[i + 1][0] if i + 1 < len(marks) else len(text)
        sections[name] = text[body_start:body_end].strip()
    return sections


# -- prompting ----------------------------------------------------------

def _template(form_name: str, phase: str) -> str:
    ref = resources.files("dlma").joinpath(f"assets/prompts/{form_name}_{phase}.txt")
    return ref.read_text(encoding="utf-8")


class ReviewPanel:
    """Two-phase judging under a named review form."""

    def __init__(self, gateway: Gateway):
        self._gateway = gateway

    def review(self, artifact_text: str, form_name: str, *,
               artifact_id: str = "", tag_prefix: str = "") -> Review:
        if not artifact_text.strip():
            raise ValueError("artifact text must be non-empty")
        form = FORMS[form_name]
        feedback_prompt = _template(form.name, "feedback").format(artifact=artifact_text)
        feedback_text = self._gateway.ask(
            f"{tag_prefix}review.{form.name}.feedback", [("user", feedback_prompt)]
        )
        score_prompt = _template(form.name, "scores").format(
            artifact=artifact_text, feedback=feedback_text
        )
        tag = f"{tag_prefix}review.{form.name}.scores"
        text = self._gateway.ask(tag, [("user", score_prompt)])
        try:
            scores = parse_score_block(text, form)
        except ParseError:
            retry = self._gateway.ask(tag, [
                ("user", score_prompt),
                ("user", "Your previous reply was not a valid score block. "
                         "Reply again with only the fenced ```scores block, "
                         "one 'Criterion: value' line per criterion, values "
                         "on the allowed grid."),
            ])
            scores = parse_score_block(retry, form)
        return Review(
            form=form.name,
            feedback=split_feedback(feedback_text, form),
            scores=scores,
            artifact_id=artifact_id,
        )


# -- normalization and aggregation ---------------------------------------

def normalize_value(value: Fraction, crit: Criterion) -> Fraction:
    return 1 + 4 * (value - crit.min) / (crit.max - crit.min)


def normalize(review: Review) -> dict[str, Fraction]:
    """All scores affinely mapped onto the 1-5 scale; 1-5 criteria unchanged."""
    form = FORMS[review.form]
    return {
        name: normalize_value(value, form.criterion(name))
        for name, value in review.scores.items()
    }


def aggregate(review: Review) -> Rating:
    form = FORMS[review.form]
    normalized = normalize(review)
    return Rating(normalized[form.aggregate_key])


def ordering_scores(review: Review) -> tuple[Fraction, Fraction, Fraction]:
    """(headline, secondary, tertiary) normalized values for pool ordering."""
    form = FORMS[review.form]
    normalized = normalize(review)
    sec, ter = form.tiebreak_keys
    return normalized[form.aggregate_key], normalized[sec], normalized[ter]


# -- rank correlation -----------------------------------------------------

def average_ranks(values) -> list[float]:
    """Ranks 1..n with ties given the average of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(rank_a, rank_b) -> float:
    """Spearman correlation via Pearson on average ranks; exact on ties."""
    a, b = list(rank_a), list(rank_b)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two observations")
    ra, rb = average_ranks(a), average_ranks(b)
    mean_a = sum(ra) / n
    mean_b = sum(rb) / n
    cov = sum((x - mean_a) * (y - mean_b) for x, y in zip(ra, rb))
    var_a = sum((x - mean_a) ** 2 for x in ra)
    var_b = sum((y - mean_b) ** 2 for y in rb)
    if var_a == 0 or var_b == 0:
        raise ValueError("constant ranking has no rank correlation")
    return cov / (var_a * var_b) ** 0.5


# Documented reference point from the judge-vs-human meta-evaluation the
# engine's review panel models; not a computed target.
HUMAN_JUDGE_REFERENCE_CORRELATION = 0.4609
