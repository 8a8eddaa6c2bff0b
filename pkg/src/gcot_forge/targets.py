"""Mining of noun and numeric grounding targets from CoT text.

The extraction grammar is deliberately self-contained (regex + shipped word
lists) rather than delegating to an NLP toolkit, so the same text always
yields the same targets on every machine.
"""

import re
from functools import lru_cache
from importlib import resources

from .model import SubQuestion, Target

ANSWER_MARKER = "*Answer*:"
MAX_TARGETS_PER_COT = 12
MAX_NOUN_RUN_TOKENS = 4
SUB_QUESTION_TEMPLATE = "Where is the {target}?"

CURRENCY_SYMBOLS = "$€£¥"

# A numeric term: optional currency symbol, digits with optional thousands
# separators, optional decimal part, optional % suffix. Guards reject matches
# glued to word characters or embedded in dotted/comma runs.
NUMBER_RE = re.compile(
    r"(?<![\w.,])"
    rf"[{re.escape(CURRENCY_SYMBOLS)}]?"
    r"(?:\d{1,3}(?:,\d{3})+|\d+)"
    r"(?:\.\d+)?"
    r"%?"
    r"(?!\w|\.\d)"
)

_WORD_RE = re.compile(r"[A-Za-z]+")


def _load_wordlist(filename: str) -> frozenset[str]:
    text = resources.files("gcot_forge").joinpath(f"data/{filename}").read_text("utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.casefold())
    return frozenset(words)


@lru_cache(maxsize=None)
def stopwords() -> frozenset[str]:
    return _load_wordlist("stopwords.txt")


@lru_cache(maxsize=None)
def blocklist() -> frozenset[str]:
    return _load_wordlist("blocklist.txt")


def is_noun_token(token: str) -> bool:
    low = token.casefold()
    return len(token) >= 2 and low not in stopwords() and low not in blocklist()


def extract_targets(cot_text: str) -> list[Target]:
    """Lift meaningful noun runs and numeric terms from a CoT.

    Targets come back deduplicated (case-folded surface, first occurrence
    wins) in first-occurrence order, capped at MAX_TARGETS_PER_COT. Only the
    reasoning body is mined: anything at or after the first answer marker is
    the final answer, not a reasoning step, and is skipped.
    """
    marker_at = cot_text.find(ANSWER_MARKER)
    region_end = marker_at if marker_at >= 0 else len(cot_text)

    found: list[Target] = []
    for m in NUMBER_RE.finditer(cot_text, 0, region_end):
        found.append(Target(surface=m.group(), kind="number", span=(m.start(), m.end())))

    tokens = [
        (m.start(), m.end(), m.group())
        for m in _WORD_RE.finditer(cot_text, 0, region_end)
    ]
    run: list[tuple[int, int, str]] = []
    for i, tok in enumerate(tokens):
        adjacent = (
            run
            and cot_text[run[-1][1] : tok[0]].strip() == ""
            and len(run) < MAX_NOUN_RUN_TOKENS
        )
        if is_noun_token(tok[2]):
            if adjacent:
                run.append(tok)
            else:
                if run:
                    found.append(_noun_target(cot_text, run))
                run = [tok]
        else:
            if run:
                found.append(_noun_target(cot_text, run))
            run = []
    if run:
        found.append(_noun_target(cot_text, run))

    found.sort(key=lambda t: t.span)
    seen: set[str] = set()
    targets: list[Target] = []
    for t in found:
        key = t.surface.casefold()
        if key in seen:
            continue
        seen.add(key)
        targets.append(t)
        if len(targets) == MAX_TARGETS_PER_COT:
            break
    return targets


def _noun_target(text: str, run: list[tuple[int, int, str]]) -> Target:
    start, end = run[0][0], run[-1][1]
    return Target(surface=text[start:end], kind="noun", span=(start, end))


def build_sub_questions(targets: list[Target]) -> list[SubQuestion]:
    """One grounding query per target, indexed 1..T in target order."""
    return [
        SubQuestion(
            target=t,
            prompt=SUB_QUESTION_TEMPLATE.format(target=t.surface),
            index_t=i,
        )
        for i, t in enumerate(targets, start=1)
    ]
