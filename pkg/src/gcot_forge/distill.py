"""Initial CoT generation from a third-party backend, plus answer-marker parsing."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import gateway
from .evaluation import answers_equivalent
from .model import CoTRecord, GcotForgeError, QASample
from .targets import ANSWER_MARKER, NUMBER_RE

logger = logging.getLogger(__name__)

DISTILL_PREFIX = "Based on the following question:"

DISTILL_TEMPLATE = (
    DISTILL_PREFIX + " {question} "
    "Your task is to give a explanation for the question. "
    "Give step by step reasoning to get the answer, and when you're ready to "
    "answer, please use the format '*Answer*:'"
)


class MarkerMissing(GcotForgeError):
    """The completion never produced the final-answer marker."""


def build_distill_prompt(sample: QASample) -> str:
    """Distillation prompt with the sample's question substituted verbatim."""
    return DISTILL_TEMPLATE.format(question=sample.question)


@dataclass(frozen=True)
class ParsedAnswer:
    """Answer text after the marker: the raw tail plus its leading numeric token."""

    raw: str
    numeric: str | None

    @property
    def preferred(self) -> str:
        """Numeric token when present, else the raw tail; used for answer checks."""
        return self.numeric if self.numeric is not None else self.raw


def parse_answer_marker(cot_text: str) -> ParsedAnswer:
    """Text following the last answer marker, trimmed.

    Models sometimes restate the marker mid-draft; the final statement
    supersedes earlier ones, so the last occurrence wins. Raises
    MarkerMissing when no marker occurs.
    """
    idx = cot_text.rfind(ANSWER_MARKER)
    if idx < 0:
        raise MarkerMissing(f"no {ANSWER_MARKER!r} in completion")
    raw = cot_text[idx + len(ANSWER_MARKER) :].strip()
    m = NUMBER_RE.match(raw)
    numeric = m.group() if m else None
    return ParsedAnswer(raw=raw, numeric=numeric)


@dataclass(frozen=True)
class DistillFailure:
    sample_id: str
    reason: str


@dataclass(frozen=True)
class DistillResult:
    records: tuple[CoTRecord, ...]
    failures: tuple[DistillFailure, ...]


def _distill_one(sample: QASample, profile: gateway.BackendProfile, model: str) -> CoTRecord:
    with open(sample.image.uri, "rb") as fh:
        image_bytes = fh.read()
    request = gateway.user_request(
        model=model,
        text=build_distill_prompt(sample),
        image=image_bytes,
    )
    cot_text = gateway.complete(profile, request)
    try:
        parsed = parse_answer_marker(cot_text).preferred
    except MarkerMissing:
        parsed = None
    answer_ok = parsed is not None and answers_equivalent(parsed, sample.gold_answer)
    return CoTRecord(
        sample_id=sample.sample_id,
        source_model=model,
        cot_text=cot_text,
        parsed_answer=parsed,
        answer_ok=answer_ok,
    )


def distill(
    samples: list[QASample], profile: gateway.BackendProfile, model: str
) -> DistillResult:
    """Generate one CoT per sample, fanning out up to the profile's in-flight bound.

    Per-sample transport failures never abort the batch; they come back as
    recorded failures. Completions without an answer marker are kept with
    answer_ok=False so target extraction can still mine them.
    """
    if not samples:
        raise GcotForgeError("distill requires a nonempty batch")

    def run(sample: QASample):
        try:
            return _distill_one(sample, profile, model)
        except (gateway.TransportError, gateway.ProtocolError, OSError) as exc:
            logger.warning("distill failed for %s: %s", sample.sample_id, exc)
            return DistillFailure(sample_id=sample.sample_id, reason=str(exc))

    with ThreadPoolExecutor(max_workers=profile.max_in_flight) as pool:
        outcomes = list(pool.map(run, samples))

    records = tuple(o for o in outcomes if isinstance(o, CoTRecord))
    failures = tuple(o for o in outcomes if isinstance(o, DistillFailure))
    return DistillResult(records=records, failures=failures)
