"""GCoT assembly: box injection, self-generated candidates, verified selection."""

import logging
import re
from dataclasses import dataclass, replace

from . import gateway
from .distill import MarkerMissing, build_distill_prompt, parse_answer_marker
from .evaluation import answers_equivalent
from .grounding import (
    DEFAULT_PAD_FRAC,
    CropTooSmall,
    ImageDecodeError,
    check_consistency,
    read_crop,
    to_pixel_rect,
)
from .model import (
    CoTRecord,
    DegenerateBox,
    GcotForgeError,
    GCoTRecord,
    NBox,
    QASample,
    Target,
    VerifiedBox,
    validate_nbox,
)
from .targets import NUMBER_RE, _WORD_RE, MAX_NOUN_RUN_TOKENS, is_noun_token

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = 8
DEFAULT_MAX_KEEP = 3
GCOT_TEMPERATURE = 0.8

GCOT_INSTRUCTION = (
    "While reasoning, annotate each key item and value with its bounding box "
    "coordinates in the form [x1, y1, x2, y2]."
)

# A coordinate annotation as it appears in GCoT text, with the space the
# injector put in front of it.
ANNOTATION_RE = re.compile(
    r" ?\[\s*\d+(?:\.\d+)?\s*,\s*\d+(?:\.\d+)?"
    r"\s*,\s*\d+(?:\.\d+)?\s*,\s*\d+(?:\.\d+)?\s*\]"
)


class SpanDrift(GcotForgeError):
    """A target span no longer matches its surface in the CoT text."""


def inject_boxes(cot: CoTRecord, verified: list[VerifiedBox]) -> GCoTRecord:
    """Append each verified box's coordinates right after its target.

    Insertions run right-to-left by span so earlier offsets stay valid.
    Only match-verdict boxes may be injected.
    """
    for vb in verified:
        if vb.verdict != "match" or vb.box is None:
            raise GcotForgeError(
                f"refusing to inject non-match box for {vb.sub_question.prompt!r}"
            )
    pairs = sorted(
        ((vb.sub_question.target, vb.box) for vb in verified),
        key=lambda p: p[0].span,
    )
    text = cot.cot_text
    for target, box in reversed(pairs):
        start, end = target.span
        if text[start:end] != target.surface:
            raise SpanDrift(
                f"span {target.span} holds {text[start:end]!r}, "
                f"expected {target.surface!r}"
            )
        text = text[:end] + f" {box.render()}" + text[end:]
    return GCoTRecord(
        sample_id=cot.sample_id,
        gcot_text=text,
        boxes=tuple(pairs),
        parsed_answer=cot.parsed_answer,
        answer_ok=cot.answer_ok,
        boxes_ok=True,
        origin="assembled",
    )


def strip_annotations(text: str) -> str:
    """Delete every coordinate annotation; inverts inject_boxes exactly."""
    return ANNOTATION_RE.sub("", text)


@dataclass(frozen=True)
class GCoTParse:
    """Decomposition of GCoT text into plain CoT plus (target, box) pairs."""

    stripped: str
    pairs: tuple[tuple[Target | None, NBox | None], ...]

    @property
    def n_annotations(self) -> int:
        return len(self.pairs)


def _target_ending_at(prefix: str) -> Target | None:
    """The number or noun run ending exactly at the end of ``prefix``."""
    last_num = None
    for m in NUMBER_RE.finditer(prefix):
        last_num = m
    if last_num is not None and last_num.end() == len(prefix):
        return Target(
            surface=last_num.group(), kind="number", span=(last_num.start(), last_num.end())
        )
    tokens = [(m.start(), m.end(), m.group()) for m in _WORD_RE.finditer(prefix)]
    run: list[tuple[int, int, str]] = []
    for tok in reversed(tokens):
        if not is_noun_token(tok[2]):
            break
        if run and prefix[tok[1] : run[0][0]].strip() != "":
            break
        run.insert(0, tok)
        if len(run) == MAX_NOUN_RUN_TOKENS:
            break
    if not run or run[-1][1] != len(prefix):
        return None
    start = run[0][0]
    return Target(surface=prefix[start:], kind="noun", span=(start, len(prefix)))


def parse_gcot(text: str) -> GCoTParse:
    """Split GCoT text into its plain CoT and the annotated (target, box) pairs.

    A pair's target or box is None when the annotation is unattached or the
    quadruple is degenerate; such annotations can never re-verify.
    """
    pieces: list[str] = []
    pairs: list[tuple[Target | None, NBox | None]] = []
    cursor = 0
    for m in ANNOTATION_RE.finditer(text):
        pieces.append(text[cursor : m.start()])
        cursor = m.end()
        prefix = "".join(pieces)
        try:
            box: NBox | None = validate_nbox(
                *(float(v) for v in re.findall(r"\d+(?:\.\d+)?", m.group()))
            )
        except DegenerateBox:
            box = None
        pairs.append((_target_ending_at(prefix), box))
    pieces.append(text[cursor:])
    return GCoTParse(stripped="".join(pieces), pairs=tuple(pairs))


def generate_candidates(
    sample: QASample,
    profile: gateway.BackendProfile,
    model: str,
    k: int = DEFAULT_CANDIDATES,
    temperature: float = GCOT_TEMPERATURE,
) -> list[GCoTRecord]:
    """Sample k self-generated GCoT candidates for one question.

    Calls run sequentially per sample so sampling backends see a stable
    per-question stream; parallelism belongs across samples. Transport
    failures skip the candidate, never the batch.
    """
    if k < 1:
        raise GcotForgeError("k must be >= 1")
    with open(sample.image.uri, "rb") as fh:
        image_bytes = fh.read()
    prompt = f"{build_distill_prompt(sample)} {GCOT_INSTRUCTION}"
    candidates = []
    for i in range(k):
        request = gateway.user_request(
            model=model, text=prompt, image=image_bytes, temperature=temperature
        )
        try:
            text = gateway.complete(profile, request)
        except (gateway.TransportError, gateway.ProtocolError) as exc:
            logger.warning("candidate %d for %s skipped: %s", i, sample.sample_id, exc)
            continue
        try:
            parsed = parse_answer_marker(text).preferred
        except MarkerMissing:
            parsed = None
        answer_ok = parsed is not None and answers_equivalent(parsed, sample.gold_answer)
        parse = parse_gcot(text)
        boxes = tuple(
            (t, b) for t, b in parse.pairs if t is not None and b is not None
        )
        candidates.append(
            GCoTRecord(
                sample_id=sample.sample_id,
                gcot_text=text,
                boxes=boxes,
                parsed_answer=parsed,
                answer_ok=answer_ok,
                boxes_ok=False,
                origin="self_generated",
            )
        )
    return candidates


def _boxes_reverify(
    record: GCoTRecord,
    sample: QASample,
    profile: gateway.BackendProfile,
    model: str,
    pad_frac: float,
) -> bool:
    """True iff every annotation in the record's text re-verifies on its crop."""
    parse = parse_gcot(record.gcot_text)
    for target, box in parse.pairs:
        if target is None or box is None:
            return False
        try:
            rect = to_pixel_rect(box, sample.image, pad_frac)
            content = read_crop(rect, sample.image, profile, model)
        except (CropTooSmall, ImageDecodeError, gateway.TransportError, gateway.ProtocolError):
            return False
        if check_consistency(target, content) != "match":
            return False
    return True


def verify_and_select(
    candidates: list[GCoTRecord],
    sample: QASample,
    profile: gateway.BackendProfile,
    model: str,
    max_keep: int = DEFAULT_MAX_KEEP,
    pad_frac: float = DEFAULT_PAD_FRAC,
) -> list[GCoTRecord]:
    """Keep the first max_keep candidates whose answer and boxes all verify.

    A candidate passes only if its parsed answer matches gold and every
    embedded box re-verifies through the crop-read-match path. Fewer than
    max_keep passing candidates is a recorded shortfall, not an error.
    """
    kept: list[GCoTRecord] = []
    for cand in candidates:
        if len(kept) == max_keep:
            break
        if not cand.answer_ok:
            continue
        if _boxes_reverify(cand, sample, profile, model, pad_frac):
            kept.append(replace(cand, boxes_ok=True))
    if len(kept) < max_keep:
        logger.warning(
            "sample %s: only %d of %d requested verified GCoTs (shortfall %d)",
            sample.sample_id,
            len(kept),
            max_keep,
            max_keep - len(kept),
        )
    return kept
