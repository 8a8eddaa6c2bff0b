"""Grounding one sub-question: box proposal, crop, read-back, consistency check."""

import io
import logging
import math
import re
from dataclasses import dataclass

from PIL import Image, UnidentifiedImageError

from . import gateway
from .model import (
    DegenerateBox,
    GcotForgeError,
    ImageRef,
    NBox,
    SubQuestion,
    Target,
    VerifiedBox,
    validate_nbox,
)
from .targets import CURRENCY_SYMBOLS

logger = logging.getLogger(__name__)

GROUND_PROMPT = "Please provide the bounding box coordinate of the region."
READ_PROMPT = "The content in this image is:"

DEFAULT_PAD_FRAC = 0.02
MIN_CROP_PX = 8
NOUN_SIMILARITY_THRESHOLD = 0.9
NUMBER_REL_TOL = 1e-6

# First "[a, b, c, d]" decimal quadruple in a completion.
QUAD_RE = re.compile(
    r"\[\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)"
    r"\s*,\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\]"
)

_EDGE_EPS = 1e-6


class NoBoxInCompletion(GcotForgeError):
    """The grounding completion carried no coordinate quadruple."""


class CropTooSmall(GcotForgeError):
    """The pixel crop is below the readable minimum."""


class ImageDecodeError(GcotForgeError):
    """The image file could not be decoded."""


@dataclass(frozen=True)
class PixelRect:
    x: int
    y: int
    w: int
    h: int


def parse_first_box(completion: str) -> NBox:
    """First coordinate quadruple in the text, clamped and validated."""
    m = QUAD_RE.search(completion)
    if m is None:
        raise NoBoxInCompletion(f"no quadruple in completion {completion[:80]!r}")
    return validate_nbox(*(float(g) for g in m.groups()))


def request_box(
    subq: SubQuestion,
    image: ImageRef,
    profile: gateway.BackendProfile,
    model: str,
) -> NBox:
    """Ask the backend where the sub-question's target is."""
    with open(image.uri, "rb") as fh:
        image_bytes = fh.read()
    request = gateway.user_request(
        model=model,
        text=f"{subq.prompt} {GROUND_PROMPT}",
        image=image_bytes,
    )
    return parse_first_box(gateway.complete(profile, request))


def to_pixel_rect(box: NBox, image: ImageRef, pad_frac: float = DEFAULT_PAD_FRAC) -> PixelRect:
    """Expand the box by pad_frac per side, clamp, and convert to pixels.

    Left/top edges floor, right/bottom edges ceil, so the crop never loses
    covered pixels to rounding. A 2% pad survives slightly offset boxes
    without pulling in neighbouring cells.
    """
    if not 0.0 <= pad_frac <= 0.1:
        raise GcotForgeError(f"pad_frac {pad_frac} outside [0, 0.1]")
    x1 = max(0.0, box.x1 - pad_frac)
    y1 = max(0.0, box.y1 - pad_frac)
    x2 = min(1.0, box.x2 + pad_frac)
    y2 = min(1.0, box.y2 + pad_frac)
    w_px, h_px = image.width_px, image.height_px
    left = math.floor(x1 * w_px + _EDGE_EPS)
    top = math.floor(y1 * h_px + _EDGE_EPS)
    right = math.ceil(x2 * w_px - _EDGE_EPS)
    bottom = math.ceil(y2 * h_px - _EDGE_EPS)
    left, top = max(0, left), max(0, top)
    right, bottom = min(w_px, right), min(h_px, bottom)
    w, h = right - left, bottom - top
    if w < MIN_CROP_PX or h < MIN_CROP_PX:
        raise CropTooSmall(f"crop {w}x{h} below {MIN_CROP_PX}px minimum")
    return PixelRect(x=left, y=top, w=w, h=h)


def crop_png_bytes(rect: PixelRect, image: ImageRef) -> bytes:
    """Crop the rect out of the image file and re-encode as PNG."""
    try:
        with Image.open(image.uri) as img:
            crop = img.convert("RGB").crop(
                (rect.x, rect.y, rect.x + rect.w, rect.y + rect.h)
            )
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"{image.uri}: {exc}") from exc
    buf = io.BytesIO()
    crop.save(buf, format="PNG")
    return buf.getvalue()


def read_crop(
    rect: PixelRect,
    image: ImageRef,
    profile: gateway.BackendProfile,
    model: str,
) -> str:
    """Send the isolated region back to the model and return what it reads."""
    request = gateway.user_request(
        model=model,
        text=READ_PROMPT,
        image=crop_png_bytes(rect, image),
    )
    return gateway.complete(profile, request)


def strip_number_formatting(text: str) -> str:
    out = text.strip()
    for sym in CURRENCY_SYMBOLS + ",%":
        out = out.replace(sym, "")
    return out.strip()


def parse_number(text: str) -> float | None:
    try:
        value = float(strip_number_formatting(text))
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def numbers_equal(a: str, b: str, rel_tol: float = NUMBER_REL_TOL) -> bool:
    va, vb = parse_number(a), parse_number(b)
    if va is None or vb is None:
        return False
    return abs(va - vb) <= rel_tol * max(abs(va), abs(vb), 1e-12)


def _content_tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.casefold())


def edit_similarity(a: str, b: str) -> float:
    """1 - levenshtein/max_len; 1.0 means identical."""
    if a == b:
        return 1.0
    if not a or not b:
        return 0.0
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return 1.0 - prev[-1] / max(len(a), len(b))


def _is_subsequence(needle: list[str], haystack: list[str]) -> bool:
    n = len(needle)
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def check_consistency(target: Target, read_content: str) -> str:
    """Compare read-back content to the target: match, mismatch, or unreadable.

    Numbers compare as decimals after stripping currency/thousands/% noise.
    Nouns compare as case-folded token sequences, with an edit-similarity
    fallback for OCR-ish casing and pluralization drift.
    """
    if not read_content.strip():
        return "unreadable"
    if target.kind == "number":
        return "match" if numbers_equal(target.surface, read_content) else "mismatch"
    t_tokens = _content_tokens(target.surface)
    c_tokens = _content_tokens(read_content)
    if t_tokens and _is_subsequence(t_tokens, c_tokens):
        return "match"
    sim = edit_similarity(" ".join(t_tokens), " ".join(c_tokens))
    return "match" if sim >= NOUN_SIMILARITY_THRESHOLD else "mismatch"


def ground_one(
    subq: SubQuestion,
    image: ImageRef,
    profile: gateway.BackendProfile,
    model: str,
    iteration: int,
    pad_frac: float = DEFAULT_PAD_FRAC,
) -> VerifiedBox:
    """Run the full self-verification atom for one sub-question.

    Step failures fold into the verdict instead of raising: a box that cannot
    be obtained or read is information about the proposal, not a pipeline
    fault. Only match verdicts ever enter the verified set.
    """
    box: NBox | None = None
    content = ""
    try:
        box = request_box(subq, image, profile, model)
        rect = to_pixel_rect(box, image, pad_frac)
        content = read_crop(rect, image, profile, model)
        verdict = check_consistency(subq.target, content)
    except (
        NoBoxInCompletion,
        DegenerateBox,
        CropTooSmall,
        ImageDecodeError,
        gateway.TransportError,
        gateway.ProtocolError,
    ) as exc:
        logger.debug("grounding %r folded to unreadable: %s", subq.prompt, exc)
        verdict = "unreadable"
    return VerifiedBox(
        sub_question=subq,
        box=box,
        read_content=content,
        verdict=verdict,
        iteration=iteration,
    )
