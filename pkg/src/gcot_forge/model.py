"""Shared domain types for the grounded chain-of-thought pipeline."""

import math
from dataclasses import dataclass

MIN_BOX_AREA = 1e-6

#: Canonical dataset tags. "generic" marks samples ingested through the
#: pass-through adapter rather than a named benchmark.
KNOWN_DATASET_TAGS = frozenset(
    {"chartqa", "tabmwp", "sroie", "dvqa", "tatqa", "synth", "generic"}
)

TARGET_KINDS = ("noun", "number")
VERDICTS = ("match", "mismatch", "unreadable")
GCOT_ORIGINS = ("assembled", "self_generated")
MANIFEST_TASKS = ("grounding", "gcot")


class GcotForgeError(Exception):
    """Base class for every error raised by this package."""


class InvariantViolation(GcotForgeError):
    """A domain value was constructed with fields that break its contract."""


class DegenerateBox(GcotForgeError):
    """A candidate box collapses to zero/negative extent after clamping."""


@dataclass(frozen=True)
class ImageRef:
    id: str
    uri: str
    width_px: int
    height_px: int

    def __post_init__(self):
        if not self.id:
            raise InvariantViolation("image id must be nonempty")
        if self.width_px < 1 or self.height_px < 1:
            raise InvariantViolation(
                f"image {self.id}: dimensions must be >= 1, "
                f"got {self.width_px}x{self.height_px}"
            )


@dataclass(frozen=True)
class QASample:
    """One image + question + gold answer from a source dataset."""

    sample_id: str
    image: ImageRef
    question: str
    gold_answer: str
    dataset: str

    def __post_init__(self):
        if not self.sample_id:
            raise InvariantViolation("sample_id must be nonempty")
        if not self.question.strip():
            raise InvariantViolation(f"sample {self.sample_id}: question is empty")
        if not self.gold_answer.strip():
            raise InvariantViolation(f"sample {self.sample_id}: gold_answer is empty")
        if self.dataset not in KNOWN_DATASET_TAGS:
            raise InvariantViolation(
                f"sample {self.sample_id}: unknown dataset tag {self.dataset!r}"
            )


@dataclass(frozen=True)
class CoTRecord:
    """Distilled reasoning text with its parsed final answer."""

    sample_id: str
    source_model: str
    cot_text: str
    parsed_answer: str | None
    answer_ok: bool

    def __post_init__(self):
        if self.answer_ok and self.parsed_answer is None:
            raise InvariantViolation(
                f"cot {self.sample_id}: answer_ok requires a parsed answer"
            )


@dataclass(frozen=True)
class Target:
    """A noun or numeric term lifted from a CoT, with its character span."""

    surface: str
    kind: str
    span: tuple[int, int]

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise InvariantViolation(f"bad target kind {self.kind!r}")
        start, end = self.span
        if not (0 <= start < end):
            raise InvariantViolation(f"bad target span {self.span!r}")
        if end - start != len(self.surface):
            raise InvariantViolation(
                f"span {self.span!r} does not cover surface {self.surface!r}"
            )


@dataclass(frozen=True)
class SubQuestion:
    """The grounding query built from one target, 1-indexed within its CoT."""

    target: Target
    prompt: str
    index_t: int

    def __post_init__(self):
        if self.index_t < 1:
            raise InvariantViolation("index_t must be >= 1")


@dataclass(frozen=True)
class NBox:
    """Normalized [x_min, y_min, x_max, y_max] box, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise DegenerateBox(f"non-finite coordinate {v!r}")
            if not 0.0 <= v <= 1.0:
                raise DegenerateBox(f"coordinate {v!r} outside [0, 1]")
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise DegenerateBox(
                f"empty extent [{self.x1}, {self.y1}, {self.x2}, {self.y2}]"
            )
        if self.area < MIN_BOX_AREA:
            raise DegenerateBox(f"area {self.area:.2e} below {MIN_BOX_AREA:.0e}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def render(self) -> str:
        """Coordinate string as it appears in GCoT text, 3 decimal places."""
        return f"[{self.x1:.3f}, {self.y1:.3f}, {self.x2:.3f}, {self.y2:.3f}]"


def validate_nbox(x1: float, y1: float, x2: float, y2: float) -> NBox:
    """Clamp raw coordinates into [0, 1] and build an NBox.

    Clamp-then-validate: generative backends routinely emit values a hair
    outside the unit square, and rejecting those would discard usable boxes.
    Raises DegenerateBox when the clamped box has no usable extent.
    """
    for v in (x1, y1, x2, y2):
        if not math.isfinite(v):
            raise DegenerateBox(f"non-finite coordinate {v!r}")
    x1, y1, x2, y2 = (min(1.0, max(0.0, v)) for v in (x1, y1, x2, y2))
    return NBox(x1, y1, x2, y2)


@dataclass(frozen=True)
class VerifiedBox:
    """Outcome of grounding one sub-question: box, read-back content, verdict.

    box is None when no parseable box came back; such entries can never carry
    a match verdict. Only verdict == "match" boxes enter the verified set.
    """

    sub_question: SubQuestion
    box: NBox | None
    read_content: str
    verdict: str
    iteration: int

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise InvariantViolation(f"bad verdict {self.verdict!r}")
        if self.iteration < 1:
            raise InvariantViolation("iteration must be >= 1")
        if self.verdict == "match" and self.box is None:
            raise InvariantViolation("match verdict requires a box")


@dataclass(frozen=True)
class GCoTRecord:
    """CoT text with verified coordinates injected after their targets."""

    sample_id: str
    gcot_text: str
    boxes: tuple[tuple[Target, NBox], ...]
    parsed_answer: str | None
    answer_ok: bool
    boxes_ok: bool
    origin: str

    def __post_init__(self):
        if self.origin not in GCOT_ORIGINS:
            raise InvariantViolation(f"bad origin {self.origin!r}")


@dataclass(frozen=True)
class TrainingManifest:
    """Hyperparameters and data location handed to the trainer contract."""

    task: str
    records_uri: str
    base_model: str
    lora_rank: int = 16
    lora_alpha: int = 32
    learning_rate: float = 2e-4
    epochs: int = 1

    def __post_init__(self):
        if self.task not in MANIFEST_TASKS:
            raise InvariantViolation(f"bad manifest task {self.task!r}")


@dataclass(frozen=True)
class EvalReport:
    """Per-sample-size accuracy report over several sampling seeds."""

    sample_size: int
    seeds: tuple[int, ...]
    per_seed_accuracy: tuple[float, ...]
    mean: float
    std: float

    def __post_init__(self):
        if len(self.seeds) != len(self.per_seed_accuracy):
            raise InvariantViolation("one accuracy value required per seed")

    @classmethod
    def from_accuracies(
        cls, sample_size: int, seeds: list[int], accuracies: list[float]
    ) -> "EvalReport":
        """Build a report, computing mean and population standard deviation."""
        if len(seeds) != len(accuracies):
            raise InvariantViolation("one accuracy value required per seed")
        n = len(accuracies)
        mean = sum(accuracies) / n
        var = sum((a - mean) ** 2 for a in accuracies) / n
        return cls(
            sample_size=sample_size,
            seeds=tuple(seeds),
            per_seed_accuracy=tuple(accuracies),
            mean=mean,
            std=math.sqrt(var),
        )
