"""Deterministic synthetic price tables and the scripted oracle backend.

Each world image is a two-column item/price table. Every cell is flood-filled
with a color that uniquely encodes (image, cell), and its text uses a second
color from the same encoding, so any crop of a world image can be attributed
to cells by counting pixels: the oracle's read answer is exactly the cell with
maximal pixel overlap. Ground truth never depends on font metrics.
"""

import hashlib
import io
import json
import logging
import random
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

from .assemble import GCOT_INSTRUCTION
from .distill import DISTILL_PREFIX
from .grounding import GROUND_PROMPT, READ_PROMPT, numbers_equal, parse_number
from .gateway import ChatRequest
from .model import GcotForgeError, ImageRef, InvariantViolation, NBox, QASample

logger = logging.getLogger(__name__)

IMG_WIDTH = 640
IMG_HEIGHT = 480
_NAME_COL = (32, 288)
_PRICE_COL = (352, 608)
_TOP_MARGIN = 40
_USABLE_H = 400
_ROW_GAP = 28  # 0.058 of height, above the 0.05 cell-gap floor

MAX_ITEMS_PER_IMAGE = 8
MAX_IMAGES = 100

GCOT_MIX_KINDS = ("good", "bad_answer", "bad_box", "no_marker")

REFUSAL_TEXT = "I cannot find it in the image."

_ADJECTIVES = (
    "amber", "azure", "beige", "black", "blue", "bronze", "brown", "copper",
    "coral", "crimson", "emerald", "golden", "gray", "green", "indigo",
    "ivory", "jade", "lavender", "magenta", "maroon", "olive", "orange",
    "pink", "purple", "red", "russet", "scarlet", "silver", "teal", "violet",
)
_NOUNS = (
    "basket", "beaker", "bottle", "bowl", "brush", "bucket", "candle",
    "canister", "crate", "cup", "flask", "funnel", "goblet", "hammer", "jar",
    "jug", "kettle", "ladle", "lantern", "mug", "pitcher", "plate", "platter",
    "pouch", "saucer", "scoop", "skillet", "spatula", "teapot", "tray",
)

_COT_BODY = (
    "To answer, look at the listed prices. "
    "The price of {n1} is {p1} per item. "
    "The price of {n2} is {p2} per item. "
    "Adding the two prices gives the result."
)

QUESTION_TEMPLATE = "How much do the {n1} and the {n2} cost together?"

_SUBQ_RE = re.compile(r"Where is the (.*?)\?")
_QUESTION_RE = re.compile(r"Based on the following question: (.*?) Your task is to")
_MODEL_IT_RE = re.compile(r"/it(\d+)$")


class UnclassifiablePrompt(GcotForgeError):
    """The oracle received a prompt that matches no pipeline template."""


@dataclass(frozen=True)
class WorldCell:
    id: str
    kind: str  # name | price
    text: str
    box: NBox
    fill_rgb: tuple[int, int, int]
    text_rgb: tuple[int, int, int]


@dataclass(frozen=True)
class WorldImage:
    ref: ImageRef
    cells: tuple[WorldCell, ...]
    sha256: str


@dataclass(frozen=True)
class WorldQA:
    sample: QASample
    items: tuple[tuple[str, str], ...]  # (name, price string) per asked item


@dataclass
class SynthWorld:
    seed: int
    images: tuple[WorldImage, ...]
    qa: tuple[WorldQA, ...]
    _by_id: dict = field(init=False, repr=False)
    _by_hash: dict = field(init=False, repr=False)
    _by_question: dict = field(init=False, repr=False)
    _by_color: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {wi.ref.id: wi for wi in self.images}
        self._by_hash = {wi.sha256: wi for wi in self.images}
        self._by_question = {wq.sample.question: wq for wq in self.qa}
        self._by_color = {}
        for wi in self.images:
            for cell in wi.cells:
                self._by_color[cell.fill_rgb] = (wi.ref.id, cell.id)
                self._by_color[cell.text_rgb] = (wi.ref.id, cell.id)

    def image(self, image_id: str) -> WorldImage:
        return self._by_id[image_id]

    def image_by_bytes(self, data: bytes) -> WorldImage | None:
        return self._by_hash.get(hashlib.sha256(data).hexdigest())

    def qa_by_question(self, question: str) -> WorldQA | None:
        return self._by_question.get(question)

    def cell_for_color(self, rgb: tuple[int, int, int]) -> tuple[str, str] | None:
        return self._by_color.get(rgb)

    def samples(self) -> list[QASample]:
        return [wq.sample for wq in self.qa]


@dataclass(frozen=True)
class OraclePolicy:
    """Error model for the scripted oracle; all draws are keyed off the seed.

    recall_schedule[k] is the chance a grounding query is answered with the
    true box after k training rounds; off-schedule rounds reuse the last
    entry. Recall-rejected queries return a displaced (wrong-cell) box with
    probability box_jitter_rate, else a refusal. gcot_mix cycles through
    candidate kinds for GCoT generation requests, per question.
    """

    recall_schedule: tuple[float, ...] = (1.0,)
    box_jitter_rate: float = 0.0
    wrong_content_rate: float = 0.0
    seed: int = 0
    gcot_mix: tuple[str, ...] = ("good",)

    def __post_init__(self):
        if not self.recall_schedule:
            raise InvariantViolation("recall_schedule must be nonempty")
        for f in (*self.recall_schedule, self.box_jitter_rate, self.wrong_content_rate):
            if not 0.0 <= f <= 1.0:
                raise InvariantViolation(f"policy fraction {f} outside [0, 1]")
        for kind in self.gcot_mix:
            if kind not in GCOT_MIX_KINDS:
                raise InvariantViolation(f"unknown gcot mix kind {kind!r}")


def seeded_draw(seed: int, *parts: object) -> float:
    """Uniform [0, 1) draw, a pure function of (seed, parts)."""
    key = "\x1f".join(str(p) for p in (seed, *parts))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def surface_key(surface: str) -> str:
    return surface.strip().casefold()


def model_trainings(model: str) -> int:
    """Training rounds encoded in a model identifier ("…/itN"), 0 if absent."""
    m = _MODEL_IT_RE.search(model)
    return int(m.group(1)) if m else 0


def recall_admitted(policy: OraclePolicy, image_id: str, surface: str, trainings: int) -> bool:
    rate = policy.recall_schedule[min(trainings, len(policy.recall_schedule) - 1)]
    return seeded_draw(policy.seed, "recall", image_id, surface_key(surface), trainings) < rate


def jitter_drawn(policy: OraclePolicy, image_id: str, surface: str, trainings: int) -> bool:
    draw = seeded_draw(policy.seed, "jitter", image_id, surface_key(surface), trainings)
    return draw < policy.box_jitter_rate


def read_corrupted(policy: OraclePolicy, image_id: str, cell_id: str, trainings: int) -> bool:
    draw = seeded_draw(policy.seed, "read", image_id, cell_id, trainings)
    return draw < policy.wrong_content_rate


def corrupt_text(text: str) -> str:
    return f"§{text[::-1]}§"


def price_string(cents: int) -> str:
    return f"${cents // 100}.{cents % 100:02d}"


def answer_string(cents: int) -> str:
    return f"{cents // 100}.{cents % 100:02d}"


def cot_body(qa: WorldQA) -> str:
    (n1, p1), (n2, p2) = qa.items
    return _COT_BODY.format(n1=n1, p1=p1, n2=n2, p2=p2)


def _cell_fill(image_idx: int, cell_idx: int) -> tuple[int, int, int]:
    return (200 + 3 * cell_idx, 150 + image_idx, 255)


def _cell_text_color(image_idx: int, cell_idx: int) -> tuple[int, int, int]:
    return (80 + 3 * cell_idx, 50 + image_idx, 55)


def _font():
    # Embedded fixed-metric bitmap font: identical pixels on every install.
    try:
        return ImageFont.load_default_imagefont()
    except AttributeError:  # Pillow < 9.2
        return ImageFont.load_default()


def generate_world(
    seed: int,
    n_images: int,
    items_per_image: int,
    out_dir: str | Path,
    qa_per_image: int = 1,
) -> SynthWorld:
    """Render a seeded world of price tables and write images + manifest.

    Identical arguments produce byte-identical PNGs and manifest. Cell boxes
    are pairwise separated by at least 0.05 of the image dimension, item
    names are unique across the world, and prices are unique per image, so
    every read-back has exactly one consistent answer.
    """
    if n_images < 1 or n_images > MAX_IMAGES:
        raise GcotForgeError(f"n_images must be in 1..{MAX_IMAGES}")
    if items_per_image < 2 or items_per_image > MAX_ITEMS_PER_IMAGE:
        raise GcotForgeError(f"items_per_image must be in 2..{MAX_ITEMS_PER_IMAGE}")
    max_qa = items_per_image * (items_per_image - 1)
    if not 1 <= qa_per_image <= max_qa:
        raise GcotForgeError(f"qa_per_image must be in 1..{max_qa} for distinct questions")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    all_names = [f"{a} {n}" for a in _ADJECTIVES for n in _NOUNS]
    names = rng.sample(all_names, n_images * items_per_image)
    font = _font()

    pitch = _USABLE_H // items_per_image
    cell_h = pitch - _ROW_GAP

    images: list[WorldImage] = []
    qa: list[WorldQA] = []
    for img_idx in range(n_images):
        image_id = f"img{img_idx:03d}"
        item_names = names[img_idx * items_per_image : (img_idx + 1) * items_per_image]
        prices = rng.sample(range(50, 1000), items_per_image)

        img = Image.new("RGB", (IMG_WIDTH, IMG_HEIGHT), (255, 255, 255))
        draw = ImageDraw.Draw(img)
        cells: list[WorldCell] = []
        for row in range(items_per_image):
            y1 = _TOP_MARGIN + row * pitch
            y2 = y1 + cell_h
            row_cells = (
                ("name", item_names[row], _NAME_COL),
                ("price", price_string(prices[row]), _PRICE_COL),
            )
            for kind, text, (x1, x2) in row_cells:
                cell_idx = len(cells)
                fill = _cell_fill(img_idx, cell_idx)
                text_rgb = _cell_text_color(img_idx, cell_idx)
                draw.rectangle((x1, y1, x2 - 1, y2 - 1), fill=fill)
                tw = draw.textlength(text, font=font)
                if tw > (x2 - x1) - 16:
                    raise GcotForgeError(f"cell text {text!r} does not fit")
                tb = font.getbbox(text)
                ty = y1 + (cell_h - (tb[3] - tb[1])) // 2 - tb[1]
                draw.text((x1 + 8, ty), text, fill=text_rgb, font=font)
                cells.append(
                    WorldCell(
                        id=f"c{cell_idx:02d}",
                        kind=kind,
                        text=text,
                        box=NBox(x1 / IMG_WIDTH, y1 / IMG_HEIGHT, x2 / IMG_WIDTH, y2 / IMG_HEIGHT),
                        fill_rgb=fill,
                        text_rgb=text_rgb,
                    )
                )

        uri = out_dir / "images" / f"{image_id}.png"
        img.save(uri, format="PNG")
        digest = hashlib.sha256(uri.read_bytes()).hexdigest()
        ref = ImageRef(id=image_id, uri=str(uri), width_px=IMG_WIDTH, height_px=IMG_HEIGHT)
        world_image = WorldImage(ref=ref, cells=tuple(cells), sha256=digest)
        images.append(world_image)

        pair_pool = [
            (i, j)
            for i in range(items_per_image)
            for j in range(items_per_image)
            if i != j
        ]
        for q_idx, (i, j) in enumerate(rng.sample(pair_pool, qa_per_image)):
            n1, n2 = item_names[i], item_names[j]
            gold = answer_string(prices[i] + prices[j])
            sample = QASample(
                sample_id=f"{image_id}-q{q_idx}",
                image=ref,
                question=QUESTION_TEMPLATE.format(n1=n1, n2=n2),
                gold_answer=gold,
                dataset="synth",
            )
            qa.append(
                WorldQA(
                    sample=sample,
                    items=(
                        (n1, price_string(prices[i])),
                        (n2, price_string(prices[j])),
                    ),
                )
            )

    world = SynthWorld(seed=seed, images=tuple(images), qa=tuple(qa))
    write_manifest(world, out_dir / "manifest.json")
    return world


def write_manifest(world: SynthWorld, path: str | Path) -> None:
    path = Path(path)
    base = path.parent
    payload = {
        "schema": "v1",
        "kind": "synth_world",
        "seed": world.seed,
        "images": [
            {
                "id": wi.ref.id,
                "file": str(Path(wi.ref.uri).relative_to(base))
                if Path(wi.ref.uri).is_relative_to(base)
                else wi.ref.uri,
                "width_px": wi.ref.width_px,
                "height_px": wi.ref.height_px,
                "sha256": wi.sha256,
                "cells": [
                    {
                        "id": c.id,
                        "kind": c.kind,
                        "text": c.text,
                        "box": [c.box.x1, c.box.y1, c.box.x2, c.box.y2],
                        "fill_rgb": list(c.fill_rgb),
                        "text_rgb": list(c.text_rgb),
                    }
                    for c in wi.cells
                ],
            }
            for wi in world.images
        ],
        "qa": [
            {
                "sample_id": wq.sample.sample_id,
                "image_id": wq.sample.image.id,
                "question": wq.sample.question,
                "answer": wq.sample.gold_answer,
                "items": [{"name": n, "price": p} for n, p in wq.items],
            }
            for wq in world.qa
        ],
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8")
    tmp.replace(path)


def load_world(manifest_path: str | Path) -> SynthWorld:
    """Rebuild a SynthWorld from its manifest, re-hashing the image files."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    payload = json.loads(manifest_path.read_text("utf-8"))
    if payload.get("kind") != "synth_world":
        raise GcotForgeError(f"{manifest_path} is not a synth world manifest")
    images = []
    refs = {}
    for entry in payload["images"]:
        uri = Path(entry["file"])
        if not uri.is_absolute():
            uri = base / uri
        if not uri.exists():
            raise GcotForgeError(f"world image missing: {uri}")
        digest = hashlib.sha256(uri.read_bytes()).hexdigest()
        if digest != entry["sha256"]:
            raise GcotForgeError(f"world image changed on disk: {uri}")
        ref = ImageRef(
            id=entry["id"],
            uri=str(uri),
            width_px=entry["width_px"],
            height_px=entry["height_px"],
        )
        refs[entry["id"]] = ref
        images.append(
            WorldImage(
                ref=ref,
                cells=tuple(
                    WorldCell(
                        id=c["id"],
                        kind=c["kind"],
                        text=c["text"],
                        box=NBox(*c["box"]),
                        fill_rgb=tuple(c["fill_rgb"]),
                        text_rgb=tuple(c["text_rgb"]),
                    )
                    for c in entry["cells"]
                ),
                sha256=digest,
            )
        )
    qa = tuple(
        WorldQA(
            sample=QASample(
                sample_id=entry["sample_id"],
                image=refs[entry["image_id"]],
                question=entry["question"],
                gold_answer=entry["answer"],
                dataset="synth",
            ),
            items=tuple((it["name"], it["price"]) for it in entry["items"]),
        )
        for entry in payload["qa"]
    )
    return SynthWorld(seed=payload["seed"], images=tuple(images), qa=qa)


def match_cell(image: WorldImage, surface: str) -> WorldCell | None:
    """The cell whose text the target surface denotes, if any."""
    if parse_number(surface) is not None:
        for cell in image.cells:
            if cell.kind == "price" and numbers_equal(surface, cell.text):
                return cell
    else:
        want = surface_key(surface)
        for cell in image.cells:
            if cell.kind == "name" and surface_key(cell.text) == want:
                return cell
    return None


class ScriptedOracle:
    """Deterministic stand-in backend answering the pipeline's four prompts.

    Everything is a pure function of (world, policy, request) except GCoT
    generation, which cycles policy.gcot_mix per question so repeated
    sampling at temperature > 0 yields a scripted mix of candidate quality.
    """

    def __init__(self, world: SynthWorld, policy: OraclePolicy):
        self.world = world
        self.policy = policy
        self._gen_counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def __call__(self, request: ChatRequest) -> str:
        text = request.text()
        if GROUND_PROMPT in text:
            return self._ground(request, text)
        if READ_PROMPT in text:
            return self._read(request)
        if GCOT_INSTRUCTION in text:
            return self._generate(request, text)
        if DISTILL_PREFIX in text:
            return self._distill(text)
        raise UnclassifiablePrompt(f"cannot classify prompt {text[:80]!r}")

    def _image_for_request(self, request: ChatRequest) -> WorldImage:
        data = request.image_bytes()
        if data is None:
            raise UnclassifiablePrompt("grounding/read request carries no image")
        found = self.world.image_by_bytes(data)
        if found is not None:
            return found
        # Re-encoded image: fall back to the color fingerprint.
        with Image.open(io.BytesIO(data)) as img:
            colors = img.convert("RGB").getcolors(img.width * img.height) or []
        for _, rgb in sorted(colors, key=lambda cv: -cv[0]):
            hit = self.world.cell_for_color(rgb)
            if hit is not None:
                return self.world.image(hit[0])
        raise GcotForgeError("request image is not part of this world")

    def _ground(self, request: ChatRequest, text: str) -> str:
        m = _SUBQ_RE.search(text)
        if m is None:
            raise UnclassifiablePrompt("grounding prompt without a sub-question")
        surface = m.group(1)
        image = self._image_for_request(request)
        cell = match_cell(image, surface)
        if cell is None:
            return REFUSAL_TEXT
        trainings = model_trainings(request.model)
        if recall_admitted(self.policy, image.ref.id, surface, trainings):
            return cell.box.render()
        if jitter_drawn(self.policy, image.ref.id, surface, trainings):
            return self._displaced_cell(image, cell).box.render()
        return REFUSAL_TEXT

    def _displaced_cell(self, image: WorldImage, cell: WorldCell) -> WorldCell:
        """A different cell of the same image; guaranteed past the cell gap."""
        ordered = sorted(image.cells, key=lambda c: c.id)
        idx = next(i for i, c in enumerate(ordered) if c.id == cell.id)
        return ordered[(idx + 1) % len(ordered)]

    def _read(self, request: ChatRequest) -> str:
        data = request.image_bytes()
        if data is None:
            raise UnclassifiablePrompt("read request carries no image")
        try:
            with Image.open(io.BytesIO(data)) as img:
                rgb = img.convert("RGB")
                colors = rgb.getcolors(rgb.width * rgb.height) or []
        except OSError as exc:
            raise UnclassifiablePrompt(f"unreadable crop: {exc}") from exc
        overlap: dict[tuple[str, str], int] = {}
        for count, color in colors:
            hit = self.world.cell_for_color(color)
            if hit is not None:
                overlap[hit] = overlap.get(hit, 0) + count
        if not overlap:
            return ""
        # Max overlap wins; ties break toward the lexicographically first cell.
        (image_id, cell_id), _ = sorted(
            overlap.items(), key=lambda kv: (-kv[1], kv[0])
        )[0]
        cell = next(c for c in self.world.image(image_id).cells if c.id == cell_id)
        trainings = model_trainings(request.model)
        if read_corrupted(self.policy, image_id, cell_id, trainings):
            return corrupt_text(cell.text)
        return cell.text

    def _qa_for_prompt(self, text: str) -> WorldQA:
        m = _QUESTION_RE.search(text)
        if m is None:
            raise UnclassifiablePrompt("distillation prompt without a question")
        qa = self.world.qa_by_question(m.group(1))
        if qa is None:
            raise GcotForgeError(f"question not in world: {m.group(1)!r}")
        return qa

    def _distill(self, text: str) -> str:
        qa = self._qa_for_prompt(text)
        return f"{cot_body(qa)} *Answer*: {qa.sample.gold_answer}"

    def _generate(self, request: ChatRequest, text: str) -> str:
        qa = self._qa_for_prompt(text)
        with self._lock:
            count = self._gen_counts.get(qa.sample.question, 0)
            self._gen_counts[qa.sample.question] = count + 1
        kind = self.policy.gcot_mix[count % len(self.policy.gcot_mix)]
        image = self.world.image(qa.sample.image.id)

        (n1, p1), (n2, p2) = qa.items
        boxes = {}
        for surface in (n1, p1, n2, p2):
            cell = match_cell(image, surface)
            if cell is None:
                raise GcotForgeError(f"world QA references unknown cell {surface!r}")
            boxes[surface] = cell
        if kind == "bad_box":
            boxes[n1] = self._displaced_cell(image, boxes[n1])

        def ann(surface: str) -> str:
            return f"{surface} {boxes[surface].box.render()}"

        body = _COT_BODY.format(n1=ann(n1), p1=ann(p1), n2=ann(n2), p2=ann(p2))
        gold = qa.sample.gold_answer
        if kind == "bad_answer":
            cents = round(float(gold) * 100) + 111
            return f"{body} *Answer*: {answer_string(cents)}"
        if kind == "no_marker":
            return f"{body} So the amount comes to {gold}."
        return f"{body} *Answer*: {gold}"
