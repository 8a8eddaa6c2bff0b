"""On-disk JSONL schemas for every record kind, plus source-dataset adapters.

Every line carries ``schema: "v1"`` and a ``kind`` tag. JSONL is the one
interchange format: streamable, diff-able, and what the trainer contract
consumes.
"""

import json
import os
from pathlib import Path
from typing import Callable

from PIL import Image, UnidentifiedImageError

from .grounding import GROUND_PROMPT
from .model import (
    CoTRecord,
    EvalReport,
    GcotForgeError,
    GCoTRecord,
    ImageRef,
    NBox,
    QASample,
    SubQuestion,
    Target,
    TrainingManifest,
    VerifiedBox,
)

SCHEMA_VERSION = "v1"

ADAPTERS = ("chartqa", "tabmwp", "sroie", "dvqa", "tatqa", "synth", "generic")


class SchemaError(GcotForgeError):
    """A source line does not match the expected schema."""


class MissingImage(GcotForgeError):
    """A sample references an image file that does not exist."""


class IoError(GcotForgeError):
    """Filesystem failure while reading or writing records."""


# ---------------------------------------------------------------------------
# record encode/decode


def _image_to_dict(ref: ImageRef) -> dict:
    return {
        "id": ref.id,
        "uri": ref.uri,
        "width_px": ref.width_px,
        "height_px": ref.height_px,
    }


def _image_from_dict(d: dict) -> ImageRef:
    return ImageRef(
        id=d["id"], uri=d["uri"], width_px=d["width_px"], height_px=d["height_px"]
    )


def _target_to_dict(t: Target) -> dict:
    return {"surface": t.surface, "kind": t.kind, "span": list(t.span)}


def _target_from_dict(d: dict) -> Target:
    return Target(surface=d["surface"], kind=d["kind"], span=tuple(d["span"]))


def _box_to_list(b: NBox) -> list:
    return [b.x1, b.y1, b.x2, b.y2]


def _subq_to_dict(sq: SubQuestion) -> dict:
    return {
        "target": _target_to_dict(sq.target),
        "prompt": sq.prompt,
        "index_t": sq.index_t,
    }


def _subq_from_dict(d: dict) -> SubQuestion:
    return SubQuestion(
        target=_target_from_dict(d["target"]), prompt=d["prompt"], index_t=d["index_t"]
    )


def encode_record(record: object) -> dict:
    """One JSON object for any domain record; inverse of decode_record."""
    if isinstance(record, QASample):
        body = {
            "kind": "qa_sample",
            "sample_id": record.sample_id,
            "image": _image_to_dict(record.image),
            "question": record.question,
            "answer": record.gold_answer,
            "dataset": record.dataset,
        }
    elif isinstance(record, CoTRecord):
        body = {
            "kind": "cot_record",
            "sample_id": record.sample_id,
            "source_model": record.source_model,
            "cot_text": record.cot_text,
            "parsed_answer": record.parsed_answer,
            "answer_ok": record.answer_ok,
        }
    elif isinstance(record, GCoTRecord):
        body = {
            "kind": "gcot_record",
            "sample_id": record.sample_id,
            "gcot_text": record.gcot_text,
            "boxes": [
                {"target": _target_to_dict(t), "box": _box_to_list(b)}
                for t, b in record.boxes
            ],
            "parsed_answer": record.parsed_answer,
            "answer_ok": record.answer_ok,
            "boxes_ok": record.boxes_ok,
            "origin": record.origin,
        }
    elif isinstance(record, TrainingManifest):
        body = {
            "kind": "training_manifest",
            "task": record.task,
            "records_uri": record.records_uri,
            "base_model": record.base_model,
            "lora_rank": record.lora_rank,
            "lora_alpha": record.lora_alpha,
            "learning_rate": record.learning_rate,
            "epochs": record.epochs,
        }
    elif isinstance(record, EvalReport):
        body = {
            "kind": "eval_report",
            "sample_size": record.sample_size,
            "seeds": list(record.seeds),
            "per_seed_accuracy": list(record.per_seed_accuracy),
            "mean": record.mean,
            "std": record.std,
        }
    else:
        raise SchemaError(f"no schema for {type(record).__name__}")
    return {"schema": SCHEMA_VERSION, **body}


def decode_record(d: dict) -> object:
    kind = d.get("kind")
    if kind == "qa_sample":
        return QASample(
            sample_id=d["sample_id"],
            image=_image_from_dict(d["image"]),
            question=d["question"],
            gold_answer=d["answer"],
            dataset=d["dataset"],
        )
    if kind == "cot_record":
        return CoTRecord(
            sample_id=d["sample_id"],
            source_model=d["source_model"],
            cot_text=d["cot_text"],
            parsed_answer=d["parsed_answer"],
            answer_ok=d["answer_ok"],
        )
    if kind == "gcot_record":
        return GCoTRecord(
            sample_id=d["sample_id"],
            gcot_text=d["gcot_text"],
            boxes=tuple(
                (_target_from_dict(p["target"]), NBox(*p["box"])) for p in d["boxes"]
            ),
            parsed_answer=d["parsed_answer"],
            answer_ok=d["answer_ok"],
            boxes_ok=d["boxes_ok"],
            origin=d["origin"],
        )
    if kind == "training_manifest":
        return TrainingManifest(
            task=d["task"],
            records_uri=d["records_uri"],
            base_model=d["base_model"],
            lora_rank=d["lora_rank"],
            lora_alpha=d["lora_alpha"],
            learning_rate=d["learning_rate"],
            epochs=d["epochs"],
        )
    if kind == "eval_report":
        return EvalReport(
            sample_size=d["sample_size"],
            seeds=tuple(d["seeds"]),
            per_seed_accuracy=tuple(d["per_seed_accuracy"]),
            mean=d["mean"],
            std=d["std"],
        )
    raise SchemaError(f"unknown record kind {kind!r}")


def encode_verified_box(sample_id: str, vb: VerifiedBox) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "verified_box",
        "sample_id": sample_id,
        "sub_question": _subq_to_dict(vb.sub_question),
        "box": _box_to_list(vb.box) if vb.box is not None else None,
        "read_content": vb.read_content,
        "verdict": vb.verdict,
        "iteration": vb.iteration,
    }


def decode_verified_box(d: dict) -> tuple[str, VerifiedBox]:
    vb = VerifiedBox(
        sub_question=_subq_from_dict(d["sub_question"]),
        box=NBox(*d["box"]) if d["box"] is not None else None,
        read_content=d["read_content"],
        verdict=d["verdict"],
        iteration=d["iteration"],
    )
    return d["sample_id"], vb


def encode_sub_questions(sample: QASample, subqs: list[SubQuestion]) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "sub_questions",
        "sample_id": sample.sample_id,
        "image": _image_to_dict(sample.image),
        "sub_questions": [_subq_to_dict(sq) for sq in subqs],
    }


def decode_sub_questions(d: dict) -> tuple[str, ImageRef, list[SubQuestion]]:
    return (
        d["sample_id"],
        _image_from_dict(d["image"]),
        [_subq_from_dict(e) for e in d["sub_questions"]],
    )


# ---------------------------------------------------------------------------
# JSONL files


def write_records(records: list, path: str | Path) -> int:
    """Write one JSON object per line, atomically; returns the line count.

    Records must be homogeneous in kind; mixing kinds in one file would break
    downstream consumers that dispatch per file.
    """
    kinds = {type(r).__name__ for r in records}
    if len(kinds) > 1:
        raise SchemaError(f"records not homogeneous: {sorted(kinds)}")
    return write_jsonl([encode_record(r) for r in records], path)


def write_jsonl(rows: list[dict], path: str | Path) -> int:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return len(rows)


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return rows


def read_records(path: str | Path) -> list:
    return [decode_record(row) for row in read_jsonl(path)]


# ---------------------------------------------------------------------------
# training data emission


def write_grounding_training(
    rows: list[tuple[str, str, SubQuestion, NBox]], path: str | Path
) -> int:
    """Grounding-task conversations: (sample_id, image_uri, subq, box) rows."""
    return write_jsonl(
        [
            {
                "schema": SCHEMA_VERSION,
                "kind": "grounding_training",
                "sample_id": sample_id,
                "image": image_uri,
                "conversation": [
                    {"role": "user", "text": f"{sq.prompt} {GROUND_PROMPT}"},
                    {"role": "assistant", "text": box.render()},
                ],
            }
            for sample_id, image_uri, sq, box in rows
        ],
        path,
    )


def write_gcot_training(
    rows: list[tuple[QASample, GCoTRecord]], path: str | Path
) -> int:
    """GCoT-task conversations: question in, grounded reasoning out."""
    return write_jsonl(
        [
            {
                "schema": SCHEMA_VERSION,
                "kind": "gcot_training",
                "sample_id": record.sample_id,
                "image": sample.image.uri,
                "conversation": [
                    {"role": "user", "text": sample.question},
                    {"role": "assistant", "text": record.gcot_text},
                ],
            }
            for sample, record in rows
        ],
        path,
    )


# ---------------------------------------------------------------------------
# source-dataset adapters


def _image_ref(path: Path, image_id: str) -> ImageRef:
    if not path.exists():
        raise MissingImage(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            width, height = img.size
    except (UnidentifiedImageError, OSError) as exc:
        raise MissingImage(f"cannot decode image {path}: {exc}") from exc
    return ImageRef(id=image_id, uri=str(path), width_px=width, height_px=height)


def _require(d: dict, keys: list[str], where: str) -> None:
    for key in keys:
        if key not in d:
            raise SchemaError(f"{where}: missing field {key!r}")


def _read_generic(path: Path) -> list[QASample]:
    samples = []
    for line_no, row in enumerate(read_jsonl(path), start=1):
        where = f"{path}:{line_no}"
        if row.get("kind") == "qa_sample":
            sample = decode_record(row)
            if not Path(sample.image.uri).exists():
                raise MissingImage(f"{where}: image not found: {sample.image.uri}")
            samples.append(sample)
            continue
        _require(row, ["sample_id", "image", "question", "answer"], where)
        image_path = Path(row["image"])
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        samples.append(
            QASample(
                sample_id=row["sample_id"],
                image=_image_ref(image_path, row["sample_id"]),
                question=row["question"],
                gold_answer=str(row["answer"]),
                dataset=row.get("dataset", "generic"),
            )
        )
    return samples


def _read_synth(path: Path) -> list[QASample]:
    from .synthworld import load_world

    return load_world(path).samples()


def _load_json(path: Path) -> object:
    try:
        return json.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc


def _read_chartqa(path: Path) -> list[QASample]:
    entries = _load_json(path)
    if not isinstance(entries, list):
        raise SchemaError(f"{path}: expected a JSON array")
    base = path.parent
    samples = []
    for i, row in enumerate(entries):
        where = f"{path}[{i}]"
        _require(row, ["imgname", "query", "label"], where)
        image_path = base / "png" / row["imgname"]
        if not image_path.exists():
            image_path = base / row["imgname"]
        samples.append(
            QASample(
                sample_id=f"chartqa-{i:05d}",
                image=_image_ref(image_path, row["imgname"]),
                question=row["query"],
                gold_answer=str(row["label"]),
                dataset="chartqa",
            )
        )
    return samples


def _read_tabmwp(path: Path) -> list[QASample]:
    entries = _load_json(path)
    if not isinstance(entries, dict):
        raise SchemaError(f"{path}: expected a JSON object keyed by problem id")
    base = path.parent
    samples = []
    for pid in sorted(entries):
        row = entries[pid]
        _require(row, ["question", "answer"], f"{path}[{pid}]")
        samples.append(
            QASample(
                sample_id=f"tabmwp-{pid}",
                image=_image_ref(base / "tables" / f"{pid}.png", pid),
                question=row["question"],
                gold_answer=str(row["answer"]),
                dataset="tabmwp",
            )
        )
    return samples


def _read_sroie(path: Path) -> list[QASample]:
    entries = _load_json(path)
    if not isinstance(entries, list):
        raise SchemaError(f"{path}: expected a JSON array")
    base = path.parent
    samples = []
    for i, row in enumerate(entries):
        where = f"{path}[{i}]"
        _require(row, ["image", "entities"], where)
        image = _image_ref(base / row["image"], row["image"])
        for key in sorted(row["entities"]):
            samples.append(
                QASample(
                    sample_id=f"sroie-{i:04d}-{key}",
                    image=image,
                    question=f"What is the {key} on this receipt?",
                    gold_answer=str(row["entities"][key]),
                    dataset="sroie",
                )
            )
    return samples


def _read_dvqa(path: Path) -> list[QASample]:
    payload = _load_json(path)
    entries = payload.get("questions") if isinstance(payload, dict) else payload
    if not isinstance(entries, list):
        raise SchemaError(f"{path}: expected a question array")
    base = path.parent
    samples = []
    for i, row in enumerate(entries):
        where = f"{path}[{i}]"
        _require(row, ["image", "question", "answer"], where)
        image_path = base / "images" / row["image"]
        if not image_path.exists():
            image_path = base / row["image"]
        samples.append(
            QASample(
                sample_id=f"dvqa-{i:05d}",
                image=_image_ref(image_path, row["image"]),
                question=row["question"],
                gold_answer=str(row["answer"]),
                dataset="dvqa",
            )
        )
    return samples


def _read_tatqa(path: Path) -> list[QASample]:
    entries = _load_json(path)
    if not isinstance(entries, list):
        raise SchemaError(f"{path}: expected a JSON array")
    base = path.parent
    samples = []
    for i, row in enumerate(entries):
        where = f"{path}[{i}]"
        _require(row, ["table", "questions"], where)
        uid = row["table"].get("uid")
        if uid is None:
            raise SchemaError(f"{where}: table without uid")
        image = _image_ref(base / "images" / f"{uid}.png", uid)
        for j, q in enumerate(row["questions"]):
            _require(q, ["question", "answer"], f"{where}.questions[{j}]")
            answer = q["answer"]
            if isinstance(answer, list):
                answer = ", ".join(str(a) for a in answer)
            samples.append(
                QASample(
                    sample_id=f"tatqa-{uid}-{j}",
                    image=image,
                    question=q["question"],
                    gold_answer=str(answer),
                    dataset="tatqa",
                )
            )
    return samples


_ADAPTER_FNS: dict[str, Callable[[Path], list[QASample]]] = {
    "generic": _read_generic,
    "synth": _read_synth,
    "chartqa": _read_chartqa,
    "tabmwp": _read_tabmwp,
    "sroie": _read_sroie,
    "dvqa": _read_dvqa,
    "tatqa": _read_tatqa,
}


def read_samples(path: str | Path, adapter: str) -> list[QASample]:
    """Normalize one source file into QASamples via the named adapter."""
    if adapter not in _ADAPTER_FNS:
        raise SchemaError(f"unknown adapter {adapter!r}; choose from {ADAPTERS}")
    path = Path(path)
    if not path.exists():
        raise IoError(f"dataset file not found: {path}")
    return _ADAPTER_FNS[adapter](path)
