"""Fine-tune a low-rank adapter per a training manifest and publish the model id."""

import json
import logging
from pathlib import Path

import torch
from torch.utils.data import DataLoader
from transformers import AutoModelForCausalLM, AutoTokenizer

from .lora import apply_lora, save_adapter, trainable_parameters

logger = logging.getLogger(__name__)

MAX_SEQ_LEN = 256
BATCH_SIZE = 4

REQUIRED_FIELDS = (
    "task",
    "records_uri",
    "base_model",
    "lora_rank",
    "lora_alpha",
    "learning_rate",
    "epochs",
)


class ManifestError(ValueError):
    pass


def read_manifest(manifest_path: str | Path) -> dict:
    path = Path(manifest_path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    for field in REQUIRED_FIELDS:
        if field not in manifest:
            raise ManifestError(f"manifest missing field {field!r}")
    if manifest["task"] not in ("grounding", "gcot"):
        raise ManifestError(f"unknown task {manifest['task']!r}")
    return manifest


def read_conversations(records_uri: str | Path) -> list[str]:
    """Conversation JSONL rows flattened to plain training text."""
    path = Path(records_uri)
    if not path.exists():
        raise ManifestError(f"training records not found: {path}")
    texts = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            turns = row.get("conversation")
            if not isinstance(turns, list) or not turns:
                raise ManifestError(f"{path}:{line_no}: no conversation turns")
            texts.append("\n".join(str(t.get("text", "")) for t in turns))
    if not texts:
        raise ManifestError(f"{path}: no training records")
    return texts


def _batches(texts: list[str], tokenizer):
    encoded = tokenizer(
        texts,
        truncation=True,
        max_length=MAX_SEQ_LEN,
        padding=False,
    )["input_ids"]
    loader = DataLoader(
        list(range(len(texts))), batch_size=BATCH_SIZE, shuffle=False
    )
    pad_id = tokenizer.pad_token_id
    if pad_id is None:
        pad_id = tokenizer.eos_token_id or 0
    for idx_batch in loader:
        rows = [encoded[i] for i in idx_batch.tolist()]
        width = max(len(r) for r in rows)
        input_ids = torch.full((len(rows), width), pad_id, dtype=torch.long)
        attention = torch.zeros((len(rows), width), dtype=torch.long)
        labels = torch.full((len(rows), width), -100, dtype=torch.long)
        for i, row in enumerate(rows):
            input_ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
            attention[i, : len(row)] = 1
            labels[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        yield {"input_ids": input_ids, "attention_mask": attention, "labels": labels}


def train(manifest_path: str | Path) -> str:
    """Run the trainer contract: fine-tune, save the adapter, write `.out`.

    Returns the served model identifier (the adapter directory), which is
    also written to `<manifest_path>.out` for the pipeline to pick up.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    texts = read_conversations(manifest["records_uri"])

    tokenizer = AutoTokenizer.from_pretrained(manifest["base_model"])
    model = AutoModelForCausalLM.from_pretrained(manifest["base_model"])
    wrapped = apply_lora(model, manifest["lora_rank"], manifest["lora_alpha"])
    logger.info("LoRA on %d modules, %d records", len(wrapped), len(texts))

    optimizer = torch.optim.AdamW(
        trainable_parameters(model), lr=manifest["learning_rate"]
    )
    model.train()
    for epoch in range(manifest["epochs"]):
        total = 0.0
        n = 0
        for batch in _batches(texts, tokenizer):
            optimizer.zero_grad()
            out = model(**batch)
            out.loss.backward()
            optimizer.step()
            total += out.loss.item()
            n += 1
        logger.info("epoch %d: mean loss %.4f", epoch + 1, total / max(n, 1))

    adapter_dir = Path(str(manifest_path) + ".adapter")
    save_adapter(
        adapter_dir,
        model,
        base_model=manifest["base_model"],
        rank=manifest["lora_rank"],
        alpha=manifest["lora_alpha"],
    )
    out_path = Path(str(manifest_path) + ".out")
    out_path.write_text(str(adapter_dir) + "\n", "utf-8")
    return str(adapter_dir)
