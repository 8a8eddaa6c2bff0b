import json
from pathlib import Path

import pytest
import torch

from trainer_bridge.cli import main
from trainer_bridge.lora import ADAPTER_CONFIG, ADAPTER_WEIGHTS, apply_lora
from trainer_bridge.train import ManifestError, read_conversations, read_manifest, train


class TestTrain:
    def test_contract_conformance(self, manifest8):
        assert main(["train", str(manifest8)]) == 0
        out = Path(str(manifest8) + ".out")
        assert out.exists()
        model_ref = out.read_text("utf-8").strip()
        adapter_dir = Path(model_ref)
        assert (adapter_dir / ADAPTER_WEIGHTS).exists()
        assert (adapter_dir / ADAPTER_CONFIG).exists()

    def test_adapter_was_actually_trained(self, manifest8):
        adapter_dir = Path(train(manifest8))
        weights = torch.load(adapter_dir / ADAPTER_WEIGHTS, map_location="cpu")
        assert weights
        # lora_b starts at zero; optimizer steps must have moved it
        b_tensors = [t for name, t in weights.items() if "lora_b" in name]
        assert b_tensors
        assert any(t.abs().sum().item() > 0 for t in b_tensors)

    def test_missing_records_nonzero_exit(self, manifest8, tmp_path):
        manifest = json.loads(manifest8.read_text())
        manifest["records_uri"] = str(tmp_path / "gone.jsonl")
        bad = tmp_path / "bad_manifest.json"
        bad.write_text(json.dumps(manifest), "utf-8")
        assert main(["train", str(bad)]) != 0
        assert not Path(str(bad) + ".out").exists()

    def test_missing_manifest_nonzero_exit(self, tmp_path):
        assert main(["train", str(tmp_path / "nope.json")]) != 0

    def test_manifest_validation(self, tmp_path):
        bad = tmp_path / "m.json"
        bad.write_text(json.dumps({"task": "grounding"}), "utf-8")
        with pytest.raises(ManifestError):
            read_manifest(bad)
        bad.write_text("not json", "utf-8")
        with pytest.raises(ManifestError):
            read_manifest(bad)

    def test_conversation_reader_rejects_empty(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text("", "utf-8")
        with pytest.raises(ManifestError):
            read_conversations(path)
        path.write_text(json.dumps({"conversation": []}) + "\n", "utf-8")
        with pytest.raises(ManifestError):
            read_conversations(path)


class TestLoRA:
    def test_wraps_attention_projections(self, tiny_base):
        from transformers import AutoModelForCausalLM

        model = AutoModelForCausalLM.from_pretrained(tiny_base)
        wrapped = apply_lora(model, rank=4, alpha=8)
        assert len(wrapped) == 2 * 4  # 2 layers x q/k/v/o
        trainable = [n for n, p in model.named_parameters() if p.requires_grad]
        assert trainable
        assert all("lora_" in n for n in trainable)

    def test_zero_init_preserves_base_output(self, tiny_base):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(tiny_base)
        ids = tokenizer("Where is the $1.85?", return_tensors="pt")["input_ids"]
        base = AutoModelForCausalLM.from_pretrained(tiny_base)
        with torch.no_grad():
            before = base(ids).logits.clone()
        apply_lora(base, rank=4, alpha=8)
        with torch.no_grad():
            after = base(ids).logits
        assert torch.allclose(before, after, atol=1e-6)
