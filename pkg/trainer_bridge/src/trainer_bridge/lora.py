"""Minimal low-rank adapter injection for causal LMs with Linear attention projections."""

import json
from pathlib import Path

import torch
from torch import nn

ADAPTER_WEIGHTS = "adapter.pt"
ADAPTER_CONFIG = "adapter_config.json"

TARGET_SUFFIXES = ("q_proj", "k_proj", "v_proj", "o_proj")


class LoRALinear(nn.Module):
    """Frozen base Linear plus a trainable rank-r update scaled by alpha/r."""

    def __init__(self, base: nn.Linear, rank: int, alpha: int):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) * 0.01)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        self.scaling = alpha / rank

    def forward(self, x):
        update = nn.functional.linear(nn.functional.linear(x, self.lora_a), self.lora_b)
        return self.base(x) + self.scaling * update


def apply_lora(model: nn.Module, rank: int, alpha: int) -> list[str]:
    """Wrap every targeted projection; freeze everything else. Returns wrapped names."""
    for p in model.parameters():
        p.requires_grad_(False)
    wrapped = []
    for name, module in list(model.named_modules()):
        for child_name, child in list(module.named_children()):
            if isinstance(child, nn.Linear) and child_name.endswith(TARGET_SUFFIXES):
                setattr(module, child_name, LoRALinear(child, rank, alpha))
                wrapped.append(f"{name}.{child_name}" if name else child_name)
    if not wrapped:
        raise RuntimeError(
            "no LoRA target modules found; expected Linear layers named "
            f"*{'/'.join(TARGET_SUFFIXES)}"
        )
    return wrapped


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def lora_state_dict(model: nn.Module) -> dict:
    return {
        name: tensor
        for name, tensor in model.state_dict().items()
        if "lora_a" in name or "lora_b" in name
    }


def save_adapter(
    adapter_dir: str | Path, model: nn.Module, base_model: str, rank: int, alpha: int
) -> None:
    adapter_dir = Path(adapter_dir)
    adapter_dir.mkdir(parents=True, exist_ok=True)
    torch.save(lora_state_dict(model), adapter_dir / ADAPTER_WEIGHTS)
    (adapter_dir / ADAPTER_CONFIG).write_text(
        json.dumps(
            {
                "schema": "v1",
                "base_model": str(base_model),
                "lora_rank": rank,
                "lora_alpha": alpha,
                "target_suffixes": list(TARGET_SUFFIXES),
            },
            indent=2,
        )
        + "\n",
        "utf-8",
    )


def is_adapter_dir(path: str | Path) -> bool:
    return (Path(path) / ADAPTER_CONFIG).exists()


def load_adapter_into(model: nn.Module, adapter_dir: str | Path) -> None:
    """Wrap the model per the stored config and load the adapter weights."""
    adapter_dir = Path(adapter_dir)
    config = json.loads((adapter_dir / ADAPTER_CONFIG).read_text("utf-8"))
    apply_lora(model, config["lora_rank"], config["lora_alpha"])
    weights = torch.load(adapter_dir / ADAPTER_WEIGHTS, map_location="cpu")
    missing, unexpected = model.load_state_dict(weights, strict=False)
    if unexpected:
        raise RuntimeError(f"adapter carries unknown tensors: {unexpected[:3]}")
