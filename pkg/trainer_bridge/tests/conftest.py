import json
from pathlib import Path

import pytest

from trainer_bridge.tinybase import init_tiny

# Golden wire fixtures belong to the pipeline; the bridge consumes them as
# files, never through the pipeline's code.
WIRE_FIXTURES = Path(__file__).resolve().parents[2] / "tests" / "fixtures" / "wire"


@pytest.fixture(scope="session")
def tiny_base(tmp_path_factory):
    return init_tiny(tmp_path_factory.mktemp("tiny-base"), seed=0)


def grounding_rows():
    prompts = [
        ("Where is the $1.85?", "[0.611, 0.381, 0.875, 0.455]"),
        ("Where is the beef sauce?", "[0.021, 0.411, 0.331, 0.475]"),
        ("Where is the marinara sauce?", "[0.011, 0.521, 0.475, 0.595]"),
        ("Where is the $1.17?", "[0.611, 0.522, 0.775, 0.595]"),
        ("Where is the copper kettle?", "[0.050, 0.083, 0.450, 0.233]"),
        ("Where is the $4.24?", "[0.550, 0.083, 0.950, 0.233]"),
        ("Where is the golden beaker?", "[0.050, 0.292, 0.450, 0.442]"),
        ("Where is the $1.46?", "[0.550, 0.292, 0.950, 0.442]"),
    ]
    return [
        {
            "schema": "v1",
            "kind": "grounding_training",
            "sample_id": f"s{i}",
            "image": f"images/img{i:03d}.png",
            "conversation": [
                {
                    "role": "user",
                    "text": f"{q} Please provide the bounding box coordinate of the region.",
                },
                {"role": "assistant", "text": a},
            ],
        }
        for i, (q, a) in enumerate(prompts)
    ]


@pytest.fixture
def manifest8(tmp_path, tiny_base):
    """Manifest over an 8-record grounding JSONL, default hyperparameters."""
    records = tmp_path / "grounding_train.jsonl"
    with open(records, "w", encoding="utf-8") as fh:
        for row in grounding_rows():
            fh.write(json.dumps(row) + "\n")
    manifest = tmp_path / "manifest_iter01.json"
    manifest.write_text(
        json.dumps(
            {
                "schema": "v1",
                "kind": "training_manifest",
                "task": "grounding",
                "records_uri": str(records),
                "base_model": tiny_base,
                "lora_rank": 16,
                "lora_alpha": 32,
                "learning_rate": 2e-4,
                "epochs": 1,
            },
            indent=2,
        ),
        "utf-8",
    )
    return manifest
