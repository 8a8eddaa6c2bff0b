"""Iterative grounding loop: ground unmatched sub-questions, train, repeat."""

import json
import logging
import re
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import gateway
from .dataset_io import (
    SCHEMA_VERSION,
    decode_verified_box,
    encode_record,
    encode_verified_box,
    read_jsonl,
    write_grounding_training,
    write_jsonl,
)
from .grounding import DEFAULT_PAD_FRAC, ground_one
from .model import GcotForgeError, ImageRef, SubQuestion, TrainingManifest, VerifiedBox

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 3

STATE_FILE = "state.json"


class TrainerFailed(GcotForgeError):
    """The trainer command exited nonzero or produced no model identifier."""


@dataclass(frozen=True)
class SampleSubQuestions:
    """All grounding queries for one sample, tied to its image."""

    sample_id: str
    image: ImageRef
    sub_questions: tuple[SubQuestion, ...]


@dataclass(frozen=True)
class BootstrapConfig:
    state_dir: Path
    base_model: str  # checkpoint every iteration's fresh adapter trains from
    initial_model: str = ""  # backend identifier before any training; defaults to base_model
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    trainer_cmd: tuple[str, ...] | None = None  # None: built-in no-op trainer
    pad_frac: float = DEFAULT_PAD_FRAC
    lora_rank: int = 16
    lora_alpha: int = 32
    learning_rate: float = 2e-4
    epochs: int = 1

    def starting_model(self) -> str:
        return self.initial_model or self.base_model


@dataclass
class BootstrapState:
    """Progress of the loop; verified holds match-verdict boxes only."""

    iteration: int = 0
    verified: dict[str, list[VerifiedBox]] = field(default_factory=dict)
    counts_per_iteration: list[int] = field(default_factory=list)
    model_ref: str = ""

    def total_verified(self) -> int:
        return sum(len(v) for v in self.verified.values())

    def matched_keys(self) -> set[tuple[str, str]]:
        return {
            (sample_id, vb.sub_question.prompt)
            for sample_id, boxes in self.verified.items()
            for vb in boxes
        }


def advance_model_ref(model_ref: str) -> str:
    """Next identifier in the "…/itN" series the no-op trainer hands out."""
    m = re.match(r"^(.*)/it(\d+)$", model_ref)
    if m:
        return f"{m.group(1)}/it{int(m.group(2)) + 1}"
    return f"{model_ref}/it1"


def _state_path(config: BootstrapConfig) -> Path:
    return config.state_dir / STATE_FILE


def save_state(state: BootstrapState, config: BootstrapConfig) -> None:
    payload = {
        "schema": SCHEMA_VERSION,
        "kind": "bootstrap_state",
        "iteration": state.iteration,
        "counts_per_iteration": state.counts_per_iteration,
        "model_ref": state.model_ref,
    }
    path = _state_path(config)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8")
    tmp.replace(path)


def load_state(config: BootstrapConfig) -> BootstrapState | None:
    """Reload persisted state, or None when starting fresh.

    Verified boxes come back from the per-iteration shards; shards newer than
    the recorded iteration belong to an interrupted run and are ignored.
    """
    path = _state_path(config)
    if not path.exists():
        return None
    payload = json.loads(path.read_text("utf-8"))
    state = BootstrapState(
        iteration=payload["iteration"],
        counts_per_iteration=list(payload["counts_per_iteration"]),
        model_ref=payload["model_ref"],
    )
    for shard in sorted(config.state_dir.glob("verified_iter*.jsonl")):
        it = int(re.search(r"verified_iter(\d+)", shard.name).group(1))
        if it > state.iteration:
            continue
        for row in read_jsonl(shard):
            sample_id, vb = decode_verified_box(row)
            state.verified.setdefault(sample_id, []).append(vb)
    return state


def run_iteration(
    state: BootstrapState,
    bundles: list[SampleSubQuestions],
    profile: gateway.BackendProfile,
    config: BootstrapConfig,
) -> BootstrapState:
    """One bootstrap round: ground all unmatched sub-questions, then train.

    Matched sub-questions are never re-queried; new matches merge into the
    cumulative verified set, so counts_per_iteration can only grow.
    """
    if state.iteration >= config.max_iterations:
        raise GcotForgeError(
            f"iteration {state.iteration} already at max {config.max_iterations}"
        )
    iteration_no = state.iteration + 1
    matched = state.matched_keys()
    pending = [
        (bundle, sq)
        for bundle in bundles
        for sq in bundle.sub_questions
        if (bundle.sample_id, sq.prompt) not in matched
    ]
    pending.sort(key=lambda p: (p[0].sample_id, p[1].index_t))
    logger.info("iteration %d: grounding %d sub-questions", iteration_no, len(pending))

    def ground(item):
        bundle, sq = item
        return bundle.sample_id, ground_one(
            sq, bundle.image, profile, state.model_ref, iteration_no, config.pad_frac
        )

    with ThreadPoolExecutor(max_workers=profile.max_in_flight) as pool:
        attempts = list(pool.map(ground, pending))

    config.state_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(
        [encode_verified_box(sid, vb) for sid, vb in attempts],
        config.state_dir / f"attempts_iter{iteration_no:02d}.jsonl",
    )

    new_matches = [(sid, vb) for sid, vb in attempts if vb.verdict == "match"]
    write_jsonl(
        [encode_verified_box(sid, vb) for sid, vb in new_matches],
        config.state_dir / f"verified_iter{iteration_no:02d}.jsonl",
    )

    verified = {sid: list(boxes) for sid, boxes in state.verified.items()}
    for sid, vb in new_matches:
        verified.setdefault(sid, []).append(vb)

    image_by_sample = {b.sample_id: b.image for b in bundles}
    training_rows = sorted(
        (
            (sid, image_by_sample[sid].uri, vb.sub_question, vb.box)
            for sid, boxes in verified.items()
            for vb in boxes
        ),
        key=lambda r: (r[0], r[2].index_t),
    )
    train_path = config.state_dir / f"grounding_train_iter{iteration_no:02d}.jsonl"
    write_grounding_training(training_rows, train_path)

    manifest = TrainingManifest(
        task="grounding",
        records_uri=str(train_path),
        base_model=config.base_model,
        lora_rank=config.lora_rank,
        lora_alpha=config.lora_alpha,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
    )
    manifest_path = config.state_dir / f"manifest_iter{iteration_no:02d}.json"
    manifest_path.write_text(
        json.dumps(encode_record(manifest), sort_keys=True, indent=2) + "\n", "utf-8"
    )

    model_ref = run_trainer(manifest_path, state.model_ref, config.trainer_cmd)

    new_state = BootstrapState(
        iteration=iteration_no,
        verified=verified,
        counts_per_iteration=state.counts_per_iteration + [sum(len(v) for v in verified.values())],
        model_ref=model_ref,
    )
    save_state(new_state, config)
    return new_state


def run_trainer(
    manifest_path: Path, model_ref: str, trainer_cmd: tuple[str, ...] | None
) -> str:
    """Run the trainer contract; the no-op trainer just advances the model id."""
    if trainer_cmd is None:
        return advance_model_ref(model_ref)
    cmd = [*trainer_cmd, str(manifest_path)]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True)
    except OSError as exc:
        raise TrainerFailed(f"cannot launch trainer {cmd[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        raise TrainerFailed(
            f"trainer exited {proc.returncode}: {proc.stderr.strip()[-500:]}"
        )
    out_path = Path(str(manifest_path) + ".out")
    if not out_path.exists():
        raise TrainerFailed(f"trainer wrote no model identifier at {out_path}")
    model_ref = out_path.read_text("utf-8").strip()
    if not model_ref:
        raise TrainerFailed(f"trainer wrote an empty model identifier at {out_path}")
    return model_ref


def run_bootstrap(
    bundles: list[SampleSubQuestions],
    profile: gateway.BackendProfile,
    config: BootstrapConfig,
) -> BootstrapState:
    """Run (or resume) the loop for the configured number of iterations.

    State persists after every iteration, so a killed run resumes from its
    last completed iteration and converges to the same final state as an
    uninterrupted one.
    """
    state = load_state(config)
    if state is None:
        state = BootstrapState(model_ref=config.starting_model())
        config.state_dir.mkdir(parents=True, exist_ok=True)
        save_state(state, config)
    else:
        logger.info("resuming bootstrap at iteration %d", state.iteration)
    while state.iteration < config.max_iterations:
        state = run_iteration(state, bundles, profile, config)
    return state
