"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines on stdout.
"""

import contextlib
import json
import logging
import re
import time
from pathlib import Path

import pytest

from conftest import FIXTURES, perfect_profile, prepare_bundles, target_inventory

from gcot_forge import dataset_io, gateway
from gcot_forge.assemble import generate_candidates, strip_annotations, verify_and_select
from gcot_forge.bootstrap import BootstrapConfig, load_state, run_bootstrap
from gcot_forge.cli import EXIT_OK, main
from gcot_forge.distill import DISTILL_TEMPLATE, MarkerMissing, parse_answer_marker
from gcot_forge.evaluation import reports_to_json, sample_fewshot
from gcot_forge.grounding import GROUND_PROMPT, READ_PROMPT
from gcot_forge.model import EvalReport, ImageRef, QASample
from gcot_forge.synthworld import (
    OraclePolicy,
    generate_world,
    jitter_drawn,
    recall_admitted,
)

ANNOT_COUNT_RE = re.compile(r" \[\d+\.\d{3}, \d+\.\d{3}, \d+\.\d{3}, \d+\.\d{3}\]")


@contextlib.contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE {number}] FAIL — {description}")
        raise
    print(f"[ACCEPTANCE {number}] PASS — {description}")


def replay_counts(policy, inventory, iterations):
    matched = set()
    counts = []
    for trainings in range(iterations):
        for key in inventory:
            _, image_id, surface = key
            if key not in matched and recall_admitted(policy, image_id, surface, trainings):
                matched.add(key)
        counts.append(len(matched))
    return counts


def test_criterion_1_end_to_end_perfect_oracle(tmp_path, monkeypatch):
    with criterion(1, "perfect-oracle end-to-end run, <60s, no network"):
        def no_network(*args, **kwargs):
            raise AssertionError("pipeline attempted a network call")

        monkeypatch.setattr(gateway._requests, "post", no_network)

        out = tmp_path / "out"
        cfg = tmp_path / "cfg.toml"
        cfg.write_text(
            "\n".join(
                [
                    "[run]",
                    f'out_dir = "{out}"',
                    "[synth]",
                    "seed = 7",
                    "n_images = 20",
                    "items_per_image = 4",
                    "[oracle]",
                    "recall_schedule = [1.0]",
                    "box_jitter_rate = 0.0",
                    "wrong_content_rate = 0.0",
                    "[bootstrap]",
                    "max_iterations = 1",
                    "[eval]",
                    "sizes = [8, 16]",
                    "seeds = [1, 2, 3]",
                ]
            )
            + "\n",
            "utf-8",
        )
        started = time.monotonic()
        assert main(["run-all", "--config", str(cfg)]) == EXIT_OK
        elapsed = time.monotonic() - started
        assert elapsed < 60.0, f"run took {elapsed:.1f}s"

        # 100% of extracted targets verified after exactly one iteration.
        subq_rows = dataset_io.read_jsonl(out / "subquestions.jsonl")
        total_targets = sum(len(r["sub_questions"]) for r in subq_rows)
        assert total_targets == 20 * 4
        state = json.loads((out / "bootstrap" / "state.json").read_text())
        assert state["iteration"] == 1
        assert state["counts_per_iteration"] == [total_targets]

        # One annotation per verified target; stripping recovers the CoT.
        cots = {r.sample_id: r for r in dataset_io.read_records(out / "cot.jsonl")}
        verified_rows = dataset_io.read_jsonl(out / "bootstrap" / "verified_iter01.jsonl")
        verified_per_sample = {}
        for row in verified_rows:
            verified_per_sample[row["sample_id"]] = (
                verified_per_sample.get(row["sample_id"], 0) + 1
            )
        gcots = dataset_io.read_records(out / "gcot.jsonl")
        assert len(gcots) == 20
        for record in gcots:
            n_annotations = len(ANNOT_COUNT_RE.findall(record.gcot_text))
            assert n_annotations == verified_per_sample[record.sample_id] == 4
            assert strip_annotations(record.gcot_text) == cots[record.sample_id].cot_text


def test_criterion_2_bootstrap_loop_analog(tmp_path):
    with criterion(2, "recall-schedule counts match independent policy replay"):
        world = generate_world(seed=11, n_images=25, items_per_image=4, out_dir=tmp_path / "w")
        schedule = (0.4, 0.7, 0.9)
        for idx, policy_seed in enumerate((101, 202, 303)):
            policy = OraclePolicy(recall_schedule=schedule, seed=policy_seed)
            profile = gateway.oracle_configure(world, policy)
            bundles, _ = prepare_bundles(world, profile)
            inventory = target_inventory(bundles)
            assert len(inventory) == 100
            config = BootstrapConfig(
                state_dir=tmp_path / f"bs{idx}", base_model="synth-oracle", max_iterations=3
            )
            state = run_bootstrap(bundles, profile, config)
            expected = replay_counts(policy, inventory, 3)
            assert state.counts_per_iteration == expected
            counts = state.counts_per_iteration
            assert all(a <= b for a, b in zip(counts, counts[1:]))


def test_criterion_3_box_verification_filter(tmp_path):
    with criterion(3, "jittered proposals all mismatch and never enter the verified set"):
        world = generate_world(seed=23, n_images=16, items_per_image=4, out_dir=tmp_path / "w")
        policy = OraclePolicy(recall_schedule=(0.5,), box_jitter_rate=0.3, seed=37)
        profile = gateway.oracle_configure(world, policy)
        bundles, _ = prepare_bundles(world, profile)
        config = BootstrapConfig(
            state_dir=tmp_path / "bs", base_model="synth-oracle", max_iterations=1
        )
        run_bootstrap(bundles, profile, config)

        jittered = set()
        for bundle in bundles:
            for sq in bundle.sub_questions:
                surface = sq.target.surface
                if not recall_admitted(policy, bundle.image.id, surface, 0) and jitter_drawn(
                    policy, bundle.image.id, surface, 0
                ):
                    jittered.add((bundle.sample_id, sq.prompt))
        assert len(jittered) >= 5, "seed produced too few jittered proposals to test"

        attempts = {
            (row["sample_id"], row["sub_question"]["prompt"]): row
            for row in dataset_io.read_jsonl(config.state_dir / "attempts_iter01.jsonl")
        }
        verified_keys = {
            (row["sample_id"], row["sub_question"]["prompt"])
            for row in dataset_io.read_jsonl(config.state_dir / "verified_iter01.jsonl")
        }
        for key in jittered:
            assert attempts[key]["verdict"] == "mismatch"
            assert attempts[key]["box"] is not None
            assert key not in verified_keys


def test_criterion_4_self_verification_selection(tmp_path, caplog):
    with criterion(4, "scripted candidate mixes select exactly per the quota rules"):
        world = generate_world(seed=5, n_images=1, items_per_image=4, out_dir=tmp_path / "w")
        sample = world.samples()[0]

        def run_mix(mix, k=8, max_keep=3):
            profile = gateway.oracle_configure(world, OraclePolicy(gcot_mix=mix))
            cands = generate_candidates(sample, profile, "synth-oracle/it2", k=k)
            assert len(cands) == k
            return verify_and_select(cands, sample, profile, "synth-oracle/it2", max_keep=max_keep)

        # (a) 5 fully correct of 8 -> exactly 3 kept
        kept = run_mix(("good", "bad_box", "good", "bad_answer", "good", "no_marker", "good", "good"))
        assert len(kept) == 3
        assert all(k.answer_ok and k.boxes_ok for k in kept)

        # (b) correct answer + one bad box -> rejected
        kept = run_mix(("bad_box",) * 8)
        assert kept == []

        # (c) 1 correct of 8 -> 1 kept, shortfall 2 logged
        with caplog.at_level(logging.WARNING, logger="gcot_forge.assemble"):
            kept = run_mix(("bad_answer",) * 7 + ("good",))
        assert len(kept) == 1
        assert any("shortfall 2" in message for message in caplog.messages)


def test_criterion_5_distillation_variants():
    with criterion(5, "all four distillation text formats parse per the marker rule"):
        variants = FIXTURES / "distill_variants"
        for name in ("llama", "gemini", "claude"):
            text = (variants / f"{name}.txt").read_text("utf-8")
            assert parse_answer_marker(text).preferred == "475", name
        qwen = (variants / "qwen.txt").read_text("utf-8")
        with pytest.raises(MarkerMissing):
            parse_answer_marker(qwen)


def test_criterion_6_eval_protocol():
    with criterion(6, "sizes 8..128 x 3 seeds deterministic; hand-derived mean/std"):
        image = ImageRef(id="img", uri="/img.png", width_px=10, height_px=10)
        dataset = [
            QASample(f"s{i:03d}", image, f"Question {i}?", str(i), "synth")
            for i in range(130)
        ]
        sizes = (8, 16, 32, 64, 128)
        seeds = (1, 2, 3)
        for size in sizes:
            for seed in seeds:
                first = [s.sample_id for s in sample_fewshot(dataset, size, seed)]
                second = [s.sample_id for s in sample_fewshot(dataset, size, seed)]
                assert first == second

        # Synthetic prediction set: correct iff sample index is even.
        predictions, golds = {}, {}
        for size in sizes:
            for seed in seeds:
                subset = sample_fewshot(dataset, size, seed)
                golds[(size, seed)] = [s.gold_answer for s in subset]
                predictions[(size, seed)] = [
                    s.gold_answer if int(s.gold_answer) % 2 == 0 else "wrong"
                    for s in subset
                ]
        from gcot_forge.evaluation import evaluate

        reports_a = evaluate(predictions, golds, sizes, seeds)
        reports_b = evaluate(predictions, golds, sizes, seeds)
        assert reports_to_json(reports_a) == reports_to_json(reports_b)

        report = EvalReport.from_accuracies(8, [1, 2, 3], [20.0, 25.0, 30.0])
        assert report.mean == pytest.approx(25.0)
        assert abs(report.std - 4.0825) < 1e-3


def test_criterion_7_wire_golden():
    with criterion(7, "grounding/reading/distillation requests match stored bytes"):
        wire = FIXTURES / "wire"
        image_bytes = (wire / "pixel.png").read_bytes()
        question = (
            "An actor was informed how many fan letters he received each day. "
            "How many fan letters total were received on Thursday and Monday?"
        )
        cases = [
            (
                "grounding_request.json",
                gateway.user_request(
                    "viscot-7b", f"Where is the $1.85? {GROUND_PROMPT}", image_bytes
                ),
                "Please provide the bounding box coordinate of the region.",
            ),
            (
                "reading_request.json",
                gateway.user_request("viscot-7b", READ_PROMPT, image_bytes),
                "The content in this image is:",
            ),
            (
                "distillation_request.json",
                gateway.user_request(
                    "llama-3.2", DISTILL_TEMPLATE.format(question=question), image_bytes
                ),
                "*Answer*:",
            ),
        ]
        for fixture_name, request, verbatim in cases:
            stored = (wire / fixture_name).read_bytes()
            assert gateway.request_body_bytes(request) == stored, fixture_name
            assert verbatim in stored.decode("utf-8"), fixture_name


def test_criterion_8_crash_resume(tmp_path):
    with criterion(8, "resume after iteration 2 of 3 equals the uninterrupted run"):
        world = generate_world(seed=31, n_images=8, items_per_image=4, out_dir=tmp_path / "w")
        policy = OraclePolicy(recall_schedule=(0.4, 0.7, 0.9), seed=77)

        def profile():
            return gateway.oracle_configure(world, policy)

        bundles, _ = prepare_bundles(world, profile())

        full_cfg = BootstrapConfig(
            state_dir=tmp_path / "full", base_model="synth-oracle", max_iterations=3
        )
        full = run_bootstrap(bundles, profile(), full_cfg)

        interrupted_cfg = BootstrapConfig(
            state_dir=tmp_path / "resumed", base_model="synth-oracle", max_iterations=2
        )
        run_bootstrap(bundles, profile(), interrupted_cfg)  # killed after iteration 2
        resumed_cfg = BootstrapConfig(
            state_dir=tmp_path / "resumed", base_model="synth-oracle", max_iterations=3
        )
        resumed = run_bootstrap(bundles, profile(), resumed_cfg)

        assert resumed.counts_per_iteration == full.counts_per_iteration
        assert resumed.model_ref == full.model_ref
        assert (full_cfg.state_dir / "state.json").read_bytes() == (
            resumed_cfg.state_dir / "state.json"
        ).read_bytes()
        full_shards = sorted(p.name for p in full_cfg.state_dir.glob("verified_iter*.jsonl"))
        resumed_shards = sorted(
            p.name for p in resumed_cfg.state_dir.glob("verified_iter*.jsonl")
        )
        assert full_shards == resumed_shards
        for name in full_shards:
            assert (full_cfg.state_dir / name).read_bytes() == (
                resumed_cfg.state_dir / name
            ).read_bytes()

        reloaded = load_state(resumed_cfg)
        assert reloaded.counts_per_iteration == full.counts_per_iteration
