"""Command-line entry point: one config file, one subcommand per stage."""

import argparse
import contextlib
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import assemble as assemble_mod
from . import bootstrap as bootstrap_mod
from . import dataset_io, evaluation, gateway
from .distill import MarkerMissing, build_distill_prompt, distill, parse_answer_marker
from .model import GcotForgeError, QASample, TrainingManifest
from .synthworld import OraclePolicy, generate_world, load_world
from .targets import build_sub_questions, extract_targets

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2

STAGES = ("synth", "distill", "extract", "bootstrap", "assemble", "augment", "eval")

DEFAULT_CONFIG = {
    "run": {"out_dir": "runs/default"},
    "backend": {
        "kind": "oracle",
        "model": "synth-oracle",
        "endpoint_url": "",
        "auth_env_var": "GCOT_API_KEY",
        "timeout_s": 30.0,
        "max_retries": 3,
        "max_in_flight": 4,
    },
    "dataset": {"path": "", "adapter": "synth"},
    "synth": {"seed": 7, "n_images": 20, "items_per_image": 4, "qa_per_image": 1},
    "oracle": {
        "recall_schedule": [1.0],
        "box_jitter_rate": 0.0,
        "wrong_content_rate": 0.0,
        "seed": 7,
        "gcot_mix": ["good"],
    },
    "bootstrap": {"max_iterations": 3, "trainer_cmd": [], "base_model": ""},
    "augment": {"k": 8, "max_keep": 3, "temperature": 0.8},
    "eval": {"sizes": [8, 16, 32, 64, 128], "seeds": [1, 2, 3], "relaxed": False},
}


class ConfigError(GcotForgeError):
    """Bad config file or flag combination; exit code 2."""


def _interpolate(value):
    if isinstance(value, str):
        def sub(m):
            name = m.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset env var ${{{name}}}")
            return os.environ[name]

        return re.sub(r"\$\{(\w+)\}", sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    cfg = DEFAULT_CONFIG
    if path:
        try:
            with open(path, "rb") as fh:
                loaded = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        cfg = _merge(cfg, loaded)
    return _interpolate(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode("utf-8")
    ).hexdigest()


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("gcot-forge")
    except Exception:
        return "unknown"


def write_stage_meta(out_dir: Path, stage: str, cfg: dict) -> None:
    """Reproducibility breadcrumbs; deliberately free of timestamps."""
    meta_dir = out_dir / "meta"
    meta_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": "v1",
        "stage": stage,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "version": _package_version(),
    }
    (meta_dir / f"{stage}.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8"
    )


@contextlib.contextmanager
def run_lock(out_dir: Path):
    """One pipeline process per run directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise GcotForgeError(
            f"run directory {out_dir} is locked by another process ({lock})"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            lock.unlink()


def _build_profile(cfg: dict) -> gateway.BackendProfile:
    backend = cfg["backend"]
    handler = None
    endpoint_url = backend["endpoint_url"]
    if backend["kind"] == "oracle":
        dataset = cfg["dataset"]
        if dataset["adapter"] != "synth" or not dataset["path"]:
            raise ConfigError("oracle backend requires dataset.adapter = 'synth'")
        world = load_world(dataset["path"])
        oracle_cfg = cfg["oracle"]
        policy = OraclePolicy(
            recall_schedule=tuple(oracle_cfg["recall_schedule"]),
            box_jitter_rate=oracle_cfg["box_jitter_rate"],
            wrong_content_rate=oracle_cfg["wrong_content_rate"],
            seed=oracle_cfg["seed"],
            gcot_mix=tuple(oracle_cfg["gcot_mix"]),
        )
        handler = gateway.oracle_configure(world, policy, name=backend["model"]).handler
        endpoint_url = f"oracle://{backend['model']}"
    elif backend["kind"] == "http":
        if not endpoint_url:
            raise ConfigError("http backend requires backend.endpoint_url")
    else:
        raise ConfigError(f"unknown backend.kind {backend['kind']!r}")
    return gateway.BackendProfile(
        name=backend["model"],
        endpoint_url=endpoint_url,
        auth_env_var=backend["auth_env_var"],
        timeout_s=backend["timeout_s"],
        max_retries=backend["max_retries"],
        max_in_flight=backend["max_in_flight"],
        handler=handler,
    )


def _read_dataset(cfg: dict) -> list[QASample]:
    dataset = cfg["dataset"]
    if not dataset["path"]:
        raise ConfigError("dataset.path is not configured")
    return dataset_io.read_samples(dataset["path"], dataset["adapter"])


def _out_dir(cfg: dict) -> Path:
    return Path(cfg["run"]["out_dir"])


def _trainer_cmd(cfg: dict) -> tuple[str, ...] | None:
    cmd = cfg["bootstrap"]["trainer_cmd"]
    return tuple(cmd) if cmd else None


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: dict) -> None:
    out = _out_dir(cfg)
    synth = cfg["synth"]
    world_dir = out / "world"
    generate_world(
        seed=synth["seed"],
        n_images=synth["n_images"],
        items_per_image=synth["items_per_image"],
        out_dir=world_dir,
        qa_per_image=synth["qa_per_image"],
    )
    logger.info("world written to %s", world_dir)
    write_stage_meta(out, "synth", cfg)


def stage_distill(cfg: dict) -> None:
    out = _out_dir(cfg)
    samples = _read_dataset(cfg)
    profile = _build_profile(cfg)
    result = distill(samples, profile, model=cfg["backend"]["model"])
    dataset_io.write_records(list(result.records), out / "cot.jsonl")
    dataset_io.write_jsonl(
        [
            {"schema": "v1", "kind": "distill_failure", "sample_id": f.sample_id, "reason": f.reason}
            for f in result.failures
        ],
        out / "distill_failures.jsonl",
    )
    logger.info("%d CoT records, %d failures", len(result.records), len(result.failures))
    write_stage_meta(out, "distill", cfg)


def stage_extract(cfg: dict) -> None:
    out = _out_dir(cfg)
    samples = {s.sample_id: s for s in _read_dataset(cfg)}
    records = dataset_io.read_records(out / "cot.jsonl")
    rows = []
    for record in records:
        sample = samples.get(record.sample_id)
        if sample is None:
            raise GcotForgeError(f"cot record {record.sample_id} not in dataset")
        targets = extract_targets(record.cot_text)
        rows.append(dataset_io.encode_sub_questions(sample, build_sub_questions(targets)))
    dataset_io.write_jsonl(rows, out / "subquestions.jsonl")
    logger.info("sub-questions for %d samples", len(rows))
    write_stage_meta(out, "extract", cfg)


def _load_bundles(out: Path) -> list[bootstrap_mod.SampleSubQuestions]:
    bundles = []
    for row in dataset_io.read_jsonl(out / "subquestions.jsonl"):
        sample_id, image, subqs = dataset_io.decode_sub_questions(row)
        bundles.append(
            bootstrap_mod.SampleSubQuestions(
                sample_id=sample_id, image=image, sub_questions=tuple(subqs)
            )
        )
    return bundles


def _base_model(cfg: dict) -> str:
    """Checkpoint the trainer starts from; defaults to the backend identifier."""
    return cfg["bootstrap"]["base_model"] or cfg["backend"]["model"]


def _bootstrap_config(cfg: dict) -> bootstrap_mod.BootstrapConfig:
    return bootstrap_mod.BootstrapConfig(
        state_dir=_out_dir(cfg) / "bootstrap",
        base_model=_base_model(cfg),
        initial_model=cfg["backend"]["model"],
        max_iterations=cfg["bootstrap"]["max_iterations"],
        trainer_cmd=_trainer_cmd(cfg),
    )


def stage_bootstrap(cfg: dict) -> None:
    out = _out_dir(cfg)
    profile = _build_profile(cfg)
    state = bootstrap_mod.run_bootstrap(_load_bundles(out), profile, _bootstrap_config(cfg))
    logger.info(
        "bootstrap done: counts per iteration %s, model %s",
        state.counts_per_iteration,
        state.model_ref,
    )
    write_stage_meta(out, "bootstrap", cfg)


def stage_assemble(cfg: dict) -> None:
    out = _out_dir(cfg)
    samples = {s.sample_id: s for s in _read_dataset(cfg)}
    state = bootstrap_mod.load_state(_bootstrap_config(cfg))
    if state is None:
        raise GcotForgeError("no bootstrap state; run the bootstrap stage first")
    records = dataset_io.read_records(out / "cot.jsonl")
    gcots = []
    for record in records:
        verified = state.verified.get(record.sample_id, [])
        gcots.append(assemble_mod.inject_boxes(record, verified))
    dataset_io.write_records(gcots, out / "gcot.jsonl")
    train_path = out / "gcot_train.jsonl"
    dataset_io.write_gcot_training(
        [(samples[g.sample_id], g) for g in gcots], train_path
    )

    manifest = TrainingManifest(
        task="gcot", records_uri=str(train_path), base_model=_base_model(cfg)
    )
    manifest_path = out / "manifest_gcot.json"
    manifest_path.write_text(
        json.dumps(dataset_io.encode_record(manifest), sort_keys=True, indent=2) + "\n",
        "utf-8",
    )
    model_ref = bootstrap_mod.run_trainer(manifest_path, state.model_ref, _trainer_cmd(cfg))
    (out / "assemble_model.json").write_text(
        json.dumps({"schema": "v1", "model_ref": model_ref}, sort_keys=True) + "\n",
        "utf-8",
    )
    logger.info("%d assembled GCoT records; model %s", len(gcots), model_ref)
    write_stage_meta(out, "assemble", cfg)


def stage_augment(cfg: dict) -> None:
    out = _out_dir(cfg)
    samples = _read_dataset(cfg)
    profile = _build_profile(cfg)
    model_file = out / "assemble_model.json"
    if not model_file.exists():
        raise GcotForgeError("no assembled model reference; run the assemble stage first")
    model_ref = json.loads(model_file.read_text("utf-8"))["model_ref"]
    aug = cfg["augment"]
    selected = []
    for sample in samples:
        candidates = assemble_mod.generate_candidates(
            sample, profile, model_ref, k=aug["k"], temperature=aug["temperature"]
        )
        selected.extend(
            assemble_mod.verify_and_select(
                candidates, sample, profile, model_ref, max_keep=aug["max_keep"]
            )
        )
    dataset_io.write_records(selected, out / "augmented.jsonl")
    by_id = {s.sample_id: s for s in samples}
    dataset_io.write_gcot_training(
        [(by_id[g.sample_id], g) for g in selected], out / "augmented_train.jsonl"
    )
    logger.info("%d verified self-generated GCoTs", len(selected))
    write_stage_meta(out, "augment", cfg)


def stage_eval(cfg: dict) -> None:
    out = _out_dir(cfg)
    samples = _read_dataset(cfg)
    profile = _build_profile(cfg)
    model = cfg["backend"]["model"]
    eval_cfg = cfg["eval"]
    sizes, seeds = eval_cfg["sizes"], eval_cfg["seeds"]
    predictions: dict[tuple[int, int], list[str]] = {}
    golds: dict[tuple[int, int], list[str]] = {}
    for size in sizes:
        for seed in seeds:
            subset = evaluation.sample_fewshot(samples, size, seed)
            preds = []
            for sample in subset:
                with open(sample.image.uri, "rb") as fh:
                    image_bytes = fh.read()
                request = gateway.user_request(
                    model=model, text=build_distill_prompt(sample), image=image_bytes
                )
                try:
                    completion = gateway.complete(profile, request)
                    preds.append(parse_answer_marker(completion).preferred)
                except (MarkerMissing, gateway.TransportError, gateway.ProtocolError):
                    preds.append("")
            predictions[(size, seed)] = preds
            golds[(size, seed)] = [s.gold_answer for s in subset]
    reports = evaluation.evaluate(
        predictions, golds, sizes, seeds, relaxed=eval_cfg["relaxed"]
    )
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "report.json").write_text(
        evaluation.reports_to_json(reports, relaxed=eval_cfg["relaxed"]), "utf-8"
    )
    (eval_dir / "report.txt").write_text(evaluation.reports_to_table(reports), "utf-8")
    (eval_dir / "report.csv").write_text(evaluation.reports_to_csv(reports), "utf-8")
    logger.info("eval reports in %s", eval_dir)
    write_stage_meta(out, "eval", cfg)


_STAGE_FNS = {
    "synth": stage_synth,
    "distill": stage_distill,
    "extract": stage_extract,
    "bootstrap": stage_bootstrap,
    "assemble": stage_assemble,
    "augment": stage_augment,
    "eval": stage_eval,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcot-forge",
        description="Self-verified grounded chain-of-thought data pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="run directory (overrides run.out_dir)")

    p_synth = sub.add_parser("synth", help="generate the synthetic world")
    add_common(p_synth)
    p_synth.add_argument("--seed", type=int, help="world seed")
    p_synth.add_argument("--images", type=int, help="number of images")
    p_synth.add_argument("--items", type=int, help="items per image")
    p_synth.add_argument("--qa-per-image", type=int, help="questions per image")

    for name in ("distill", "extract", "bootstrap", "assemble", "augment"):
        add_common(sub.add_parser(name, help=f"run the {name} stage"))

    p_eval = sub.add_parser("eval", help="few-shot evaluation")
    add_common(p_eval)
    p_eval.add_argument("--sizes", help="comma-separated sample sizes")
    p_eval.add_argument("--seeds", help="comma-separated seeds")
    p_eval.add_argument(
        "--relaxed", action="store_true", help="5%% relative numeric tolerance"
    )

    add_common(sub.add_parser("run-all", help="run every stage in order"))
    return parser


def _apply_flag_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(cfg))  # deep copy
    if args.out:
        cfg["run"]["out_dir"] = args.out
    if args.command == "synth":
        for flag, key in (
            ("seed", "seed"),
            ("images", "n_images"),
            ("items", "items_per_image"),
            ("qa_per_image", "qa_per_image"),
        ):
            value = getattr(args, flag)
            if value is not None:
                cfg["synth"][key] = value
    if args.command == "eval":
        if args.sizes:
            cfg["eval"]["sizes"] = _parse_int_list(args.sizes, "--sizes")
        if args.seeds:
            cfg["eval"]["seeds"] = _parse_int_list(args.seeds, "--seeds")
        if args.relaxed:
            cfg["eval"]["relaxed"] = True
    # A synth-backed run defaults its dataset to the world it generates.
    if not cfg["dataset"]["path"] and cfg["dataset"]["adapter"] == "synth":
        cfg["dataset"]["path"] = str(Path(cfg["run"]["out_dir"]) / "world" / "manifest.json")
    return cfg


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated integers: {text!r}") from exc


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("GCOT_LOG", "INFO"),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_flag_overrides(load_config(args.config), args)
        out = _out_dir(cfg)
        with run_lock(out):
            if args.command == "run-all":
                for stage in STAGES:
                    _STAGE_FNS[stage](cfg)
            else:
                _STAGE_FNS[args.command](cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GcotForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
