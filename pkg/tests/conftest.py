import pytest

from pathlib import Path

from gcot_forge.bootstrap import SampleSubQuestions
from gcot_forge.distill import distill
from gcot_forge.gateway import oracle_configure
from gcot_forge.synthworld import OraclePolicy, generate_world
from gcot_forge.targets import build_sub_questions, extract_targets

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """4 images x 4 items: 16 cells, 4 QA samples, 16 targets."""
    out = tmp_path_factory.mktemp("world-small")
    return generate_world(seed=7, n_images=4, items_per_image=4, out_dir=out)


def perfect_profile(world, **policy_kwargs):
    return oracle_configure(world, OraclePolicy(**policy_kwargs))


def prepare_bundles(world, profile, model="synth-oracle"):
    """Distill + extract for every world sample; returns (bundles, cots by id)."""
    samples = world.samples()
    by_id = {s.sample_id: s for s in samples}
    result = distill(samples, profile, model=model)
    assert not result.failures
    bundles, cots = [], {}
    for rec in result.records:
        subqs = build_sub_questions(extract_targets(rec.cot_text))
        bundles.append(
            SampleSubQuestions(
                sample_id=rec.sample_id,
                image=by_id[rec.sample_id].image,
                sub_questions=tuple(subqs),
            )
        )
        cots[rec.sample_id] = rec
    return bundles, cots


def target_inventory(bundles):
    """(sample_id, image_id, surface) for every sub-question, for policy replay."""
    return [
        (b.sample_id, b.image.id, sq.target.surface)
        for b in bundles
        for sq in b.sub_questions
    ]
