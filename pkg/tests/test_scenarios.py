"""End-to-end training scenarios on the default synthetic spec. Run with ``pytest -m slow``."""
from __future__ import annotations

import numpy as np
import pytest

import src.backend.workflow as workflow
from src.backend.config import DEFAULT_PRETRAIN, DEFAULT_TRAIN
from src.backend.data.dataset import SyntheticSpec, generate_dataset
from src.backend.data.pretrain import pretrain_classifier
from src.backend.evaluation import evaluate_model, linear_probe
from src.backend.model.losses import LossVariant
from src.backend.model.towers import ModelMode, build_model
from src.backend.training import train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
DEFICIENT_DIMS = 3


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(SyntheticSpec())


def _pretrained(dataset, visible_dims, seed):
    options = {key: value for key, value in DEFAULT_PRETRAIN.items() if key not in {"visible_dims", "modality", "seed"}}
    return pretrain_classifier(dataset, visible_dims=visible_dims, seed=seed, **options)


def _trained(dataset, mode, artifact, seed, **overrides):
    settings = {**DEFAULT_TRAIN, "seed": seed, **overrides}
    variant = workflow.loss_variant_from(settings) if mode == "three_towers" else LossVariant()
    model = build_model(
        ModelMode(mode),
        image_dim=dataset.spec.img_dim,
        text_dim=dataset.spec.txt_dim,
        embed_dim=settings["embed_dim"],
        hidden=settings["hidden"],
        frozen_table=None if mode == "baseline" else artifact.table,
        frozen_body=artifact.body,
        variant=variant,
        seed=seed,
    )
    return train(model, dataset, workflow.train_config_from(settings, variant))


def _mean_reports(dataset, visible_dims):
    """Per mode, the eval reports averaged over SEEDS."""
    totals: dict[str, list] = {mode: [] for mode in ("baseline", "lit", "three_towers")}
    for seed in SEEDS:
        artifact = _pretrained(dataset, visible_dims, seed)
        for mode in totals:
            model, _ = _trained(dataset, mode, artifact, seed)
            totals[mode].append(evaluate_model(model, dataset, probe_seeds=1))
    return {
        mode: {
            "zeroshot": float(np.mean([r.zeroshot_acc for r in reports])),
            "i2t": float(np.mean([r.recall1_img2txt for r in reports])),
            "t2i": float(np.mean([r.recall1_txt2img for r in reports])),
        }
        for mode, reports in totals.items()
    }


def _readout_accuracy(dataset, reps):
    train_ids = dataset.split_ids("train")
    eval_ids = dataset.split_ids("eval")
    return linear_probe(reps[train_ids], dataset.labels[train_ids], reps[eval_ids], dataset.labels[eval_ids])


# ---------------------------------------------------------------------------
# Pretrained tables
# ---------------------------------------------------------------------------

def test_matched_table_keeps_the_full_task(dataset):
    artifact = _pretrained(dataset, dataset.spec.latent_dim, 0)
    table_acc = _readout_accuracy(dataset, artifact.table)
    raw_acc = _readout_accuracy(dataset, dataset.image)
    # A ridge one-vs-rest readout tops out near 0.8 on nearest-prototype classes.
    assert table_acc > 0.8
    assert abs(table_acc - raw_acc) <= 0.05


def test_deficient_table_loses_the_full_task(dataset):
    artifact = _pretrained(dataset, DEFICIENT_DIMS, 0)
    assert _readout_accuracy(dataset, dataset.image) - _readout_accuracy(dataset, artifact.table) >= 0.10


# ---------------------------------------------------------------------------
# Training dynamics
# ---------------------------------------------------------------------------

def test_third_tower_term_collapses_early(dataset):
    artifact = _pretrained(dataset, dataset.spec.latent_dim, 0)
    _, trace = _trained(dataset, "three_towers", artifact, 0)
    assert trace.records[-1].step == DEFAULT_TRAIN["steps"]
    assert trace.records[-1].l_fh < 0.2 * trace.at_step(10).l_fh


# ---------------------------------------------------------------------------
# Mode comparisons
# ---------------------------------------------------------------------------

def test_three_towers_recovers_from_deficient_pretraining(dataset):
    scores = _mean_reports(dataset, DEFICIENT_DIMS)
    assert scores["three_towers"]["zeroshot"] >= scores["lit"]["zeroshot"] + 0.05
    assert scores["three_towers"]["zeroshot"] >= scores["baseline"]["zeroshot"] - 0.01


def test_matched_pretraining_ordering(dataset):
    scores = _mean_reports(dataset, dataset.spec.latent_dim)
    three, lit, baseline = scores["three_towers"], scores["lit"], scores["baseline"]
    assert abs(lit["zeroshot"] - three["zeroshot"]) <= 0.10
    assert lit["zeroshot"] > 0.5 and three["zeroshot"] > 0.5
    for direction in ("i2t", "t2i"):
        assert three[direction] >= baseline[direction] - 0.01
        assert three[direction] >= lit[direction] - 0.01
