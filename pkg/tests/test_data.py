from __future__ import annotations

import numpy as np
import pytest

from src.backend.data.dataset import (
    DATASET_TENSORS,
    LABELS_NAME,
    SyntheticSpec,
    generate_dataset,
    load_dataset_dir,
    write_dataset_dir,
)
from src.backend.data.pretrain import (
    latent_sensor,
    load_pretrained_dir,
    pretrain_classifier,
    visible_labels,
    write_pretrained_dir,
)
from src.backend.errors import ArtifactError, ConfigError, SpecInvalid
from src.backend.numerics import row_norms

SMALL = {"latent_dim": 3, "img_dim": 5, "txt_dim": 4, "num_classes": 3, "num_pairs": 90, "ood_classes": 1, "visible_dims": 3}


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def test_generated_shapes(tiny_dataset):
    spec = tiny_dataset.spec
    assert tiny_dataset.image.shape == (spec.num_pairs, spec.img_dim)
    assert tiny_dataset.text.shape == (spec.num_pairs, spec.txt_dim)
    assert tiny_dataset.latent.shape == (spec.num_pairs, spec.latent_dim)
    assert tiny_dataset.prototypes.shape == (spec.num_classes + spec.ood_classes, spec.latent_dim)
    assert tiny_dataset.class_text.shape == (spec.num_classes, spec.txt_dim)
    assert tiny_dataset.labels.shape == (spec.num_pairs,)
    np.testing.assert_allclose(row_norms(tiny_dataset.prototypes), 1.0, atol=1e-12)


def test_noiseless_features_are_linear_in_the_latent():
    dataset = generate_dataset(SyntheticSpec(**SMALL, noise_sigma=0.0))
    np.testing.assert_array_equal(dataset.image, dataset.latent @ dataset.mixing_image.T)
    np.testing.assert_array_equal(dataset.text, dataset.latent @ dataset.mixing_text.T)


def test_generation_is_a_pure_function_of_the_spec():
    first = generate_dataset(SyntheticSpec(**SMALL))
    second = generate_dataset(SyntheticSpec(**SMALL))
    for name in DATASET_TENSORS:
        assert getattr(first, name).tobytes() == getattr(second, name).tobytes()
    np.testing.assert_array_equal(first.labels, second.labels)
    np.testing.assert_array_equal(first.split, second.split)
    third = generate_dataset(SyntheticSpec(**{**SMALL, "seed": 1}))
    assert not np.array_equal(first.image, third.image)


def test_labels_are_nearest_prototypes(tiny_dataset):
    expected = np.argmax(tiny_dataset.latent @ tiny_dataset.prototypes.T, axis=1)
    np.testing.assert_array_equal(tiny_dataset.labels, expected)


def test_splits_partition_by_class(tiny_dataset):
    C = tiny_dataset.spec.num_classes
    ood = tiny_dataset.split_ids("ood")
    train = tiny_dataset.split_ids("train")
    evaluation = tiny_dataset.split_ids("eval")
    assert np.all(tiny_dataset.labels[ood] >= C)
    assert np.all(tiny_dataset.labels[train] < C)
    assert np.all(tiny_dataset.labels[evaluation] < C)
    assert ood.size + train.size + evaluation.size == tiny_dataset.num_pairs
    in_distribution = train.size + evaluation.size
    assert evaluation.size == round(in_distribution * tiny_dataset.spec.eval_fraction)
    with pytest.raises(ConfigError):
        tiny_dataset.split_ids("test")


def test_without_ood_classes_every_pair_is_in_distribution():
    dataset = generate_dataset(SyntheticSpec(**{**SMALL, "ood_classes": 0}))
    assert dataset.split_ids("ood").size == 0


def test_class_text_is_noiseless_text_on_each_prototype(tiny_dataset):
    k = tiny_dataset.spec.latent_dim
    C = tiny_dataset.spec.num_classes
    expected = (np.sqrt(k) * tiny_dataset.prototypes[:C]) @ tiny_dataset.mixing_text.T
    np.testing.assert_allclose(tiny_dataset.class_text, expected, atol=1e-12)


@pytest.mark.parametrize(
    "overrides",
    [
        {"num_pairs": 10, "num_classes": 20},
        {"num_classes": 1},
        {"visible_dims": 4},
        {"visible_dims": 0},
        {"noise_sigma": -0.1},
        {"eval_fraction": 1.0},
        {"ood_classes": -1},
        {"latent_dim": 0},
    ],
)
def test_spec_validation(overrides):
    with pytest.raises(SpecInvalid):
        SyntheticSpec(**{**SMALL, **overrides})


def test_spec_from_dict_ignores_unknown_keys(caplog):
    spec = SyntheticSpec.from_dict({"num_pairs": 50, "colour": "blue"})
    assert spec.num_pairs == 50
    assert "colour" in caplog.text
    with pytest.raises(SpecInvalid):
        SyntheticSpec.from_dict({"num_pairs": "many"})


def test_batch_gathers_rows(tiny_dataset):
    batch = tiny_dataset.batch([3, 1])
    np.testing.assert_array_equal(batch.image, tiny_dataset.image[[3, 1]])
    np.testing.assert_array_equal(batch.text, tiny_dataset.text[[3, 1]])


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def test_dataset_directory_round_trip(tiny_dataset, tmp_path):
    write_dataset_dir(tiny_dataset, tmp_path / "a")
    loaded = load_dataset_dir(tmp_path / "a")
    assert loaded.spec == tiny_dataset.spec
    for name in DATASET_TENSORS:
        assert getattr(loaded, name).tobytes() == getattr(tiny_dataset, name).tobytes()
    np.testing.assert_array_equal(loaded.labels, tiny_dataset.labels)
    np.testing.assert_array_equal(loaded.split, tiny_dataset.split)

    write_dataset_dir(loaded, tmp_path / "b")
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes(), path.name


def test_labels_csv_layout(tiny_dataset, tmp_path):
    write_dataset_dir(tiny_dataset, tmp_path)
    lines = (tmp_path / LABELS_NAME).read_text(encoding="utf-8").splitlines()
    assert lines[0] == "id,y,split"
    assert len(lines) == tiny_dataset.num_pairs + 1
    assert lines[1] == f"0,{tiny_dataset.labels[0]},{tiny_dataset.split[0]}"


def test_tampered_labels_are_rejected(tiny_dataset, tmp_path):
    write_dataset_dir(tiny_dataset, tmp_path)
    path = tmp_path / LABELS_NAME
    path.write_text(path.read_text(encoding="utf-8").replace(",train", ",eval", 1), encoding="utf-8")
    with pytest.raises(ArtifactError):
        load_dataset_dir(tmp_path)


def test_missing_dataset_directory(tmp_path):
    with pytest.raises(ArtifactError):
        load_dataset_dir(tmp_path / "nowhere")


# ---------------------------------------------------------------------------
# Pretrained classifier
# ---------------------------------------------------------------------------

def test_sensor_recovers_visible_latents():
    dataset = generate_dataset(SyntheticSpec(**SMALL, noise_sigma=0.0))
    recovered = dataset.image @ latent_sensor(dataset.mixing_image, 2)
    np.testing.assert_allclose(recovered, dataset.latent[:, :2], atol=1e-10)


def test_visible_labels_with_every_dimension_match_labels(tiny_dataset):
    in_distribution = tiny_dataset.labels < tiny_dataset.spec.num_classes
    full = visible_labels(tiny_dataset, tiny_dataset.spec.latent_dim)
    np.testing.assert_array_equal(full[in_distribution], tiny_dataset.labels[in_distribution])


def test_pretrained_table_shape(tiny_dataset, tiny_pretrained):
    assert tiny_pretrained.table.shape == (tiny_dataset.num_pairs, 4)
    assert tiny_pretrained.width == 4
    assert tiny_pretrained.body.input_dim == tiny_dataset.spec.img_dim
    np.testing.assert_allclose(tiny_pretrained.body(tiny_dataset.image), tiny_pretrained.table, atol=1e-12)
    assert 0.0 <= tiny_pretrained.train_accuracy <= 1.0


def test_pretraining_is_deterministic(tiny_dataset, tiny_pretrained):
    again = pretrain_classifier(tiny_dataset, steps=30, embed_dim=4, hidden=8, batch_size=32, seed=0)
    assert again.table.tobytes() == tiny_pretrained.table.tobytes()


def test_zero_step_pretraining_keeps_the_initial_body(tiny_dataset):
    artifact = pretrain_classifier(tiny_dataset, steps=0, embed_dim=4, hidden=8)
    assert artifact.steps == 0
    assert artifact.table.shape == (tiny_dataset.num_pairs, 4)
    assert np.all(np.isfinite(artifact.table))


def test_pretrain_rejects_bad_visible_dims(tiny_dataset):
    with pytest.raises(SpecInvalid):
        pretrain_classifier(tiny_dataset, visible_dims=tiny_dataset.spec.latent_dim + 1, steps=0)


def test_text_side_pretraining(tiny_dataset):
    artifact = pretrain_classifier(tiny_dataset, steps=5, modality="text", embed_dim=3, hidden=0)
    assert artifact.modality == "text"
    assert artifact.body.input_dim == tiny_dataset.spec.txt_dim
    assert len(artifact.body.layers) == 1


def test_pretrained_directory_round_trip(tiny_pretrained, tmp_path):
    write_pretrained_dir(tiny_pretrained, tmp_path, config={"steps": 30}, seed=0)
    loaded = load_pretrained_dir(tmp_path)
    assert loaded.table.tobytes() == tiny_pretrained.table.tobytes()
    for ours, theirs in zip(loaded.body.layers, tiny_pretrained.body.layers):
        np.testing.assert_array_equal(ours.weight, theirs.weight)
    assert (loaded.modality, loaded.visible_dims, loaded.steps) == ("image", 4, 30)
    assert loaded.train_accuracy == tiny_pretrained.train_accuracy


def test_missing_pretrained_directory(tmp_path):
    with pytest.raises(ArtifactError):
        load_pretrained_dir(tmp_path / "nowhere")
    (tmp_path / "data").mkdir()
    with pytest.raises(ArtifactError):
        load_pretrained_dir(tmp_path / "data")
