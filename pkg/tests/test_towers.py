from __future__ import annotations

import numpy as np
import pytest

from src.backend.errors import ConfigError, DimMismatch, LengthMismatch, MissingFrozenTower, UnknownId
from src.backend.model.losses import LossVariant, TransferKind, bidirectional_loss, three_tower_loss
from src.backend.model.towers import (
    Batch,
    FrozenTower,
    HeadConfig,
    Layer,
    MlpEncoder,
    ModelMode,
    apply_heads,
    assemble_model,
    build_model,
    encode,
    third_tower_embed,
)
from src.backend.numerics import RngStream, gelu, l2_normalize_rows


def _frozen(table, projection, **kwargs) -> FrozenTower:
    return FrozenTower(np.asarray(table, dtype=float), MlpEncoder([Layer(np.asarray(projection, dtype=float))]), **kwargs)


def _encoders(seed: int = 0, image_dim: int = 5, text_dim: int = 4, hidden: int = 6, dim: int = 3):
    rng = RngStream(seed)
    return (
        MlpEncoder.initialize((image_dim, hidden, dim), rng),
        MlpEncoder.initialize((text_dim, hidden, dim), rng),
    )


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

def test_encode_examples():
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(encode(MlpEncoder([Layer(np.eye(3))]), X), X)

    zero = MlpEncoder([Layer(np.zeros((3, 4)), np.zeros(4)), Layer(np.zeros((4, 2)), np.zeros(2))])
    np.testing.assert_array_equal(encode(zero, X), np.zeros((2, 2)))

    W1 = np.array([[1.0, -1.0], [0.5, 0.0]])
    b1 = np.array([0.1, 0.2])
    W2 = np.array([[2.0], [1.0]])
    b2 = np.array([-0.3])
    X = np.array([[1.0, 2.0]])
    expected = gelu(X @ W1 + b1) @ W2 + b2
    np.testing.assert_allclose(encode(MlpEncoder([Layer(W1, b1), Layer(W2, b2)]), X), expected, atol=1e-15)


def test_encoder_rejects_wrong_widths():
    with pytest.raises(DimMismatch):
        MlpEncoder([Layer(np.ones((3, 4))), Layer(np.ones((5, 2)))])
    with pytest.raises(DimMismatch):
        encode(MlpEncoder([Layer(np.eye(3))]), np.ones((2, 4)))
    with pytest.raises(ConfigError):
        MlpEncoder([])


def test_encoder_initialisation_is_seeded():
    a = MlpEncoder.initialize((4, 8, 2), RngStream(3))
    b = MlpEncoder.initialize((4, 8, 2), RngStream(3))
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.weight, lb.weight)
    assert a.shapes == [((4, 8), True), ((8, 2), True)]


# ---------------------------------------------------------------------------
# Third tower
# ---------------------------------------------------------------------------

def test_third_tower_embed_examples():
    table = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    identity = _frozen(table, np.eye(2))
    np.testing.assert_array_equal(third_tower_embed(identity, [2, 0]), table[[2, 0]])

    repeated = third_tower_embed(identity, [1, 1])
    np.testing.assert_array_equal(repeated[0], repeated[1])

    small = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    W = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]])
    projected = third_tower_embed(_frozen(small, W), [0, 1])
    np.testing.assert_array_equal(projected, [[7.0, 0.0], [-3.0, 2.0]])


def test_third_tower_rejects_unknown_ids():
    tower = _frozen(np.ones((3, 2)), np.eye(2))
    with pytest.raises(UnknownId):
        third_tower_embed(tower, [0, 3])
    with pytest.raises(UnknownId):
        tower.rows([-1])


def test_frozen_table_is_read_only_and_shared_by_copies():
    table = np.ones((3, 2))
    tower = _frozen(table, np.eye(2))
    with pytest.raises(ValueError):
        tower.table[0, 0] = 5.0
    assert tower.copy().table is tower.table
    table[0, 0] = 9.0
    assert tower.table[0, 0] == 1.0


def test_frozen_tower_projection_dimension_checked():
    with pytest.raises(DimMismatch):
        _frozen(np.ones((3, 2)), np.eye(3))


def test_mlp_projection_expands_four_times():
    tower = FrozenTower.from_table(np.ones((4, 3)), 5, RngStream(0), kind="mlp")
    assert tower.projection.shapes == [((3, 12), True), ((12, 5), True)]
    assert tower.output_dim == 5


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def test_headless_heads_just_normalise():
    rng = np.random.default_rng(0)
    f, g, h = (rng.normal(size=(4, 3)) for _ in range(3))
    out = apply_heads(HeadConfig.identity("headless", 3), f, g, h)
    np.testing.assert_array_equal(out.f, l2_normalize_rows(f))
    np.testing.assert_array_equal(out.g, l2_normalize_rows(g))
    np.testing.assert_array_equal(out.f_h, l2_normalize_rows(f))
    np.testing.assert_array_equal(out.h_f, l2_normalize_rows(h))
    np.testing.assert_array_equal(out.g_h, l2_normalize_rows(g))
    np.testing.assert_array_equal(out.h_g, l2_normalize_rows(h))


def test_identity_default_heads_equal_headless():
    rng = np.random.default_rng(1)
    f, g, h = (rng.normal(size=(5, 3)) for _ in range(3))
    default = apply_heads(HeadConfig.identity("default", 3), f, g, h)
    headless = apply_heads(HeadConfig.identity("headless", 3), f, g, h)
    for a, b in zip(default, headless):
        np.testing.assert_array_equal(a, b)


def test_fully_independent_heads_hand_computed():
    f = np.array([[1.0, 0.0]])
    g = np.array([[0.0, 2.0]])
    h = np.array([[3.0, 4.0]])
    maps = {
        "f_g": np.array([[0.0, 1.0], [1.0, 0.0]]),
        "g_f": np.array([[2.0, 0.0], [0.0, 1.0]]),
        "f_h": np.array([[1.0, 1.0], [0.0, 1.0]]),
        "g_h": np.eye(2),
        "h_f": np.eye(2),
        "h_g": np.array([[0.0, -1.0], [1.0, 0.0]]),
    }
    out = apply_heads(HeadConfig("fully_independent", maps), f, g, h)
    np.testing.assert_allclose(out.f, [[0.0, 1.0]])
    np.testing.assert_allclose(out.g, [[0.0, 1.0]])
    np.testing.assert_allclose(out.f_h, [[2 ** -0.5, 2 ** -0.5]])
    np.testing.assert_allclose(out.h_f, [[0.6, 0.8]])
    np.testing.assert_allclose(out.g_h, [[0.0, 1.0]])
    np.testing.assert_allclose(out.h_g, [[0.8, -0.6]])


def test_head_config_validation():
    with pytest.raises(ConfigError):
        HeadConfig("default", {"f_h": np.eye(2)})
    with pytest.raises(ConfigError):
        HeadConfig.identity("wide", 2)
    with pytest.raises(DimMismatch):
        apply_heads(HeadConfig.identity("default", 3), np.ones((2, 4)), np.ones((2, 4)), np.ones((2, 4)))
    assert HeadConfig.identity("third_only", 2).learned_names == ("h_f", "h_g")
    assert HeadConfig.identity("main_only", 2).learned_names == ("f_h", "g_h")


def test_headless_identical_inputs_equalise_terms():
    X = np.random.default_rng(2).normal(size=(6, 3))
    breakdown = three_tower_loss(apply_heads(HeadConfig.identity("headless", 3), X, X, X), 0.1)
    assert abs(breakdown.l_fg - breakdown.l_fh) <= 1e-12
    assert abs(breakdown.l_fg - breakdown.l_gh) <= 1e-12


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def test_baseline_parameters_are_encoders_and_temperature():
    image, text = _encoders()
    model = assemble_model(ModelMode("baseline"), image, text, None, HeadConfig.identity("headless", 3))
    prefixes = {name.split(".")[0] for name, _ in model.named_parameters()}
    assert prefixes == {"image", "text", "temp"}
    expected = sum(p.size for p in (image.layers[0].weight, image.layers[0].bias, image.layers[1].weight, image.layers[1].bias))
    expected += sum(p.size for p in (text.layers[0].weight, text.layers[0].bias, text.layers[1].weight, text.layers[1].bias))
    assert model.parameter_count == expected + 1


def test_lit_drops_frozen_side_encoder():
    image, text = _encoders()
    frozen = FrozenTower.from_table(np.ones((10, 4)), 3, RngStream(1))
    model = assemble_model(ModelMode("lit", "image"), image, text, frozen, HeadConfig.identity("headless", 3))
    names = [name for name, _ in model.named_parameters()]
    assert model.image_encoder is None
    assert not any(name.startswith("image.") for name in names)
    assert any(name.startswith("third.") for name in names)
    assert any(name.startswith("text.") for name in names)


def test_lit_and_three_towers_need_a_frozen_tower():
    image, text = _encoders()
    for mode in ("lit", "three_towers"):
        with pytest.raises(MissingFrozenTower):
            assemble_model(ModelMode(mode), image, text, None, HeadConfig.identity("default", 3))


def test_assemble_checks_embedding_dimensions():
    image, _ = _encoders(dim=3)
    _, text = _encoders(dim=4)
    with pytest.raises(DimMismatch):
        assemble_model(ModelMode("baseline"), image, text, None, HeadConfig.identity("headless", 3))


def test_per_term_temperatures_only_in_three_towers():
    image, text = _encoders()
    with pytest.raises(ConfigError):
        assemble_model(
            ModelMode("baseline"), image, text, None, HeadConfig.identity("headless", 3), variant=LossVariant(temps="per_term")
        )


def test_init_main_from_pretrained_copies_body():
    image, text = _encoders(image_dim=5, hidden=6, dim=3)
    body = MlpEncoder.initialize((5, 6, 3), RngStream(9))
    table = body(np.random.default_rng(0).normal(size=(8, 5)))
    frozen = FrozenTower.from_table(table, 3, RngStream(2), body=body)
    model = assemble_model(
        ModelMode("three_towers", "image", init_main_from_pretrained=True),
        image,
        text,
        frozen,
        HeadConfig.identity("default", 3),
    )
    for ours, theirs in zip(model.image_encoder.layers, body.layers):
        np.testing.assert_array_equal(ours.weight, theirs.weight)
        assert ours.weight is not theirs.weight
        assert ours.weight.flags.writeable


def test_init_main_from_pretrained_requires_matching_shapes():
    image, text = _encoders(image_dim=5, hidden=7, dim=3)
    body = MlpEncoder.initialize((5, 6, 3), RngStream(9))
    frozen = FrozenTower.from_table(np.ones((8, 3)), 3, RngStream(2), body=body)
    with pytest.raises(DimMismatch):
        assemble_model(
            ModelMode("three_towers", "image", init_main_from_pretrained=True),
            image,
            text,
            frozen,
            HeadConfig.identity("default", 3),
        )


def test_three_towers_without_transfer_matches_baseline_main_term():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(20, 4))
    common = {"image_dim": 5, "text_dim": 4, "embed_dim": 3, "hidden": 6, "seed": 11}
    three = build_model(
        ModelMode("three_towers"),
        frozen_table=table,
        variant=LossVariant(transfer=TransferKind("contrastive", 0.0)),
        **common,
    )
    baseline = build_model(ModelMode("baseline"), **common)
    batch = Batch(np.arange(6), rng.normal(size=(6, 5)), rng.normal(size=(6, 4)))
    assert abs(three.loss(batch).l_fg - baseline.loss(batch).total) <= 1e-12


def test_lit_loss_pairs_projected_table_with_text():
    rng = np.random.default_rng(4)
    table = rng.normal(size=(10, 4))
    model = build_model(ModelMode("lit", "image"), image_dim=5, text_dim=4, embed_dim=3, hidden=6, frozen_table=table)
    batch = Batch([1, 4, 7], rng.normal(size=(3, 5)), rng.normal(size=(3, 4)))
    expected = bidirectional_loss(
        l2_normalize_rows(third_tower_embed(model.frozen, batch.ids)),
        l2_normalize_rows(model.text_encoder(batch.text)),
        model.main_tau,
    )
    assert model.loss(batch).total == expected


def test_flat_parameter_round_trip_and_decay_mask():
    model = build_model(ModelMode("three_towers"), image_dim=5, text_dim=4, embed_dim=3, hidden=6, frozen_table=np.ones((5, 2)))
    params = model.flat_parameters()
    clone = model.copy()
    clone.load_flat_parameters(params * 2.0)
    np.testing.assert_array_equal(clone.flat_parameters(), params * 2.0)
    np.testing.assert_array_equal(model.flat_parameters(), params)
    mask = model.decay_mask()
    assert mask.shape == params.shape
    assert not mask[-1]
    assert mask[:-1].all()


def test_batch_requires_aligned_parts():
    with pytest.raises(LengthMismatch):
        Batch([0, 1], np.ones((2, 3)), np.ones((3, 3)))
