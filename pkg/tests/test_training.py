from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from src.backend.errors import ConfigError, EmptyDataset, NumericalFailure, ShapeMismatch, StepOutOfRange
from src.backend.model.losses import LossBreakdown, LossVariant, TransferKind
from src.backend.model.towers import ModelMode, build_model
from src.backend.numerics import RngStream
from src.backend.training import (
    AdamState,
    LossTrace,
    TrainConfig,
    TraceRecord,
    adam_step,
    clip_global_norm,
    iterate_batches,
    lr_at_step,
    train,
)
from src.backend.utility.checkpoint import same_parameters

SHORT_RUN = {"total_steps": 8, "warmup_steps": 2, "batch_size": 16, "peak_lr": 1e-2}


def _model(dataset, pretrained, mode="three_towers", *, frozen_modality="image", variant=None):
    return build_model(
        ModelMode(mode, frozen_modality=frozen_modality),
        image_dim=dataset.spec.img_dim,
        text_dim=dataset.spec.txt_dim,
        embed_dim=4,
        hidden=8,
        frozen_table=None if mode == "baseline" else pretrained.table,
        frozen_body=pretrained.body,
        variant=variant,
        seed=1,
    )


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_examples():
    config = TrainConfig(peak_lr=1.0, warmup_steps=10, total_steps=110)
    assert lr_at_step(config, 0) == 0.0
    assert lr_at_step(config, 5) == pytest.approx(0.5)
    assert lr_at_step(config, 10) == pytest.approx(1.0)
    assert lr_at_step(config, 60) == pytest.approx(0.5)
    assert lr_at_step(config, 110) == pytest.approx(0.0, abs=1e-15)


def test_lr_schedule_is_continuous_at_warmup_end():
    config = TrainConfig(peak_lr=3e-3, warmup_steps=50, total_steps=500)
    before = lr_at_step(config, 49)
    at = lr_at_step(config, 50)
    after = lr_at_step(config, 51)
    assert at == pytest.approx(3e-3)
    assert abs(at - before) < 1e-4
    assert abs(at - after) < 1e-6


def test_lr_schedule_all_warmup():
    config = TrainConfig(peak_lr=2.0, warmup_steps=5, total_steps=5)
    assert [lr_at_step(config, t) for t in range(6)] == pytest.approx([0.0, 0.4, 0.8, 1.2, 1.6, 2.0])


def test_lr_schedule_of_an_empty_run():
    assert lr_at_step(TrainConfig(warmup_steps=0, total_steps=0), 0) == 0.0


@pytest.mark.parametrize("step", [-1, 111])
def test_lr_schedule_rejects_out_of_range_steps(step):
    with pytest.raises(StepOutOfRange):
        lr_at_step(TrainConfig(peak_lr=1.0, warmup_steps=10, total_steps=110), step)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=0, total_steps=10)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=20, total_steps=10)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(beta2=1.0)
    TrainConfig(total_steps=0)


# ---------------------------------------------------------------------------
# Clipping and Adam
# ---------------------------------------------------------------------------

def test_clip_global_norm_examples():
    np.testing.assert_allclose(clip_global_norm(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
    small = np.array([0.3, 0.4])
    assert clip_global_norm(small, 1.0) is small
    np.testing.assert_array_equal(clip_global_norm(np.zeros(3), 1.0), np.zeros(3))
    with pytest.raises(ConfigError):
        clip_global_norm(small, 0.0)


def test_adam_zero_gradient_without_decay_is_a_no_op():
    params = np.array([1.0, -2.0, 0.5])
    config = TrainConfig(weight_decay=0.0)
    updated, state = adam_step(AdamState.zeros(3), params, np.zeros(3), 0.1, config)
    np.testing.assert_array_equal(updated, params)
    assert state.step == 1


def test_adam_decay_shrinks_parameters():
    params = np.array([1.0, -2.0, 0.5])
    config = TrainConfig(weight_decay=0.1)
    updated, _ = adam_step(AdamState.zeros(3), params, np.zeros(3), 0.5, config)
    np.testing.assert_allclose(updated, params * (1.0 - 0.5 * 0.1))


def test_adam_first_step_moves_by_lr_against_the_gradient_sign():
    params = np.zeros(3)
    grads = np.array([0.5, -2.0, 0.3])
    config = TrainConfig(weight_decay=0.0)
    updated, state = adam_step(AdamState.zeros(3), params, grads, 0.01, config)
    np.testing.assert_allclose(updated, -0.01 * np.sign(grads), atol=1e-8)
    np.testing.assert_allclose(state.m, 0.1 * grads)


def test_adam_decay_mask_skips_excluded_entries():
    params = np.array([2.0, 2.0])
    config = TrainConfig(weight_decay=0.5)
    updated, _ = adam_step(AdamState.zeros(2), params, np.zeros(2), 0.1, config, np.array([True, False]))
    np.testing.assert_allclose(updated, [2.0 * (1.0 - 0.05), 2.0])


def test_adam_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatch):
        adam_step(AdamState.zeros(3), np.zeros(3), np.zeros(2), 0.1, TrainConfig())


# ---------------------------------------------------------------------------
# Batching and trace
# ---------------------------------------------------------------------------

def test_iterate_batches_drops_the_short_tail():
    ids = np.arange(10, 20)
    batches = iterate_batches(ids, 3, RngStream(0))
    epoch = [next(batches) for _ in range(3)]
    assert all(batch.size == 3 for batch in epoch)
    seen = np.concatenate(epoch)
    assert np.unique(seen).size == 9
    assert set(seen) <= set(ids)


def test_iterate_batches_is_seeded():
    first = iterate_batches(np.arange(12), 4, RngStream(5))
    second = iterate_batches(np.arange(12), 4, RngStream(5))
    for _ in range(6):
        np.testing.assert_array_equal(next(first), next(second))


def test_iterate_batches_rejects_oversized_batch():
    with pytest.raises(ConfigError):
        next(iterate_batches(np.arange(3), 4, RngStream(0)))


def test_loss_trace_keeps_steps_increasing():
    trace = LossTrace()
    trace.record(1, LossBreakdown(1.0, 0.5, 0.25, 1.75), 0.07, 1e-3)
    trace.record(2, LossBreakdown(0.9, 0.4, 0.2, 1.5), 0.07, 1e-3)
    assert trace.at_step(2).total == 1.5
    np.testing.assert_array_equal(trace.column("step"), [1.0, 2.0])
    with pytest.raises(ConfigError):
        trace.append(TraceRecord(2, 0.0, 0.0, 0.0, 0.0, 0.07, 0.0))
    with pytest.raises(StepOutOfRange):
        trace.at_step(7)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def test_zero_steps_returns_the_initial_model(tiny_dataset, tiny_pretrained):
    model = _model(tiny_dataset, tiny_pretrained)
    trained, trace = train(model, tiny_dataset, TrainConfig(total_steps=0))
    assert len(trace) == 0
    assert same_parameters(model, trained)
    assert trained is not model


def test_training_records_every_step(tiny_dataset, tiny_pretrained):
    model = _model(tiny_dataset, tiny_pretrained)
    config = TrainConfig(**SHORT_RUN)
    trained, trace = train(model, tiny_dataset, config)
    np.testing.assert_array_equal(trace.column("step"), np.arange(1, 9))
    np.testing.assert_allclose(trace.column("lr"), [lr_at_step(config, t) for t in range(1, 9)])
    taus = trace.column("tau")
    assert np.all(np.isfinite(taus)) and np.all(taus > 0)
    assert math.isfinite(trained.main_tau) and trained.main_tau > 0
    assert not same_parameters(model, trained)


def test_training_is_deterministic(tiny_dataset, tiny_pretrained):
    config = TrainConfig(**SHORT_RUN)
    first, trace_a = train(_model(tiny_dataset, tiny_pretrained), tiny_dataset, config)
    second, trace_b = train(_model(tiny_dataset, tiny_pretrained), tiny_dataset, config)
    assert same_parameters(first, second)
    for name in ("total", "l_fg", "l_fh", "l_gh", "tau"):
        np.testing.assert_array_equal(trace_a.column(name), trace_b.column(name))


def test_training_leaves_the_input_model_alone(tiny_dataset, tiny_pretrained):
    model = _model(tiny_dataset, tiny_pretrained)
    before = model.flat_parameters()
    train(model, tiny_dataset, TrainConfig(**SHORT_RUN))
    np.testing.assert_array_equal(model.flat_parameters(), before)


@pytest.mark.parametrize("frozen_modality", ["image", "text"])
def test_lit_training_keeps_frozen_parts(tiny_dataset, tiny_pretrained, frozen_modality):
    model = _model(tiny_dataset, tiny_pretrained, "lit", frozen_modality=frozen_modality)
    if frozen_modality == "text":
        assert model.text_encoder is None
    else:
        assert model.image_encoder is None
    body_before = [layer.weight.copy() for layer in model.frozen.body.layers]
    trained, _ = train(model, tiny_dataset, TrainConfig(**SHORT_RUN))
    np.testing.assert_array_equal(trained.frozen.table, tiny_pretrained.table)
    for layer, before in zip(trained.frozen.body.layers, body_before):
        np.testing.assert_array_equal(layer.weight, before)
    assert not np.array_equal(
        trained.frozen.projection.layers[0].weight, model.frozen.projection.layers[0].weight
    )


def test_baseline_trains_both_towers(tiny_dataset, tiny_pretrained):
    model = _model(tiny_dataset, tiny_pretrained, "baseline")
    trained, trace = train(model, tiny_dataset, TrainConfig(**SHORT_RUN))
    assert trained.frozen is None
    assert np.all(trace.column("l_fh") == 0.0)
    assert not np.array_equal(trained.image_encoder.layers[0].weight, model.image_encoder.layers[0].weight)
    assert not np.array_equal(trained.text_encoder.layers[0].weight, model.text_encoder.layers[0].weight)


def test_training_variant_must_match_the_model(tiny_dataset, tiny_pretrained):
    model = _model(tiny_dataset, tiny_pretrained)
    config = TrainConfig(**SHORT_RUN, variant=LossVariant(transfer=TransferKind("squared_error")))
    with pytest.raises(ConfigError):
        train(model, tiny_dataset, config)


def test_training_without_train_split_fails(tiny_dataset, tiny_pretrained):
    no_train = dataclasses.replace(tiny_dataset, split=np.full(tiny_dataset.num_pairs, "eval", dtype="<U5"))
    with pytest.raises(EmptyDataset):
        train(_model(tiny_dataset, tiny_pretrained), no_train, TrainConfig(**SHORT_RUN))


def test_non_finite_weights_raise_numerical_failure(tiny_dataset, tiny_pretrained):
    model = _model(tiny_dataset, tiny_pretrained)
    model.image_encoder.layers[0].weight[:, :] = np.nan
    with pytest.raises(NumericalFailure):
        train(model, tiny_dataset, TrainConfig(**SHORT_RUN))
