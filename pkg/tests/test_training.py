import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnet.core import Tensor, Tape, backward, check_gradients
from dnet.models import ModelConfig, build_model, model_forward, weight_store
from dnet.training import (
    DivergenceError,
    LabelError,
    LossConfig,
    OptimState,
    SynthSpec,
    argmax_labels,
    combined_loss,
    cross_entropy,
    dice_loss,
    eval_metrics,
    sgd_poly_step,
    softmax,
    sphere_mask,
    synth_batch,
    synth_dataset,
    synth_sample,
    train_toy,
)


def logits_for(labels, k, scale=30.0):
    onehot = np.moveaxis(np.eye(k)[labels], -1, 1)
    return Tensor(scale * (2 * onehot - 1))


def test_perfect_prediction_has_zero_dice_loss():
    labels = np.random.default_rng(0).integers(0, 3, (2, 3, 3, 3))
    assert dice_loss(logits_for(labels, 3), labels).item() < 1e-3


def test_uniform_prediction_on_two_voxels():
    labels = np.array([[[[1, 0]]]])
    s = 1e-5
    expect = 1 - (2 * 0.5 + s) / (1.0 + 1 + s)
    assert dice_loss(Tensor(np.zeros((1, 2, 1, 1, 2))), labels).item() == pytest.approx(expect, rel=1e-12)


def test_disjoint_prediction_has_unit_dice_loss():
    labels = np.zeros((1, 4, 4, 4), dtype=int)
    labels[:, :2] = 1
    loss = dice_loss(logits_for(1 - labels, 2), labels).item()
    assert loss == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("k", [2, 3, 5])
def test_uniform_logits_give_log_k_cross_entropy(k):
    labels = np.random.default_rng(k).integers(0, k, (1, 2, 2, 2))
    cfg = LossConfig(lambda_dice=0.0, lambda_ce=1.0)
    assert combined_loss(Tensor(np.zeros((1, k, 2, 2, 2))), labels, cfg).item() == pytest.approx(math.log(k))


def test_combined_loss_weights_its_terms():
    rng = np.random.default_rng(1)
    logits, labels = Tensor(rng.standard_normal((2, 3, 2, 2, 2))), rng.integers(0, 3, (2, 2, 2, 2))
    expect = 0.5 * dice_loss(logits, labels).item() + 0.5 * cross_entropy(logits, labels).item()
    assert combined_loss(logits, labels).item() == pytest.approx(expect, rel=1e-12)


def test_class_weighted_cross_entropy():
    labels = np.array([[[[0, 1]]]])
    logits = Tensor(np.zeros((1, 2, 1, 1, 2)))
    cfg = LossConfig(class_weights=(1.0, 3.0))
    assert cross_entropy(logits, labels, cfg).item() == pytest.approx(math.log(2))


@pytest.mark.parametrize("bad", [np.array([[[[0, 2]]]]), np.array([[[[0, -1]]]]), np.zeros((1, 1, 1, 3), int)])
def test_invalid_labels_are_rejected(bad):
    with pytest.raises(LabelError):
        dice_loss(Tensor(np.zeros((1, 2, 1, 1, 2))), bad)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_dice=0.0, lambda_ce=0.0)
    with pytest.raises(ValueError):
        LossConfig(lambda_dice=-0.1)


@settings(max_examples=40, deadline=None)
@given(k=st.integers(2, 4), scale=st.floats(0.01, 50.0), seed=st.integers(0, 10**6))
def test_loss_ranges_and_probabilities_sum_to_one(k, scale, seed):
    rng = np.random.default_rng(seed)
    raw = scale * rng.standard_normal((2, k, 2, 3, 2))
    labels = rng.integers(0, k, (2, 2, 3, 2))
    assert np.allclose(softmax(raw).sum(axis=1), 1.0, atol=1e-6)
    d = dice_loss(Tensor(raw), labels).item()
    assert -1e-9 <= d <= 1 + 1e-5
    assert combined_loss(Tensor(raw), labels).item() >= 0


@pytest.mark.parametrize("fn", [dice_loss, cross_entropy, combined_loss])
def test_loss_gradients_match_finite_differences(fn):
    rng = np.random.default_rng(2)
    logits = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
    labels = rng.integers(0, 2, (1, 2, 2, 2))
    (r,) = check_gradients(lambda: fn(logits, labels), {"logits": logits}, tol=1e-3)
    assert r.passed, r.rel_error


def test_single_sgd_step():
    w = {"w": Tensor(np.array([1.0]))}
    sgd_poly_step(OptimState(lr0=0.1, momentum=0.0), {"w": np.array([2.0])}, w)
    assert w["w"].numpy()[0] == pytest.approx(0.8)


def test_two_momentum_steps_match_unrolled_recurrence():
    state = OptimState(lr0=0.1, momentum=0.9, max_epochs=10)
    w = {"w": Tensor(np.array([1.0]))}
    g1, g2 = 2.0, -1.0
    sgd_poly_step(state, {"w": np.array([g1])}, w)
    state.advance_epoch()
    sgd_poly_step(state, {"w": np.array([g2])}, w)
    lr0, lr1 = 0.1, 0.1 * (1 - 1 / 10) ** 0.9
    v1 = g1
    v2 = 0.9 * v1 + g2
    assert w["w"].numpy()[0] == pytest.approx(1.0 - lr0 * v1 - lr1 * v2)


def test_missing_gradient_path_is_an_error():
    with pytest.raises(KeyError, match="b"):
        sgd_poly_step(OptimState(), {"a": np.zeros(1)}, {"a": Tensor(np.zeros(1)), "b": Tensor(np.zeros(1))})


@settings(max_examples=50, deadline=None)
@given(max_e=st.integers(1, 200), power=st.floats(0.1, 3.0))
def test_poly_schedule_is_non_increasing_and_ends_at_zero(max_e, power):
    state = OptimState(lr0=0.01, max_epochs=max_e, power=power)
    rates = [state.lr(e) for e in range(max_e + 1)]
    assert all(a >= b >= 0 for a, b in zip(rates, rates[1:]))
    assert rates[-1] == 0.0


def test_identical_masks():
    a = np.random.default_rng(0).integers(0, 3, (1, 4, 4, 4))
    m = eval_metrics(a, a, 3)
    assert m.mean_dice == 1.0 and m.mean_iou == 1.0


def test_half_overlap():
    a = np.zeros((1, 1, 1, 4), int)
    b = np.zeros((1, 1, 1, 4), int)
    a[..., :2] = 1
    b[..., 1:3] = 1
    m = eval_metrics(a, b, 2)
    assert m.dice[1] == pytest.approx(0.5)
    assert m.iou[1] == pytest.approx(1 / 3)


def test_empty_class_counts_as_perfect():
    a = np.zeros((1, 2, 2, 2), int)
    assert eval_metrics(a, a, 3).dice == {1: 1.0, 2: 1.0}


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(2, 4))
def test_metrics_match_voxel_sets_and_dice_dominates_iou(seed, k):
    rng = np.random.default_rng(seed)
    pred, true = rng.integers(0, k, (1, 3, 3, 3)), rng.integers(0, k, (1, 3, 3, 3))
    m = eval_metrics(pred, true, k)
    for c in range(1, k):
        A = {tuple(i) for i in np.argwhere(pred == c)}
        B = {tuple(i) for i in np.argwhere(true == c)}
        dice = 1.0 if not A and not B else 2 * len(A & B) / (len(A) + len(B))
        iou = 1.0 if not A | B else len(A & B) / len(A | B)
        assert m.dice[c] == pytest.approx(dice)
        assert m.iou[c] == pytest.approx(iou)
        assert m.dice[c] >= m.iou[c]


def test_argmax_ties_go_to_lowest_class():
    assert argmax_labels(np.zeros((1, 3, 1, 1, 2))).tolist() == [[[[0, 0]]]]


def test_zero_spheres_give_background():
    _, labels = synth_sample(SynthSpec(num_spheres=0), np.random.default_rng(0))
    assert not labels.any()


def test_synthetic_stream_is_deterministic():
    spec = SynthSpec(seed=4, num_classes=3)
    a, b = synth_dataset(spec), synth_dataset(spec)
    for _ in range(3):
        (xa, ya), (xb, yb) = next(a), next(b)
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)
    img, lab = synth_batch(synth_dataset(spec), 2)
    assert img.shape == (2, 1, 16, 16, 16) and img.dtype == np.float32
    assert lab.shape == (2, 16, 16, 16) and lab.max() < 3


def test_sphere_intensity_offsets_background():
    img, lab = synth_sample(SynthSpec(noise_sigma=0.1), np.random.default_rng(1))
    assert img[0][lab > 0].mean() - img[0][lab == 0].mean() > 0.5


@pytest.mark.parametrize("r", [4, 5, 6.5, 8])
def test_sphere_volume(r):
    voxels = sphere_mask((24, 24, 24), (12, 12, 12), r).sum()
    assert abs(voxels / (4 / 3 * math.pi * r**3) - 1) < 0.1


def test_impossible_geometry_is_rejected():
    with pytest.raises(ValueError):
        SynthSpec(extents=(8, 8, 8), radius_range=(5, 6))
    with pytest.raises(ValueError):
        SynthSpec(radius_range=(4, 2))


def test_synth_spec_json(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"extents": [16, 16, 16], "num_spheres": 3, "seed": 2}))
    spec = SynthSpec.from_json(path)
    assert spec.num_spheres == 3 and spec.extents == (16, 16, 16)


TOY = ModelConfig(base_width=4, num_stages=1, num_classes=2)
TOY_SPEC = SynthSpec(extents=(8, 8, 8), radius_range=(2, 3))


def test_zero_steps_returns_initial_weights():
    initial = weight_store(build_model(TOY, seed=0))
    result = train_toy(TOY, TOY_SPEC, 0)
    assert result.trace == []
    after = weight_store(result.model)
    assert all(np.array_equal(initial[k], after[k]) for k in initial)


def test_training_is_deterministic_and_writes_traces(tmp_path):
    a = train_toy(TOY, TOY_SPEC, 6, seed=1, val_samples=2)
    b = train_toy(TOY, TOY_SPEC, 6, seed=1, val_samples=2)
    assert a.trace == b.trace
    assert [r.step for r in a.trace] == list(range(6))
    assert a.trace[-1].lr < a.trace[0].lr
    a.write_csv(tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert list(rows[0]) == ["step", "lr", "loss", "dice", "iou"] and len(rows) == 6
    assert len(json.loads(a.to_json())["trace"]) == 6


def test_class_count_mismatch_is_rejected():
    with pytest.raises(ValueError):
        train_toy(TOY, SynthSpec(num_classes=3), 1)


def test_divergence_reports_the_step():
    model = build_model(TOY)
    model.stem.conv.weight.data[...] = np.nan
    with pytest.raises(DivergenceError) as info:
        train_toy(TOY, TOY_SPEC, 3, model=model)
    assert info.value.step == 0


def test_backward_reaches_every_parameter():
    model = build_model(TOY, dtype=np.float64)
    img, lab = synth_batch(synth_dataset(TOY_SPEC), 2)
    with Tape() as tape:
        loss = combined_loss(model_forward(model, Tensor(img.astype(np.float64)), "train"), lab)
    grads = backward(tape, loss)
    silent = [p for p, t in model.named_parameters() if not np.any(grads.get(t, np.zeros(1)))]
    assert not silent
