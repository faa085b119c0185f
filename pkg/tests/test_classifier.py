"""Classifier: cross-entropy formula, scoring, augmentation twin, training."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from albedoadapt.classifier import (
    ClassifierError,
    TinyClassifier,
    binary_ce,
    build_classifier,
    classifier_accuracy,
    classifier_checkpoint,
    finetune_classifier,
    load_classifier,
    score,
    score_batch,
    soft_gain_torch,
    train_initial,
)
from albedoadapt.core import LabeledAlbedo, PNSets
from albedoadapt.synthgen import generate_dataset, illuminance_augment
from albedoadapt.torchutil import init_params, torch_gen


def tiny_ckpt(seed=0):
    model = TinyClassifier(hidden=4).double()
    init_params(model, torch_gen(seed))
    return classifier_checkpoint(model, {"type": "tiny", "hidden": 4}, "initial")


def member(sid, albedo, label, iteration=1):
    return LabeledAlbedo(
        sample_id=sid,
        condition_id=sid,
        albedo=albedo,
        score=0.995 if label == "positive" else 0.1,
        label=label,
        provenance="pseudo",
        iteration=iteration,
    )


# ---------------------------------------------------------------------------
# loss


def test_binary_ce_at_half_is_exactly_ln2():
    probs = torch.full((64,), 0.5, dtype=torch.float64)
    labels = torch.randint(0, 2, (64,)).to(torch.float64)
    assert float(binary_ce(probs, labels)) == math.log(2.0)


def test_binary_ce_matches_manual_formula():
    probs = torch.tensor([0.2, 0.9, 0.7, 0.4], dtype=torch.float64)
    labels = torch.tensor([0.0, 1.0, 0.0, 1.0], dtype=torch.float64)
    want = -(
        math.log(0.8) + math.log(0.9) + math.log(0.3) + math.log(0.4)
    ) / 4.0
    assert float(binary_ce(probs, labels)) == pytest.approx(want, abs=1e-15)


def test_binary_ce_clamps_extreme_probabilities():
    probs = torch.tensor([0.0, 1.0], dtype=torch.float64)
    labels = torch.tensor([1.0, 0.0], dtype=torch.float64)
    want = -math.log(1e-7)
    assert float(binary_ce(probs, labels)) == pytest.approx(want, rel=1e-9)


def test_binary_ce_validates_inputs():
    with pytest.raises(ClassifierError):
        binary_ce(torch.zeros(0), torch.zeros(0))
    with pytest.raises(ClassifierError):
        binary_ce(torch.tensor([0.5]), torch.tensor([0.7]))


# ---------------------------------------------------------------------------
# scoring


def test_score_batch_shape_range_and_batching():
    ckpt = tiny_ckpt()
    imgs = np.random.default_rng(0).uniform(0, 1, (7, 16, 16, 3))
    s = score_batch(ckpt, imgs, batch_size=3)
    assert s.shape == (7,)
    assert s.dtype == np.float64
    assert np.all((s > 0) & (s < 1))
    assert np.allclose(s, score_batch(ckpt, imgs, batch_size=7), atol=1e-12)
    assert score(ckpt, imgs[0]) == pytest.approx(s[0], abs=1e-12)


def test_score_is_invariant_to_global_brightness_shift():
    # the net removes per-image mean intensity before any conv
    ckpt = tiny_ckpt()
    img = np.random.default_rng(1).uniform(0.3, 0.6, (16, 16, 3))
    assert score(ckpt, img) == pytest.approx(score(ckpt, img + 0.2), abs=1e-9)


def test_classifier_accuracy_excludes_ambiguous():
    ckpt = tiny_ckpt()
    rng = np.random.default_rng(2)
    imgs = rng.uniform(0, 1, (4, 16, 16, 3))
    scores = score_batch(ckpt, imgs)
    labels = ["positive" if s >= 0.5 else "negative" for s in scores]
    items = list(zip(imgs, labels))
    assert classifier_accuracy(ckpt, items) == 1.0
    flipped = [
        (img, "negative" if lab == "positive" else "positive")
        for img, lab in items
    ]
    assert classifier_accuracy(ckpt, flipped) == 0.0
    mixed = items[:2] + [(imgs[2], "ambiguous"), (imgs[3], "ambiguous")]
    assert classifier_accuracy(ckpt, mixed) == 1.0
    with pytest.raises(ClassifierError):
        classifier_accuracy(ckpt, [(imgs[0], "ambiguous")])


def test_build_classifier_rejects_unknown_arch():
    with pytest.raises(ClassifierError):
        build_classifier({"type": "resnet"})


def test_load_classifier_rejects_wrong_kind():
    import dataclasses

    wrong = dataclasses.replace(tiny_ckpt(), kind="denoiser")
    with pytest.raises(ClassifierError):
        load_classifier(wrong)


def test_tiny_classifier_fits_finite_difference_budget():
    n_params = sum(p.numel() for p in TinyClassifier(hidden=4).parameters())
    assert n_params == 117
    assert n_params <= 500


# ---------------------------------------------------------------------------
# augmentation twin


@given(
    st.floats(0.5, 1.5),
    st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=12),
)
def test_soft_gain_torch_matches_numpy_augment(gain, values):
    arr = np.asarray(values, dtype=np.float64).reshape(1, 1, -1, 1)
    want = illuminance_augment(arr.reshape(-1, 1, 1), gain=gain).ravel()
    got = soft_gain_torch(
        torch.from_numpy(arr), torch.tensor(gain, dtype=torch.float64)
    ).numpy().ravel()
    assert np.allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# training


@pytest.fixture(scope="module")
def synth_pairs():
    return generate_dataset(12, "synthetic", 16, seed=3)


def test_train_initial_smoke_and_determinism(synth_pairs):
    kwargs = dict(channels=8, steps=30, lr=1e-3, batch_size=8, seed=0)
    a, log_a = train_initial(synth_pairs, **kwargs)
    b, _ = train_initial(synth_pairs, **kwargs)
    assert a.content_hash() == b.content_hash()
    assert a.provenance == "initial"
    assert 0.0 <= a.meta["holdout_accuracy"] <= 1.0
    assert log_a["holdout_accuracy"] == a.meta["holdout_accuracy"]
    assert len(log_a["losses"]) == 30
    c, _ = train_initial(synth_pairs, channels=8, steps=30, lr=1e-3, batch_size=8, seed=1)
    assert a.content_hash() != c.content_hash()


def test_train_initial_separates_albedo_from_rgb(synth_pairs):
    ckpt, _ = train_initial(
        synth_pairs, channels=8, steps=120, lr=2e-3, batch_size=16, seed=0
    )
    albedo_scores = score_batch(ckpt, np.stack([p.albedo for p in synth_pairs]))
    rgb_scores = score_batch(ckpt, np.stack([p.rgb for p in synth_pairs]))
    assert albedo_scores.mean() > rgb_scores.mean() + 0.2


def test_finetune_classifier_needs_both_sets(synth_pairs):
    prev, _ = train_initial(synth_pairs, channels=8, steps=5, lr=1e-3, batch_size=8, seed=0)
    rng = np.random.default_rng(0)
    pos = [member(f"p{i}", rng.uniform(0, 1, (16, 16, 3)), "positive") for i in range(3)]
    neg = [member(f"n{i}", rng.uniform(0, 1, (16, 16, 3)), "negative") for i in range(3)]
    with pytest.raises(ClassifierError):
        finetune_classifier(prev, PNSets(iteration=1, positives=pos, negatives=[]),
                            steps=5, lr=1e-3, batch_size=4, seed=0)
    with pytest.raises(ClassifierError):
        finetune_classifier(prev, PNSets(iteration=1, positives=[], negatives=neg),
                            steps=5, lr=1e-3, batch_size=4, seed=0)
    ckpt, log = finetune_classifier(
        prev, PNSets(iteration=1, positives=pos, negatives=neg),
        steps=5, lr=1e-3, batch_size=4, seed=0,
    )
    assert ckpt.provenance == "finetuned"
    assert len(log["losses"]) == 5
    assert ckpt.content_hash() != prev.content_hash()


def test_finetune_classifier_is_deterministic(synth_pairs):
    prev, _ = train_initial(synth_pairs, channels=8, steps=5, lr=1e-3, batch_size=8, seed=0)
    rng = np.random.default_rng(1)
    sets = PNSets(
        iteration=2,
        positives=[member(f"p{i}", rng.uniform(0, 1, (16, 16, 3)), "positive", 2) for i in range(3)],
        negatives=[member(f"n{i}", rng.uniform(0, 1, (16, 16, 3)), "negative", 2) for i in range(3)],
    )
    kwargs = dict(steps=8, lr=1e-3, batch_size=4, seed=5)
    a, _ = finetune_classifier(prev, sets, **kwargs)
    b, _ = finetune_classifier(prev, sets, **kwargs)
    assert a.content_hash() == b.content_hash()
