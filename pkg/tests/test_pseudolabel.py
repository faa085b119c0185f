"""Pseudo-labeling, rectification, preference pairing vs brute-force mirrors."""

import numpy as np
import pytest

from albedoadapt.core import LabeledAlbedo
from albedoadapt.pseudolabel import (
    PseudoLabelError,
    build_preference_pairs,
    oracle_annotate,
    partition,
    rectify_sets,
)

IMG = np.full((4, 4, 3), 0.5)


def scored(sid, score, label="unlabeled", iteration=1):
    return LabeledAlbedo(
        sample_id=sid,
        condition_id=sid,
        albedo=IMG,
        score=score,
        label=label,
        provenance="pseudo",
        iteration=iteration,
    )


def random_scored(n, seed, include_boundaries=()):
    rng = np.random.default_rng(seed)
    values = list(rng.uniform(0.0, 1.0, n - len(include_boundaries)))
    values += list(include_boundaries)
    return [scored(f"s{i:04d}", float(v)) for i, v in enumerate(values)]


# ---------------------------------------------------------------------------
# partition


def test_partition_boundaries_are_inclusive():
    pos, neg, rest = partition(
        [scored("a", 0.99), scored("b", 0.3), scored("c", 0.5)],
        tau_pos=0.99,
        tau_neg=0.3,
    )
    assert [m.sample_id for m in pos] == ["a"]
    assert [m.sample_id for m in neg] == ["b"]
    assert [m.sample_id for m in rest] == ["c"]
    assert pos[0].label == "positive" and neg[0].label == "negative"
    assert rest[0].label == "unlabeled"
    assert all(m.provenance == "pseudo" for m in pos + neg + rest)


def test_partition_matches_bruteforce_on_random_instance():
    items = random_scored(200, seed=0, include_boundaries=(0.99, 0.3, 0.3000001))
    pos, neg, rest = partition(items, tau_pos=0.99, tau_neg=0.3)
    want_pos = {m.sample_id for m in items if m.score >= 0.99}
    want_neg = {m.sample_id for m in items if m.score <= 0.3}
    assert {m.sample_id for m in pos} == want_pos
    assert {m.sample_id for m in neg} == want_neg
    assert {m.sample_id for m in rest} == (
        {m.sample_id for m in items} - want_pos - want_neg
    )
    assert len(pos) + len(neg) + len(rest) == len(items)


def test_partition_validates_inputs():
    with pytest.raises(PseudoLabelError):
        partition([scored("a", 0.5)], tau_pos=0.3, tau_neg=0.3)
    with pytest.raises(PseudoLabelError):
        partition([scored("a", None)], tau_pos=0.99, tau_neg=0.3)


def test_partition_preserves_scores_and_iteration():
    items = [scored("a", 0.995, iteration=3)]
    pos, _, _ = partition(items, tau_pos=0.99, tau_neg=0.3)
    assert pos[0].score == 0.995
    assert pos[0].iteration == 3


# ---------------------------------------------------------------------------
# rectification


def fresh_albedos(ids, seed=0):
    rng = np.random.default_rng(seed)
    return {sid: rng.uniform(0, 1, (4, 4, 3)) for sid in ids}


def test_rectify_keeps_positives_and_filters_negatives():
    pos = [scored("p0", 0.995, "positive"), scored("p1", 0.991, "positive")]
    neg = [scored("n0", 0.1, "negative"), scored("n1", 0.2, "negative")]
    ids = ["p0", "p1", "n0", "n1"]
    albedos = fresh_albedos(ids)
    new_scores = {"p0": 0.4, "p1": 0.995, "n0": 0.5, "n1": 0.5000001}
    sets = rectify_sets(pos, neg, albedos, new_scores, tau_rectify=0.5, iteration=2)
    assert sets.iteration == 2
    # positive ids survive regardless of the refreshed score
    assert sets.positive_ids == {"p0", "p1"}
    # negatives are retained only while the refreshed score stays at or below
    assert sets.negative_ids == {"n0"}
    for m in sets.positives + sets.negatives:
        assert np.array_equal(m.albedo, albedos[m.sample_id])
    # original qualifying scores are kept, not the refreshed ones
    assert {m.sample_id: m.score for m in sets.positives} == {"p0": 0.995, "p1": 0.991}
    assert sets.negatives[0].score == 0.1


def test_rectify_matches_bruteforce_on_random_instance():
    rng = np.random.default_rng(7)
    pos = [scored(f"p{i}", float(rng.uniform(0.99, 1.0)), "positive") for i in range(40)]
    neg = [scored(f"n{i}", float(rng.uniform(0.0, 0.3)), "negative") for i in range(60)]
    ids = [m.sample_id for m in pos + neg]
    albedos = fresh_albedos(ids, seed=8)
    new_scores = {sid: float(rng.uniform(0.0, 1.0)) for sid in ids}
    sets = rectify_sets(pos, neg, albedos, new_scores, tau_rectify=0.5, iteration=2)
    assert sets.positive_ids == {m.sample_id for m in pos}
    assert sets.negative_ids == {
        m.sample_id for m in neg if new_scores[m.sample_id] <= 0.5
    }


def test_rectify_requires_refreshed_data_for_every_member():
    pos = [scored("p0", 0.995, "positive")]
    neg = [scored("n0", 0.1, "negative")]
    albedos = fresh_albedos(["p0", "n0"])
    scores = {"p0": 0.9, "n0": 0.1}
    with pytest.raises(PseudoLabelError):
        rectify_sets(pos, neg, {"p0": albedos["p0"]}, scores, 0.5, 2)
    with pytest.raises(PseudoLabelError):
        rectify_sets(pos, neg, albedos, {"p0": 0.9}, 0.5, 2)


# ---------------------------------------------------------------------------
# preference pairs


def pair_inputs(n, seed):
    rng = np.random.default_rng(seed)
    conditions = [(f"c{i:04d}", IMG) for i in range(n)]
    albedos = {
        it: {cid: rng.uniform(0, 1, (4, 4, 3)) for cid, _ in conditions}
        for it in (0, 1, 2)
    }
    scores = {
        it: {cid: float(rng.uniform(0, 1)) for cid, _ in conditions}
        for it in (0, 1, 2)
    }
    return conditions, albedos, scores


def test_pairs_require_strictly_greater_win_score():
    conditions = [("c0", IMG)]
    albedos = {it: {"c0": IMG} for it in (0, 1, 2)}
    scores = {0: {"c0": 0.5}, 1: {"c0": 0.2}, 2: {"c0": 0.5}}
    pairs = build_preference_pairs(conditions, albedos, scores, 2, [0, 1])
    # the tie against iteration 0 emits nothing; 2 beats 1
    assert [(p.win_source_iter, p.lose_source_iter) for p in pairs] == [(2, 1)]
    assert pairs[0].win_score == 0.5 and pairs[0].lose_score == 0.2


def test_pairs_match_bruteforce_on_random_instance():
    conditions, albedos, scores = pair_inputs(100, seed=3)
    pairs = build_preference_pairs(conditions, albedos, scores, 2, [0, 1])
    want = [
        (cid, lose)
        for cid, _ in conditions
        for lose in (0, 1)
        if scores[2][cid] > scores[lose][cid]
    ]
    got = [(p.condition_id, p.lose_source_iter) for p in pairs]
    assert got == want
    for p in pairs:
        p.validate()
        assert p.win_source_iter == 2
        assert np.array_equal(p.win, albedos[2][p.condition_id])
        assert np.array_equal(p.lose, albedos[p.lose_source_iter][p.condition_id])
        assert not p.corrupted


def test_pairs_validate_inputs():
    conditions, albedos, scores = pair_inputs(3, seed=4)
    with pytest.raises(PseudoLabelError):
        build_preference_pairs(conditions, albedos, scores, 2, [0, 2])
    missing_albedo = {it: dict(d) for it, d in albedos.items()}
    del missing_albedo[0]["c0001"]
    with pytest.raises(PseudoLabelError):
        build_preference_pairs(conditions, missing_albedo, scores, 2, [0, 1])
    missing_score = {it: dict(d) for it, d in scores.items()}
    del missing_score[1]["c0002"]
    with pytest.raises(PseudoLabelError):
        build_preference_pairs(conditions, albedos, missing_score, 2, [0, 1])


# ---------------------------------------------------------------------------
# oracle annotation


def test_oracle_annotate_threshold_is_strict():
    truth = np.zeros((4, 4, 3))
    near = np.full((4, 4, 3), 0.1)  # mse 0.01
    assert oracle_annotate(near, truth, mse_threshold=0.02) == "positive"
    assert oracle_annotate(near, truth, mse_threshold=0.01) == "negative"
    assert oracle_annotate(near, truth, mse_threshold=0.005) == "negative"
    assert oracle_annotate(truth, truth, mse_threshold=1e-12) == "positive"
