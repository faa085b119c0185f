"""Absolute-threshold pseudo-labeling, set rectification, preference pairs.

partition assigns positive/negative by score thresholds (boundaries
inclusive). rectify_sets keeps the positive id set exactly, refreshing its
albedos to the newest estimates, and drops negatives whose refreshed score
rose above the rectify threshold; retained members keep the score that
originally qualified them, so stored label invariants stay intact (the
refreshed scores are persisted separately by the loop). Preference pairs
require strictly greater win scores; ties emit nothing.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import LabeledAlbedo, PNSets, PreferencePair
from .metrics import mse


class PseudoLabelError(Exception):
    pass


def partition(
    scored: Sequence[LabeledAlbedo], tau_pos: float, tau_neg: float
) -> tuple[list[LabeledAlbedo], list[LabeledAlbedo], list[LabeledAlbedo]]:
    """Split scored albedos into (positives, negatives, unassigned).

    positives: score >= tau_pos; negatives: score <= tau_neg; the rest
    unassigned. Members come back relabeled with provenance=pseudo.
    """
    if not tau_neg < tau_pos:
        raise PseudoLabelError(f"need tau_neg < tau_pos, got {tau_neg} >= {tau_pos}")
    pos, neg, rest = [], [], []
    for item in scored:
        if item.score is None:
            raise PseudoLabelError(f"sample {item.sample_id} has no score")
        if item.score >= tau_pos:
            label, bucket = "positive", pos
        elif item.score <= tau_neg:
            label, bucket = "negative", neg
        else:
            label, bucket = "unlabeled", rest
        bucket.append(
            LabeledAlbedo(
                sample_id=item.sample_id,
                condition_id=item.condition_id,
                albedo=item.albedo,
                score=item.score,
                label=label,
                provenance="pseudo",
                iteration=item.iteration,
            )
        )
    return pos, neg, rest


def rectify_sets(
    prev_pos: Sequence[LabeledAlbedo],
    prev_neg: Sequence[LabeledAlbedo],
    new_albedos_by_id: Mapping[str, np.ndarray],
    new_scores_by_id: Mapping[str, float],
    tau_rectify: float,
    iteration: int,
) -> PNSets:
    """Build the next iteration's P/N sets from the previous ones.

    Positives keep their id set with albedos replaced by the newest
    estimates; negatives are retained only while their refreshed score
    stays <= tau_rectify.
    """
    for member in list(prev_pos) + list(prev_neg):
        if member.sample_id not in new_albedos_by_id:
            raise PseudoLabelError(f"no refreshed albedo for {member.sample_id}")
        if member.sample_id not in new_scores_by_id:
            raise PseudoLabelError(f"no refreshed score for {member.sample_id}")

    def refreshed(member: LabeledAlbedo) -> LabeledAlbedo:
        return LabeledAlbedo(
            sample_id=member.sample_id,
            condition_id=member.condition_id,
            albedo=new_albedos_by_id[member.sample_id],
            score=member.score,
            label=member.label,
            provenance=member.provenance,
            iteration=member.iteration,
        )

    positives = [refreshed(m) for m in prev_pos]
    negatives = [
        refreshed(m)
        for m in prev_neg
        if new_scores_by_id[m.sample_id] <= tau_rectify
    ]
    return PNSets(iteration=iteration, positives=positives, negatives=negatives)


def build_preference_pairs(
    conditions: Sequence[tuple],
    albedos_by_iter: Mapping[int, Mapping[str, np.ndarray]],
    scores_by_iter: Mapping[int, Mapping[str, float]],
    win_iter: int,
    lose_iters: Sequence[int],
) -> list[PreferencePair]:
    """Emit (win, lose) pairs per condition and lose iteration.

    conditions: sequence of (condition_id, condition image). A pair is
    emitted iff score(win) > score(lose) strictly.
    """
    if win_iter in lose_iters:
        raise PseudoLabelError(f"win iteration {win_iter} also in lose_iters")
    pairs = []
    for cid, cond_img in conditions:
        for src in (win_iter, *lose_iters):
            if src not in albedos_by_iter or cid not in albedos_by_iter[src]:
                raise PseudoLabelError(f"missing albedo for ({cid}, iter {src})")
            if src not in scores_by_iter or cid not in scores_by_iter[src]:
                raise PseudoLabelError(f"missing score for ({cid}, iter {src})")
        w_score = scores_by_iter[win_iter][cid]
        for lose in lose_iters:
            l_score = scores_by_iter[lose][cid]
            if w_score > l_score:
                pairs.append(
                    PreferencePair(
                        condition_id=cid,
                        condition=cond_img,
                        win=albedos_by_iter[win_iter][cid],
                        lose=albedos_by_iter[lose][cid],
                        win_score=w_score,
                        lose_score=l_score,
                        win_source_iter=win_iter,
                        lose_source_iter=lose,
                    )
                )
    return pairs


def oracle_annotate(
    albedo: np.ndarray, hidden_true_albedo: np.ndarray, mse_threshold: float
) -> str:
    """Simulated annotator: positive iff MSE against the hidden truth is
    below the threshold. Only used where a human would otherwise label."""
    return "positive" if mse(albedo, hidden_true_albedo) < mse_threshold else "negative"
