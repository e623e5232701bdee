"""Ranking metrics for link prediction (AP) and node classification (AUROC)."""
from __future__ import annotations

import math

import numpy as np


def average_precision(pos_scores, neg_scores) -> float:
    """
    AP over the merged ranking of positives (label 1) and negatives (label 0).

    Items are ranked by descending score; equal scores keep input order with
    positives listed before negatives. AP is the mean precision at each
    positive's rank.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("average_precision needs non-empty positive and negative scores")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="stable")
    hits = np.cumsum(labels[order])
    ranks = np.arange(1, len(scores) + 1)
    at_pos = labels[order] == 1
    precisions = hits[at_pos] / ranks[at_pos]
    return math.fsum(precisions.tolist()) / len(pos)


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties counted as 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = scores[labels == 1]
    neg = np.sort(scores[labels != 1])
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("auroc needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # twice the Mann-Whitney U, an exact integer
    twice_u = int((2 * below + (at_or_below - below)).sum())
    return twice_u / (2 * len(pos) * len(neg))
