"""Answer scoring: element-wise interactions of the fused vector with each
candidate encoding, a linear score per candidate, softmax confidence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mdam import autodiff as ad
from mdam.data import SchemaError


@dataclass
class AnswerScores:
    logits: ad.Tensor         # (5,) raw scores
    probabilities: ad.Tensor  # (5,) softmax of the logits
    predicted: int            # argmax, lowest index on exact ties


def score_answers(o, answers, weight, bias):
    """Score the five candidates from the fused vector.

    The interaction matrix concatenates element-wise product and element-wise
    sum of the tiled fused vector with each answer row, then a single linear
    map with a scalar bias yields one logit per candidate.
    """
    if answers.shape[0] != 5:
        raise SchemaError(f"expected 5 answer rows, got {answers.shape[0]}")
    o_tile = ad.tile_rows(o, 5)
    interactions = ad.concat_lastdim([ad.mul(o_tile, answers), ad.add(o_tile, answers)])
    logits = ad.add(ad.reshape(ad.matmul(interactions, weight), (5,)), bias)
    probabilities = ad.softmax_lastdim(logits)
    return AnswerScores(logits=logits, probabilities=probabilities,
                        predicted=int(np.argmax(logits.data)))


def predict(scores):
    """The selected answer index (ties already broken toward lowest index)."""
    return scores.predicted
