"""Scoring objects against an expression and turning scores into a loss.

Each component (subject, intra-relation, inter-relation) is scored as an inner
product of two tanh-squashed projections — one of the language summary, one of
the per-node representation.  The three component scores are mixed by the
expression's component weights, softmaxed over the scene's objects, and trained
with the negative log-likelihood of the labeled referent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, glorot_uniform

__all__ = [
    "MatchingParams",
    "init_matching_params",
    "component_score",
    "combine_scores",
    "referent_probabilities",
    "referent_nll",
    "predicted_index",
]


@dataclass
class MatchingParams:
    """Projection pairs to a shared space, one pair per component."""

    lang_subject: Tensor    # (dim, dim)
    lang_intra: Tensor
    lang_inter: Tensor
    node_subject: Tensor    # (2*dim, dim) — node representations are two encoders wide
    node_intra: Tensor      # (dim, dim)
    node_inter: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in (
            "lang_subject", "lang_intra", "lang_inter",
            "node_subject", "node_intra", "node_inter")}


def init_matching_params(rng: np.random.Generator, dim: int) -> MatchingParams:
    return MatchingParams(
        lang_subject=glorot_uniform(rng, (dim, dim)),
        lang_intra=glorot_uniform(rng, (dim, dim)),
        lang_inter=glorot_uniform(rng, (dim, dim)),
        node_subject=glorot_uniform(rng, (2 * dim, dim)),
        node_intra=glorot_uniform(rng, (dim, dim)),
        node_inter=glorot_uniform(rng, (dim, dim)),
    )


def component_score(lang_summary: Tensor, node_reps: Optional[Tensor],
                    lang_w: Tensor, node_w: Tensor, num_nodes: int) -> Tensor:
    """Per-node score column (N, 1): tanh(node proj) · tanh(language proj).

    ``node_reps`` of None means the scene offers no evidence for this
    component (e.g. no such edges); the score is exactly zero for every node,
    which is also what the formula yields on a zero representation.
    """
    if node_reps is None:
        return Tensor(np.zeros((num_nodes, 1)))
    lang_vec = T.tanh(T.matmul(lang_summary, lang_w))        # (1, dim)
    node_mat = T.tanh(T.matmul(node_reps, node_w))           # (N, dim)
    return T.matmul(node_mat, T.transpose(lang_vec))         # (N, 1)


def combine_scores(scores: dict[str, Tensor], weights_row: Tensor) -> Tensor:
    """Mix component score columns by the expression's component weights.

    ``weights_row`` is (1, 3) ordered (subject, intra, inter).
    """
    order = ("subject", "intra", "inter")
    total = None
    for col, name in enumerate(order):
        w = T.slice_cols(weights_row, col, col + 1)          # (1, 1)
        piece = T.mul(scores[name], w)
        total = piece if total is None else T.add(total, piece)
    return total


def referent_probabilities(combined: Tensor) -> Tensor:
    """Softmax over the scene's objects, shape (N, 1)."""
    return T.softmax(combined, axis=0)


def referent_nll(probabilities: Tensor, label_index: int) -> Tensor:
    """Negative log probability of the labeled referent, shape (1, 1)."""
    n = probabilities.shape[0]
    if not 0 <= label_index < n:
        raise IndexError(f"label {label_index} out of range for {n} objects")
    picked = T.gather_rows(probabilities, np.array([label_index]))
    return T.neg(T.log(picked))


def predicted_index(probabilities: Tensor) -> int:
    """Argmax object index; ties resolve to the lowest index."""
    return int(np.argmax(probabilities.data[:, 0]))
