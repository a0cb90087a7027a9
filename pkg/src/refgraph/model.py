"""The full grounding model: language + object graph + matching, per variant.

Variants (ablation rungs, weakest to strongest):

* ``NodeRep``  — whole-expression Bi-LSTM summary against per-node encodings;
  no relation edges, no attention anywhere.
* ``GraphRep`` — adds the language decomposition and relation evidence as
  plain (unattended) sums of each node's encoded edges.
* ``NodeAttn`` — GraphRep plus language-guided node attention.
* ``EdgeAttn`` — GraphRep plus language-guided edge attention.
* ``LGRANs``   — both attentions; the full model.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .graph_attention import (
    GraphAttentionParams,
    aggregate_edges,
    aggregate_nodes,
    edge_attention,
    encode_graphs,
    init_graph_attention_params,
    node_attention,
)
from .language import (
    COMPONENTS,
    BatchDecomposition,
    BatchEncoding,
    Expression,
    ExpressionBatch,
    LanguageParams,
    Vocabulary,
    decompose_batch,
    encode_batch,
    init_language_params,
)
from .matching import (
    MatchingParams,
    combine_scores,
    component_score,
    init_matching_params,
    predicted_index,
    referent_nll,
    referent_probabilities,
)
from .scenegraph import ObjectGraph
from .tensor import Tape, Tensor

__all__ = ["VARIANTS", "VariantSpec", "ModelConfig", "Model", "ItemResult",
           "ForwardResult"]

VARIANTS = ("NodeRep", "GraphRep", "NodeAttn", "EdgeAttn", "LGRANs")


@dataclass(frozen=True)
class VariantSpec:
    decompose: bool
    edges: bool
    node_attn: bool
    edge_attn: bool


_VARIANT_SPECS = {
    "NodeRep": VariantSpec(False, False, False, False),
    "GraphRep": VariantSpec(True, True, False, False),
    "NodeAttn": VariantSpec(True, True, True, False),
    "EdgeAttn": VariantSpec(True, True, False, True),
    "LGRANs": VariantSpec(True, True, True, True),
}


@dataclass
class ModelConfig:
    """Shapes and switches that define a model instance."""

    dim: int = 512
    appearance_dim: int = 64
    k: int = 5
    normalization: str = "layer"
    dropout: float = 0.4
    variant: str = "LGRANs"
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; one of {VARIANTS}")
        if self.dim % 2 != 0:
            raise ValueError("dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ItemResult:
    """Outputs for one (scene, expression) pair within a forward batch."""

    probabilities: Tensor                    # (N, 1)
    predicted: int
    loss: Optional[Tensor]                   # (1, 1) or None when unlabeled
    num_nodes: int
    node_attention: Optional[np.ndarray] = None      # (N,)
    intra_attention: Optional[np.ndarray] = None     # (E_intra,)
    inter_attention: Optional[np.ndarray] = None     # (E_inter,)
    component_weights: Optional[np.ndarray] = None   # (3,)
    token_attention: Optional[dict[str, np.ndarray]] = None
    component_scores: Optional[dict[str, np.ndarray]] = None  # name -> (N,)
    combined_scores: Optional[np.ndarray] = None     # (N,)


@dataclass
class ForwardResult:
    loss: Optional[Tensor]       # mean NLL over labeled items
    items: list[ItemResult]


class Model:
    """Parameter bundle plus the batched forward pass."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        self.spec = _VARIANT_SPECS[config.variant]
        rng = np.random.default_rng(config.init_seed)
        self.language: LanguageParams = init_language_params(
            rng, len(vocab), config.dim)
        self.graph: GraphAttentionParams = init_graph_attention_params(
            rng, config.dim, config.appearance_dim, config.normalization,
            config.dropout)
        self.matching: MatchingParams = init_matching_params(rng, config.dim)
        # separate stream for train-time stochastics (dropout masks)
        self.dropout_rng = np.random.default_rng(
            np.random.SeedSequence(config.init_seed).spawn(1)[0])

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, t in self.language.tensors().items():
            out[f"language.{name}"] = t
        for name, t in self.graph.tensors().items():
            out[f"graph.{name}"] = t
        for name, t in self.matching.tensors().items():
            out[f"match.{name}"] = t
        return out

    # -- forward -----------------------------------------------------------

    def forward_batch(self, items: Sequence[tuple[ObjectGraph, Expression, Optional[int]]],
                      train: bool, details: bool = False) -> ForwardResult:
        """Score every (graph, expression, label) item; mean NLL over labels.

        Graph encodings are shared between items referring to the same graph
        object, so passing all of a scene's expressions together is cheap.
        """
        if not items:
            raise ValueError("empty forward batch")
        spec = self.spec
        rng = self.dropout_rng

        unique: list[ObjectGraph] = []
        index_of: dict[int, int] = {}
        for graph, _, _ in items:
            if id(graph) not in index_of:
                index_of[id(graph)] = len(unique)
                unique.append(graph)
        encoded = encode_graphs(unique, self.graph, train, rng,
                                with_edges=spec.edges)

        exprs = [expr for _, expr, _ in items]
        batch = ExpressionBatch.from_expressions(exprs, self.vocab.pad_index)
        enc = encode_batch(batch, self.language)
        dec: Optional[BatchDecomposition] = (
            decompose_batch(enc, self.language) if spec.decompose else None)

        results: list[ItemResult] = []
        losses: list[Tensor] = []
        for b, (graph, expr, label) in enumerate(items):
            eg = encoded[index_of[id(graph)]]
            n = eg.num_nodes
            if spec.decompose:
                summaries = {name: T.slice_rows(dec.components[name], b, b + 1)
                             for name in COMPONENTS}
                weights_row = T.slice_rows(dec.weights, b, b + 1)
            else:
                summaries = {"subject": T.slice_rows(enc.final_state, b, b + 1)}
                weights_row = None

            attn_obj = (node_attention(eg, summaries["subject"], self.graph)
                        if spec.node_attn else None)
            node_reps = aggregate_nodes(eg, attn_obj)
            scores = {"subject": component_score(
                summaries["subject"], node_reps,
                self.matching.lang_subject, self.matching.node_subject, n)}

            attn_intra = attn_inter = None
            if spec.edges:
                if spec.edge_attn:
                    attn_intra = edge_attention(eg, "intra", summaries["intra"],
                                                self.graph)
                    attn_inter = edge_attention(eg, "inter", summaries["inter"],
                                                self.graph)
                intra_reps = aggregate_edges(eg, "intra", attn_intra)
                inter_reps = aggregate_edges(eg, "inter", attn_inter)
                scores["intra"] = component_score(
                    summaries["intra"], intra_reps,
                    self.matching.lang_intra, self.matching.node_intra, n)
                scores["inter"] = component_score(
                    summaries["inter"], inter_reps,
                    self.matching.lang_inter, self.matching.node_inter, n)
                combined = combine_scores(scores, weights_row)
            else:
                combined = scores["subject"]

            probs = referent_probabilities(combined)
            loss = referent_nll(probs, label) if label is not None else None
            if loss is not None:
                losses.append(loss)

            item = ItemResult(probabilities=probs,
                              predicted=predicted_index(probs),
                              loss=loss, num_nodes=n)
            if details:
                t_len = len(expr)
                item.node_attention = (attn_obj.data[:, 0].copy()
                                       if attn_obj is not None else None)
                item.intra_attention = (attn_intra.data[:, 0].copy()
                                        if attn_intra is not None else None)
                item.inter_attention = (attn_inter.data[:, 0].copy()
                                        if attn_inter is not None else None)
                item.component_weights = (weights_row.data[0].copy()
                                          if weights_row is not None else None)
                if dec is not None:
                    item.token_attention = {
                        name: dec.token_attention[name].data[b, :t_len].copy()
                        for name in COMPONENTS}
                item.component_scores = {name: col.data[:, 0].copy()
                                         for name, col in scores.items()}
                item.combined_scores = combined.data[:, 0].copy()
            results.append(item)

        total: Optional[Tensor] = None
        if losses:
            acc = losses[0]
            for piece in losses[1:]:
                acc = T.add(acc, piece)
            total = T.scale(acc, 1.0 / len(losses))
        return ForwardResult(loss=total, items=results)

    def predict(self, graph: ObjectGraph, expr: Expression,
                details: bool = True) -> ItemResult:
        """Evaluation-mode forward for a single pair."""
        result = self.forward_batch([(graph, expr, None)], train=False,
                                    details=details)
        return result.items[0]

    def training_loss(self, items, train: bool = True) -> tuple[Tape, ForwardResult]:
        """Build one taped forward pass; caller runs backward and the update."""
        with Tape() as tape:
            result = self.forward_batch(items, train=train)
        return tape, result
