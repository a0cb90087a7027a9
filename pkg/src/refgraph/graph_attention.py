"""Language-guided attention over the object graph.

Three attentions are computed per (scene, expression) pair, each as
``score = w · tanh(W_lang s + W_graph x)`` followed by a softmax:

* node attention — over all N nodes, guided by the subject signal;
* intra-edge attention — over each node's same-category edges, guided by the
  within-category relation signal, normalized per source node;
* inter-edge attention — over each node's cross-category edges; the edge
  encoder sees ``[edge geometry, raw neighbor feature]`` so the neighbor's
  identity is visible, not just where it sits.

Scenes are encoded once per batch (all nodes/edges stacked into one matrix per
encoder) and the per-expression work is only the fusion + softmax, which keeps
the tape short.  Per-source softmax uses the graph's 0/1 source-incidence
matrix: exponentials are summed into source nodes and broadcast back, so empty
neighborhoods simply contribute nothing rather than a padded zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .scenegraph import ObjectGraph
from .tensor import BatchNormState, Tensor, glorot_uniform

__all__ = [
    "EncoderParams",
    "init_encoder",
    "run_encoder",
    "GraphAttentionParams",
    "init_graph_attention_params",
    "EncodedGraph",
    "encode_graphs",
    "node_attention",
    "edge_attention",
    "aggregate_nodes",
    "aggregate_edges",
]

NORMALIZATION_MODES = ("none", "batch", "layer")


@dataclass
class EncoderParams:
    """Two-layer MLP: linear + norm + ReLU + dropout + linear + norm + ReLU."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    normalization: str
    dropout: float
    gamma1: Optional[Tensor] = None
    beta1: Optional[Tensor] = None
    gamma2: Optional[Tensor] = None
    beta2: Optional[Tensor] = None
    bn1: Optional[BatchNormState] = None
    bn2: Optional[BatchNormState] = None

    def tensors(self) -> dict[str, Tensor]:
        out = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.normalization != "none":
            out.update({"gamma1": self.gamma1, "beta1": self.beta1,
                        "gamma2": self.gamma2, "beta2": self.beta2})
        return out


def init_encoder(rng: np.random.Generator, in_dim: int, out_dim: int,
                 normalization: str, dropout: float) -> EncoderParams:
    if normalization not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode {normalization!r}")
    p = EncoderParams(
        w1=glorot_uniform(rng, (in_dim, out_dim)),
        b1=Tensor(np.zeros((1, out_dim)), requires_grad=True),
        w2=glorot_uniform(rng, (out_dim, out_dim)),
        b2=Tensor(np.zeros((1, out_dim)), requires_grad=True),
        normalization=normalization,
        dropout=dropout,
    )
    if normalization != "none":
        p.gamma1 = Tensor(np.ones((1, out_dim)), requires_grad=True)
        p.beta1 = Tensor(np.zeros((1, out_dim)), requires_grad=True)
        p.gamma2 = Tensor(np.ones((1, out_dim)), requires_grad=True)
        p.beta2 = Tensor(np.zeros((1, out_dim)), requires_grad=True)
    if normalization == "batch":
        p.bn1 = BatchNormState(out_dim)
        p.bn2 = BatchNormState(out_dim)
    return p


def _norm(x: Tensor, gamma, beta, state, mode: str, train: bool) -> Tensor:
    if mode == "none":
        return x
    if mode == "layer":
        return T.layer_norm(x, gamma, beta)
    return T.batch_norm(x, gamma, beta, state, train=train)


def run_encoder(x: Tensor, p: EncoderParams, train: bool,
                rng: np.random.Generator) -> Tensor:
    h = T.add(T.matmul(x, p.w1), p.b1)
    h = _norm(h, p.gamma1, p.beta1, p.bn1, p.normalization, train)
    h = T.relu(h)
    h = T.dropout(h, p.dropout, rng, train)
    h = T.add(T.matmul(h, p.w2), p.b2)
    h = _norm(h, p.gamma2, p.beta2, p.bn2, p.normalization, train)
    return T.relu(h)


@dataclass
class GraphAttentionParams:
    """Encoders plus the fusion maps and scoring vectors for all three attentions."""

    dim: int
    appearance_dim: int
    enc_appearance: EncoderParams     # D_app -> dim
    enc_spatial: EncoderParams        # 5 -> dim
    enc_intra: EncoderParams          # 5 -> dim
    enc_inter: EncoderParams          # 5 + D_app + 5 -> dim
    fuse_lang_node: Tensor            # (dim, dim)
    fuse_graph_node: Tensor           # (2*dim, dim)
    fuse_lang_intra: Tensor           # (dim, dim)
    fuse_graph_intra: Tensor          # (dim, dim)
    fuse_lang_inter: Tensor
    fuse_graph_inter: Tensor
    score_node: Tensor                # (dim, 1)
    score_intra: Tensor
    score_inter: Tensor

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for enc_name in ("enc_appearance", "enc_spatial", "enc_intra", "enc_inter"):
            for k, t in getattr(self, enc_name).tensors().items():
                out[f"{enc_name}.{k}"] = t
        for name in ("fuse_lang_node", "fuse_graph_node", "fuse_lang_intra",
                     "fuse_graph_intra", "fuse_lang_inter", "fuse_graph_inter",
                     "score_node", "score_intra", "score_inter"):
            out[name] = getattr(self, name)
        return out


def init_graph_attention_params(rng: np.random.Generator, dim: int,
                                appearance_dim: int, normalization: str,
                                dropout: float) -> GraphAttentionParams:
    def enc(in_dim):
        return init_encoder(rng, in_dim, dim, normalization, dropout)

    return GraphAttentionParams(
        dim=dim,
        appearance_dim=appearance_dim,
        enc_appearance=enc(appearance_dim),
        enc_spatial=enc(5),
        enc_intra=enc(5),
        enc_inter=enc(5 + appearance_dim + 5),
        fuse_lang_node=glorot_uniform(rng, (dim, dim)),
        fuse_graph_node=glorot_uniform(rng, (2 * dim, dim)),
        fuse_lang_intra=glorot_uniform(rng, (dim, dim)),
        fuse_graph_intra=glorot_uniform(rng, (dim, dim)),
        fuse_lang_inter=glorot_uniform(rng, (dim, dim)),
        fuse_graph_inter=glorot_uniform(rng, (dim, dim)),
        score_node=glorot_uniform(rng, (dim, 1)),
        score_intra=glorot_uniform(rng, (dim, 1)),
        score_inter=glorot_uniform(rng, (dim, 1)),
    )


@dataclass
class EncodedGraph:
    """One scene's encoded nodes/edges plus expression-independent projections."""

    graph: ObjectGraph
    node_encoded: Tensor                 # (N, 2*dim): [appearance enc, spatial enc]
    node_proj: Tensor                    # (N, dim): node_encoded @ fuse_graph_node
    intra_encoded: Optional[Tensor]      # (E_intra, dim) or None when no edges
    intra_proj: Optional[Tensor]
    inter_encoded: Optional[Tensor]
    inter_proj: Optional[Tensor]
    source_intra: Optional[Tensor]       # (N, E_intra) 0/1 incidence, constant
    source_intra_t: Optional[Tensor]
    source_inter: Optional[Tensor]
    source_inter_t: Optional[Tensor]
    intra_segments: list[tuple[int, int]]  # per node: [start, stop) in edge order
    inter_segments: list[tuple[int, int]]

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


def _segments(neighbors: list[list[int]]) -> list[tuple[int, int]]:
    spans, start = [], 0
    for nbrs in neighbors:
        spans.append((start, start + len(nbrs)))
        start += len(nbrs)
    return spans


def encode_graphs(graphs: Sequence[ObjectGraph], params: GraphAttentionParams,
                  train: bool, rng: np.random.Generator,
                  with_edges: bool = True) -> list[EncodedGraph]:
    """Encode many scenes in one pass by stacking their nodes and edges."""
    if not graphs:
        return []
    node_counts = [g.num_nodes for g in graphs]
    app = Tensor(np.concatenate([g.node_appearance for g in graphs], axis=0))
    spa = Tensor(np.concatenate([g.node_spatial for g in graphs], axis=0))
    enc_app = run_encoder(app, params.enc_appearance, train, rng)
    enc_spa = run_encoder(spa, params.enc_spatial, train, rng)
    node_encoded_all = T.concat([enc_app, enc_spa], axis=1)
    node_proj_all = T.matmul(node_encoded_all, params.fuse_graph_node)

    def encode_edge_stack(feats_list, encoder, proj_w):
        counts = [f.shape[0] for f in feats_list]
        total = sum(counts)
        if total == 0:
            return None, None, counts
        stacked = Tensor(np.concatenate([f for f in feats_list if f.shape[0]], axis=0))
        enc = run_encoder(stacked, encoder, train, rng)
        proj = T.matmul(enc, proj_w)
        return enc, proj, counts

    if with_edges:
        intra_feats = [g.intra_edge_features for g in graphs]
        inter_feats = [
            np.concatenate([g.inter_edge_features,
                            g.node_features[[j for _, j in g.inter_edges]]], axis=1)
            if g.inter_edges else np.zeros((0, 5 + g.node_features.shape[1]))
            for g in graphs
        ]
        intra_enc_all, intra_proj_all, intra_counts = encode_edge_stack(
            intra_feats, params.enc_intra, params.fuse_graph_intra)
        inter_enc_all, inter_proj_all, inter_counts = encode_edge_stack(
            inter_feats, params.enc_inter, params.fuse_graph_inter)
    else:
        intra_enc_all = intra_proj_all = inter_enc_all = inter_proj_all = None
        intra_counts = inter_counts = [0] * len(graphs)

    out: list[EncodedGraph] = []
    n_off = e_intra_off = e_inter_off = 0
    for gi, g in enumerate(graphs):
        n = node_counts[gi]
        node_enc = T.slice_rows(node_encoded_all, n_off, n_off + n)
        node_proj = T.slice_rows(node_proj_all, n_off, n_off + n)
        n_off += n

        def take(enc_all, proj_all, off, count):
            if enc_all is None or count == 0:
                return None, None
            return (T.slice_rows(enc_all, off, off + count),
                    T.slice_rows(proj_all, off, off + count))

        intra_enc, intra_proj = take(intra_enc_all, intra_proj_all,
                                     e_intra_off, intra_counts[gi])
        inter_enc, inter_proj = take(inter_enc_all, inter_proj_all,
                                     e_inter_off, inter_counts[gi])
        e_intra_off += intra_counts[gi]
        e_inter_off += inter_counts[gi]

        s_intra = s_intra_t = s_inter = s_inter_t = None
        if intra_enc is not None:
            m = g.edge_source_matrix("intra")
            s_intra, s_intra_t = Tensor(m), Tensor(m.T.copy())
        if inter_enc is not None:
            m = g.edge_source_matrix("inter")
            s_inter, s_inter_t = Tensor(m), Tensor(m.T.copy())

        out.append(EncodedGraph(
            graph=g,
            node_encoded=node_enc,
            node_proj=node_proj,
            intra_encoded=intra_enc,
            intra_proj=intra_proj,
            inter_encoded=inter_enc,
            inter_proj=inter_proj,
            source_intra=s_intra,
            source_intra_t=s_intra_t,
            source_inter=s_inter,
            source_inter_t=s_inter_t,
            intra_segments=_segments(g.intra_neighbors),
            inter_segments=_segments(g.inter_neighbors),
        ))
    return out


def node_attention(eg: EncodedGraph, s_subject: Tensor,
                   params: GraphAttentionParams) -> Tensor:
    """Distribution over the scene's N nodes, shape (N, 1)."""
    lang = T.matmul(s_subject, params.fuse_lang_node)        # (1, dim)
    fused = T.tanh(T.add(eg.node_proj, lang))                # (N, dim)
    scores = T.matmul(fused, params.score_node)              # (N, 1)
    return T.softmax(scores, axis=0)


def edge_attention(eg: EncodedGraph, kind: str, s_relation: Tensor,
                   params: GraphAttentionParams) -> Optional[Tensor]:
    """Per-source-node distributions over ``kind`` edges, shape (E, 1).

    Entries of edges sharing a source node sum to 1.  Returns None when the
    graph has no edges of this kind — an empty set has no distribution.
    """
    if kind == "intra":
        proj, src, src_t, segments = (eg.intra_proj, eg.source_intra,
                                      eg.source_intra_t, eg.intra_segments)
        lang_w, score_w = params.fuse_lang_intra, params.score_intra
    else:
        proj, src, src_t, segments = (eg.inter_proj, eg.source_inter,
                                      eg.source_inter_t, eg.inter_segments)
        lang_w, score_w = params.fuse_lang_inter, params.score_inter
    if proj is None:
        return None

    lang = T.matmul(s_relation, lang_w)
    fused = T.tanh(T.add(proj, lang))
    scores = T.matmul(fused, score_w)                        # (E, 1)

    # per-source max subtraction: a constant shift inside each softmax group
    shift = np.zeros_like(scores.data)
    for start, stop in segments:
        if stop > start:
            shift[start:stop] = scores.data[start:stop].max()
    ex = T.exp(T.sub(scores, Tensor(shift)))
    per_source = T.matmul(src, ex)                           # (N, 1) group sums
    denom = T.matmul(src_t, per_source)                      # (E, 1) back onto edges
    return T.div(ex, denom)


def aggregate_nodes(eg: EncodedGraph, attention: Optional[Tensor]) -> Tensor:
    """Per-node representation, scaled by its own attention when given."""
    if attention is None:
        return eg.node_encoded
    return T.mul(attention, eg.node_encoded)


def aggregate_edges(eg: EncodedGraph, kind: str,
                    attention: Optional[Tensor]) -> Optional[Tensor]:
    """Sum each node's (optionally attention-weighted) encoded edges, (N, dim).

    Nodes with no ``kind`` edges get a zero row; a graph with no such edges at
    all returns None and downstream scoring treats the evidence as absent.
    """
    if kind == "intra":
        enc, src = eg.intra_encoded, eg.source_intra
    else:
        enc, src = eg.inter_encoded, eg.source_inter
    if enc is None:
        return None
    rows = enc if attention is None else T.mul(attention, enc)
    return T.matmul(src, rows)
