"""Expression encoding and its decomposition into three guidance signals.

A referring expression is embedded token-by-token, run through a single-layer
Bi-LSTM (zero initial states, hidden size = dim/2 per direction), and then
split by three learned token attentions into subject, within-category-relation,
and cross-category-relation summary vectors, plus a softmax weighting that says
how much each of the three matters for this expression.

The implementation is batched: expressions are right-padded to a common length
and a 0/1 mask freezes LSTM state on padding, keeps padded tokens out of every
softmax, and zeroes them out of pooled sums.  Single-expression calls are just
batches of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, glorot_uniform

__all__ = [
    "PAD_TOKEN",
    "UNK_TOKEN",
    "Vocabulary",
    "Expression",
    "tokenize",
    "LanguageParams",
    "init_language_params",
    "ExpressionBatch",
    "BatchEncoding",
    "BatchDecomposition",
    "encode_batch",
    "decompose_batch",
    "COMPONENTS",
]

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
COMPONENTS = ("subject", "intra", "inter")


class Vocabulary:
    """Sorted token list; index = position.  Padding and unknown always present."""

    def __init__(self, tokens: Iterable[str]):
        full = set(tokens) | {PAD_TOKEN, UNK_TOKEN}
        self._tokens = sorted(full)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}

    @classmethod
    def from_token_lists(cls, token_lists: Iterable[Sequence[str]]) -> "Vocabulary":
        return cls(tok for toks in token_lists for tok in toks)

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    @property
    def pad_index(self) -> int:
        return self._index[PAD_TOKEN]

    @property
    def unk_index(self) -> int:
        return self._index[UNK_TOKEN]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index_of(self, token: str) -> int:
        return self._index.get(token, self._index[UNK_TOKEN])

    def token_at(self, index: int) -> str:
        return self._tokens[index]

    def to_text(self) -> str:
        return "\n".join(self._tokens) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = [ln for ln in text.splitlines() if ln]
        vocab = cls(lines)
        if vocab.tokens != lines:
            raise ValueError("vocabulary file is not a sorted unique token list")
        return vocab


@dataclass(frozen=True)
class Expression:
    """Token indices (length >= 1) plus the optional raw surface string."""

    indices: tuple[int, ...]
    text: str | None = None

    def __post_init__(self):
        if len(self.indices) < 1:
            raise ValueError("an expression needs at least one token")

    def __len__(self) -> int:
        return len(self.indices)


def tokenize(text: str, vocab: Vocabulary) -> Expression:
    """Lowercase + whitespace split; unknown tokens map to the unknown index."""
    words = text.lower().split()
    if not words:
        raise ValueError("empty expression")
    return Expression(tuple(vocab.index_of(w) for w in words), text=text)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class LanguageParams:
    """All trainable tensors of the expression side, keyed for checkpoints."""

    dim: int
    embed: Tensor                      # (V, dim); one-hot linear layer
    lstm_fw_ih: Tensor                 # (dim, 4H)
    lstm_fw_hh: Tensor                 # (H, 4H)
    lstm_fw_b: Tensor                  # (1, 4H)
    lstm_bw_ih: Tensor
    lstm_bw_hh: Tensor
    lstm_bw_b: Tensor
    attn_heads: dict[str, Tensor]      # component -> (2H, 1)
    weight_head: Tensor                # (dim, 3)

    @property
    def hidden(self) -> int:
        return self.dim // 2

    def tensors(self) -> dict[str, Tensor]:
        out = {
            "embed": self.embed,
            "lstm_fw_ih": self.lstm_fw_ih,
            "lstm_fw_hh": self.lstm_fw_hh,
            "lstm_fw_b": self.lstm_fw_b,
            "lstm_bw_ih": self.lstm_bw_ih,
            "lstm_bw_hh": self.lstm_bw_hh,
            "lstm_bw_b": self.lstm_bw_b,
            "weight_head": self.weight_head,
        }
        for name, t in self.attn_heads.items():
            out[f"attn_{name}"] = t
        return out


def init_language_params(rng: np.random.Generator, vocab_size: int,
                         dim: int = 512) -> LanguageParams:
    if dim % 2 != 0:
        raise ValueError("language dim must be even (two directional halves)")
    h = dim // 2

    def lstm_bias() -> Tensor:
        b = np.zeros((1, 4 * h))
        b[0, h:2 * h] = 1.0  # forget gate opens at init
        return Tensor(b, requires_grad=True)

    return LanguageParams(
        dim=dim,
        embed=glorot_uniform(rng, (vocab_size, dim)),
        lstm_fw_ih=glorot_uniform(rng, (dim, 4 * h)),
        lstm_fw_hh=glorot_uniform(rng, (h, 4 * h)),
        lstm_fw_b=lstm_bias(),
        lstm_bw_ih=glorot_uniform(rng, (dim, 4 * h)),
        lstm_bw_hh=glorot_uniform(rng, (h, 4 * h)),
        lstm_bw_b=lstm_bias(),
        attn_heads={m: glorot_uniform(rng, (dim, 1)) for m in COMPONENTS},
        weight_head=glorot_uniform(rng, (dim, 3)),
    )


# ---------------------------------------------------------------------------
# batched forward passes

@dataclass
class ExpressionBatch:
    """Right-padded index matrix for a list of expressions."""

    indices: np.ndarray   # (B, T_max) int
    mask: np.ndarray      # (B, T_max) float 0/1
    lengths: list[int]

    @classmethod
    def from_expressions(cls, exprs: Sequence[Expression],
                         pad_index: int) -> "ExpressionBatch":
        if not exprs:
            raise ValueError("empty expression batch")
        lengths = [len(e) for e in exprs]
        t_max = max(lengths)
        idx = np.full((len(exprs), t_max), pad_index, dtype=np.intp)
        mask = np.zeros((len(exprs), t_max), dtype=np.float64)
        for b, e in enumerate(exprs):
            idx[b, :len(e)] = e.indices
            mask[b, :len(e)] = 1.0
        return cls(indices=idx, mask=mask, lengths=lengths)


@dataclass
class BatchEncoding:
    """Per-step embeddings/hidden states for a padded batch."""

    embeddings: list[Tensor]   # T_max tensors of shape (B, dim)
    hidden: list[Tensor]       # T_max tensors of shape (B, dim)
    pooled: Tensor             # (B, dim): sum of embeddings over real tokens
    final_state: Tensor        # (B, dim): [forward at last token, backward at first]
    mask: np.ndarray           # (B, T_max)
    lengths: list[int]

    @property
    def batch_size(self) -> int:
        return int(self.mask.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.mask.shape[1])


def _lstm_direction(xs: list[Tensor], mask: np.ndarray, w_ih: Tensor,
                    w_hh: Tensor, b: Tensor, reverse: bool) -> list[Tensor]:
    """One LSTM direction over padded steps; masked steps keep the prior state.

    With right padding, running the reversed direction under the same mask
    leaves its state at zero until the sequence's real tail is reached, so
    position t only ever sees tokens t..T of its own expression.
    """
    bsz, t_max = mask.shape
    h_size = w_hh.shape[0]
    h = Tensor(np.zeros((bsz, h_size)))
    c = Tensor(np.zeros((bsz, h_size)))
    out: list[Tensor | None] = [None] * t_max
    order = range(t_max - 1, -1, -1) if reverse else range(t_max)
    for t in order:
        z = T.add(T.add(T.matmul(xs[t], w_ih), T.matmul(h, w_hh)), b)
        gate_in = T.sigmoid(T.slice_cols(z, 0, h_size))
        gate_forget = T.sigmoid(T.slice_cols(z, h_size, 2 * h_size))
        candidate = T.tanh(T.slice_cols(z, 2 * h_size, 3 * h_size))
        gate_out = T.sigmoid(T.slice_cols(z, 3 * h_size, 4 * h_size))
        c_new = T.add(T.mul(gate_forget, c), T.mul(gate_in, candidate))
        h_new = T.mul(gate_out, T.tanh(c_new))
        m_col = mask[:, t:t + 1]
        if np.all(m_col == 1.0):
            c, h = c_new, h_new
        else:
            m = Tensor(m_col)
            c = T.add(c, T.mul(m, T.sub(c_new, c)))
            h = T.add(h, T.mul(m, T.sub(h_new, h)))
        out[t] = h
    return out  # type: ignore[return-value]


def encode_batch(batch: ExpressionBatch, params: LanguageParams) -> BatchEncoding:
    """Embed and Bi-LSTM-encode a padded batch of expressions."""
    t_max = batch.indices.shape[1]
    xs = [T.relu(T.gather_rows(params.embed, batch.indices[:, t]))
          for t in range(t_max)]

    fw = _lstm_direction(xs, batch.mask, params.lstm_fw_ih, params.lstm_fw_hh,
                         params.lstm_fw_b, reverse=False)
    bw = _lstm_direction(xs, batch.mask, params.lstm_bw_ih, params.lstm_bw_hh,
                         params.lstm_bw_b, reverse=True)
    hidden = [T.concat([fw[t], bw[t]], axis=1) for t in range(t_max)]

    pooled = None
    for t in range(t_max):
        e_t = xs[t]
        if not np.all(batch.mask[:, t] == 1.0):
            e_t = T.mul(e_t, Tensor(batch.mask[:, t:t + 1]))
        pooled = e_t if pooled is None else T.add(pooled, e_t)

    # masking freezes states through the padded tail, so the last forward step
    # holds each expression's final forward state; step 0 holds the backward one
    final_state = T.concat([fw[t_max - 1], bw[0]], axis=1)

    return BatchEncoding(embeddings=xs, hidden=hidden, pooled=pooled,
                         final_state=final_state, mask=batch.mask,
                         lengths=batch.lengths)


@dataclass
class BatchDecomposition:
    """Three token attentions, three summary vectors, and the component weights."""

    token_attention: dict[str, Tensor]   # component -> (B, T_max), pads get 0
    components: dict[str, Tensor]        # component -> (B, dim)
    weights: Tensor                      # (B, 3), rows sum to 1; column order = COMPONENTS
    mask: np.ndarray


def decompose_batch(enc: BatchEncoding, params: LanguageParams) -> BatchDecomposition:
    """Split an encoded batch into subject / intra / inter guidance signals."""
    t_max = enc.max_len
    token_attention: dict[str, Tensor] = {}
    components: dict[str, Tensor] = {}
    for name in COMPONENTS:
        head = params.attn_heads[name]
        scores = T.concat([T.matmul(enc.hidden[t], head) for t in range(t_max)],
                          axis=1)                              # (B, T)
        attn = T.softmax(scores, axis=1, mask=enc.mask)
        summary = None
        for t in range(t_max):
            piece = T.mul(T.slice_cols(attn, t, t + 1), enc.embeddings[t])
            summary = piece if summary is None else T.add(summary, piece)
        token_attention[name] = attn
        components[name] = summary

    weights = T.softmax(T.matmul(enc.pooled, params.weight_head), axis=1)
    return BatchDecomposition(token_attention=token_attention,
                              components=components, weights=weights,
                              mask=enc.mask)
