"""Causal subgraph extraction and encoding.

Two pathways feed the prediction heads. The temporal side tokenizes each
endpoint's most recent edges (cosine time encoding plus edge features),
refines them with a one-layer MLP-mixer, scores edges with a bilinear
attention between the endpoints, hard-selects the top-k and pools the
selected rows into ``H^T``. The structural side embeds each endpoint from
its time-windowed n-hop neighborhood, scores neighbors against the other
endpoint's embedding, selects top-k and pools raw node features into
``H^S``. Selection is a hard choice; gradients reach the attention
weights through the renormalized scores used as pooling weights.

Functions here operate on single queries and serve as the reference
semantics; the batched training path in :mod:`sig.model` must agree with
them exactly (tests compare the two).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import EdgeSequence, EventStore, n_hop_neighbors


class ExtractError(ValueError):
    """Raised when a query has no usable context."""


# ---------------------------------------------------------------------------
# time encoding


@dataclass(frozen=True)
class TimeEncodingConfig:
    """Cosine basis frequencies ``alpha**(-(i-1)/beta)`` for i = 1..dim."""

    alpha: float = 10.0
    beta: float = 10.0
    dim: int = 100

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")

    def omega(self) -> np.ndarray:
        i = np.arange(self.dim, dtype=np.float64)
        return self.alpha ** (-i / self.beta)


def time_encode(dt, cfg: TimeEncodingConfig) -> np.ndarray:
    """cos(dt * omega); dt may be a scalar or an array (last axis appended)."""
    dt = np.asarray(dt, dtype=np.float64)
    return np.cos(dt[..., None] * cfg.omega())


def edge_tokens(seq: EdgeSequence, t0: float, cfg: TimeEncodingConfig,
                n_slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Token matrix for one edge sequence, zero-padded to ``n_slots`` rows.

    Row i is ``[cos((t0 - t_i) * omega) || edge features]`` for the i-th
    most recent edge; the boolean mask marks live rows.
    """
    live = len(seq)
    width = cfg.dim + seq.features.shape[1]
    tokens = np.zeros((n_slots, width), dtype=np.float64)
    mask = np.zeros(n_slots, dtype=bool)
    if live:
        tokens[:live, :cfg.dim] = time_encode(t0 - seq.times, cfg)
        tokens[:live, cfg.dim:] = seq.features
        mask[:live] = True
    return tokens, mask


# ---------------------------------------------------------------------------
# mixer


def init_mixer_params(params: ad.ParameterSet, rng: np.random.Generator,
                      token_width: int, hidden: int, n_slots: int,
                      token_expansion: float = 0.5,
                      channel_expansion: float = 4.0) -> None:
    """Register input projection and one token-mix + channel-mix block."""
    tok_h = max(1, int(round(n_slots * token_expansion)))
    ch_h = max(1, int(round(hidden * channel_expansion)))

    def xavier(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    params.add("time_proj.w", xavier(token_width, hidden))
    params.add("time_proj.b", np.zeros(hidden))
    params.add("mixer.tok_w1", xavier(n_slots, tok_h))
    params.add("mixer.tok_b1", np.zeros(tok_h))
    params.add("mixer.tok_w2", xavier(tok_h, n_slots))
    params.add("mixer.tok_b2", np.zeros(n_slots))
    params.add("mixer.ch_w1", xavier(hidden, ch_h))
    params.add("mixer.ch_b1", np.zeros(ch_h))
    params.add("mixer.ch_w2", xavier(ch_h, hidden))
    params.add("mixer.ch_b2", np.zeros(hidden))
    params.add("attn.q_w", xavier(hidden, hidden))
    params.add("attn.k_w", xavier(hidden, hidden))


def mixer_forward(tokens: Tensor, mask: np.ndarray, params: ad.ParameterSet) -> Tensor:
    """One mixer block over a padded token batch.

    ``tokens`` is (..., L, width) with zero rows where ``mask`` is False;
    L may be any length up to the configured slot count (the token-mixing
    weights are sliced to L, which is exact because padded rows are zero).
    Padded rows are re-zeroed after every block so they never leak into
    token mixing or downstream means.
    """
    live = np.asarray(mask, dtype=np.float64)[..., None]
    length = tokens.shape[-2]
    n_slots = params["mixer.tok_w1"].shape[0]
    if length < n_slots:
        rows = np.arange(length)
        w1 = ad.take(params["mixer.tok_w1"], rows, axis=0)
        w2 = ad.take(params["mixer.tok_w2"], rows, axis=1)
        b2 = ad.take(params["mixer.tok_b2"], rows, axis=0)
    else:
        w1 = params["mixer.tok_w1"]
        w2 = params["mixer.tok_w2"]
        b2 = params["mixer.tok_b2"]

    x = ad.masked_linear(tokens, params["time_proj.w"], params["time_proj.b"], live)

    t = ad.swap_last2(ad.layer_norm(x))
    t = ad.gelu(ad.linear(t, w1, params["mixer.tok_b1"]))
    t = ad.swap_last2(ad.linear(t, w2, b2))
    x = ad.add_masked(x, t, live)

    c = ad.gelu(ad.linear(ad.layer_norm(x), params["mixer.ch_w1"],
                          params["mixer.ch_b1"]))
    c = ad.linear(c, params["mixer.ch_w2"], params["mixer.ch_b2"])
    return ad.add_masked(x, c, live)


def masked_mean_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over live rows of (..., L, h); requires at least one live row."""
    counts = np.asarray(mask, dtype=np.float64).sum(axis=-1)
    if np.any(counts == 0):
        raise ExtractError("mean over a fully padded sequence")
    w = (np.asarray(mask, dtype=np.float64) / counts[..., None])[..., None, :]
    pooled = ad.matmul(Tensor(w), x)
    # drop the singleton row axis
    return ad.reshape(pooled, pooled.shape[:-2] + (x.shape[-1],))


# ---------------------------------------------------------------------------
# temporal scores, selection, pooling


def temporal_scores(f_u: Tensor, f_v: Tensor, mask_u: np.ndarray,
                    mask_v: np.ndarray, params: ad.ParameterSet
                    ) -> tuple[Tensor | None, Tensor | None]:
    """Importance scores over each endpoint's live edges.

    ``M^e_v`` is the softmax of ``q_u . K_v / sqrt(h)`` over v's live rows
    (padded rows get -1e30 logits, giving exactly zero mass), and
    symmetrically for ``M^e_u``. A side with no live rows yields None;
    both sides empty is an error.
    """
    live_u, live_v = int(mask_u.sum()), int(mask_v.sum())
    if live_u == 0 and live_v == 0:
        raise ExtractError("no temporal context")
    h = f_u.shape[-1]
    inv = 1.0 / np.sqrt(h)

    def side(f_keys, mask_keys, f_query, mask_query):
        if not mask_keys.any():
            return None
        q = ad.matmul(masked_mean_rows(f_query, mask_query),
                      ad.transpose(params["attn.q_w"]))
        k = ad.matmul(f_keys, ad.transpose(params["attn.k_w"]))
        logits = ad.scale(ad.reshape(ad.matmul(k, ad.reshape(q, (h, 1))),
                                     (f_keys.shape[0],)), inv)
        pad = np.where(mask_keys, 0.0, -1e30)
        return ad.softmax(logits + Tensor(pad), axis=-1)

    m_v = side(f_v, mask_v, f_u, mask_u) if live_u else None
    m_u = side(f_u, mask_u, f_v, mask_v) if live_v else None
    # when one side has no history, the other side's scores come from its
    # own mean (self-query keeps the pathway defined)
    if m_v is None and live_v:
        m_v = side(f_v, mask_v, f_v, mask_v)
    if m_u is None and live_u:
        m_u = side(f_u, mask_u, f_u, mask_u)
    return m_u, m_v


def top_k_select(scores: np.ndarray, k: int, live: int) -> np.ndarray:
    """Indices of the k best scores among the first ``live`` positions.

    Ties break toward the lower index; rows are ordered most recent first,
    so the lower index is also the more recent edge.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    live = min(live, len(scores))
    if live == 0:
        return np.empty(0, dtype=np.intp)
    s = np.asarray(scores[:live], dtype=np.float64)
    order = np.lexsort((np.arange(live), -s))
    return order[:min(k, live)].astype(np.intp)


@dataclass
class TemporalCausalSubgraph:
    """Selected edge positions per endpoint with their raw scores."""

    src: int
    dst: int
    t0: float
    sel_u: np.ndarray
    sel_v: np.ndarray
    scores_u: np.ndarray
    scores_v: np.ndarray


def temporal_subgraph(m_u: Tensor | None, m_v: Tensor | None, k: int,
                      mask_u: np.ndarray, mask_v: np.ndarray,
                      query=(0, 0, 0.0)) -> TemporalCausalSubgraph:
    su = top_k_select(m_u.data, k, int(mask_u.sum())) if m_u is not None else np.empty(0, dtype=np.intp)
    sv = top_k_select(m_v.data, k, int(mask_v.sum())) if m_v is not None else np.empty(0, dtype=np.intp)
    return TemporalCausalSubgraph(
        src=query[0], dst=query[1], t0=query[2], sel_u=su, sel_v=sv,
        scores_u=m_u.data.copy() if m_u is not None else np.empty(0),
        scores_v=m_v.data.copy() if m_v is not None else np.empty(0))


def pooled_repr(f: Tensor, m: Tensor | None, selected: np.ndarray, hidden: int) -> Tensor:
    """Score-weighted mean of the selected mixer rows (zeros when empty).

    Weights are the softmax scores renormalized over the selected set, so
    the attention parameters receive gradients despite hard selection.
    """
    if m is None or len(selected) == 0:
        return Tensor(np.zeros(hidden))
    picked = ad.take(m, selected, axis=0)
    w = ad.div(picked, ad.tsum(picked, keepdims=True))
    rows = ad.take(f, selected, axis=0)
    return ad.reshape(ad.matmul(ad.reshape(w, (1, len(selected))), rows), (hidden,))


def temporal_repr(f_u: Tensor, f_v: Tensor, m_u: Tensor | None, m_v: Tensor | None,
                  sub: TemporalCausalSubgraph, hidden: int) -> Tensor:
    h_u = pooled_repr(f_u, m_u, sub.sel_u, hidden)
    h_v = pooled_repr(f_v, m_v, sub.sel_v, hidden)
    return ad.concat([h_u, h_v], axis=0)


# ---------------------------------------------------------------------------
# structural pathway (no learned weights; plain numpy)


def structural_embed(store: EventStore, node: int, t0: float, window: float,
                     hops: int) -> tuple[np.ndarray, list[int]]:
    """Windowed neighborhood embedding ``z = x_node + mean(neighbor x)``.

    Returns the embedding and the neighbor ids (ascending); an empty
    neighborhood contributes a zero mean, leaving ``z = x_node``.
    """
    if store.node_features is None:
        raise ExtractError("store has no node features")
    nbrs = n_hop_neighbors(store, node, t0, window, hops)
    x = store.node_features[store.index_of(node)]
    if not nbrs:
        return x.copy(), nbrs
    rows = store.node_features[[store.index_of(v) for v in nbrs]]
    return x + rows.mean(axis=0), nbrs


def structural_scores(z_u: np.ndarray, z_v: np.ndarray,
                      big_z_u: np.ndarray, big_z_v: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Softmax neighbor scores ``M^n_v = softmax(z_u . Z_v / sqrt(d))`` and
    the symmetric ``M^n_u``; raw embeddings, no learned weights."""
    if len(big_z_u) == 0 and len(big_z_v) == 0:
        raise ExtractError("no structural context")
    d = len(z_u)
    inv = 1.0 / np.sqrt(d)

    def side(query, keys):
        if len(keys) == 0:
            return np.empty(0, dtype=np.float64)
        logits = keys @ query * inv
        e = np.exp(logits - logits.max())
        return e / e.sum()

    return side(z_v, big_z_u), side(z_u, big_z_v)


@dataclass
class StructuralCausalSubgraph:
    """Selected neighbor ids per endpoint with their scores."""

    nodes_u: list[int]
    nodes_v: list[int]
    sel_u: np.ndarray
    sel_v: np.ndarray
    scores_u: np.ndarray
    scores_v: np.ndarray

    def selected_u(self) -> list[int]:
        return [self.nodes_u[i] for i in self.sel_u]

    def selected_v(self) -> list[int]:
        return [self.nodes_v[i] for i in self.sel_v]


def structural_subgraph(m_u: np.ndarray, m_v: np.ndarray, k: int,
                        nodes_u: list[int], nodes_v: list[int]
                        ) -> StructuralCausalSubgraph:
    return StructuralCausalSubgraph(
        nodes_u=nodes_u, nodes_v=nodes_v,
        sel_u=top_k_select(m_u, k, len(nodes_u)),
        sel_v=top_k_select(m_v, k, len(nodes_v)),
        scores_u=m_u.copy(), scores_v=m_v.copy())


def structural_repr(store: EventStore, u: int, v: int,
                    sub: StructuralCausalSubgraph) -> np.ndarray:
    """``H^S = [h^s_u || h^s_v]`` with plain means over selected neighbors."""

    def side(node, chosen):
        x = store.node_features[store.index_of(node)]
        if not chosen:
            return x.copy()
        rows = store.node_features[[store.index_of(w) for w in chosen]]
        return x + rows.mean(axis=0)

    return np.concatenate([side(u, sub.selected_u()), side(v, sub.selected_v())])
