"""Batched end-to-end forward pass tying extractors and heads together.

The per-query reference semantics live in :mod:`sig.extractors`; this
module evaluates many queries at once for training and evaluation
throughput. Queries are processed in nondecreasing ``t0`` order so the
structural pathway can maintain a sliding time window over the event
stream instead of re-running a neighborhood search per query. Tests
assert that both paths produce identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import extractors as ex
from . import heads
from .autodiff import Tensor
from .confounders import ConfounderDictionary, confounder_expectation
from .extractors import ExtractError, TimeEncodingConfig
from .graph import EventStore, recent_edges


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (training protocol lives in TrainConfig)."""

    hidden: int = 100
    time_dim: int = 100
    alpha: float = 10.0
    beta: float = 10.0
    n_recent: int = 50
    k_select: int = 20
    hops: int = 1
    window: float | None = None  # None: full time span of the store
    token_expansion: float = 0.5
    channel_expansion: float = 4.0
    k_confounders: int = 10

    def time_cfg(self) -> TimeEncodingConfig:
        return TimeEncodingConfig(alpha=self.alpha, beta=self.beta, dim=self.time_dim)


Query = tuple[int, int, float]  # (src id, dst id, t0)


class StructuralSlider:
    """Sliding-window neighborhood state for 1-hop structural encodings.

    Maintains, per node, the set of distinct partners with events inside
    ``[t0 - window, t0)`` plus the running sum of their feature rows, so
    ``z = x + featsum / count`` is a constant-time read. ``advance`` must
    be called with nondecreasing t0.
    """

    def __init__(self, store: EventStore, window: float):
        if store.node_features is None:
            raise ExtractError("store has no node features")
        self.store = store
        self.window = window
        v = store.node_count
        self.x = store.node_features
        self.featsum = np.zeros((v, self.x.shape[1]))
        self.count = np.zeros(v, dtype=np.int64)
        self.partners: list[dict[int, int]] = [dict() for _ in range(v)]
        self._enter = 0
        self._exit = 0
        self._t0 = -np.inf

    def _add(self, a: int, b: int) -> None:
        if a == b:
            return
        d = self.partners[a]
        c = d.get(b, 0)
        d[b] = c + 1
        if c == 0:
            self.featsum[a] += self.x[b]
            self.count[a] += 1

    def _remove(self, a: int, b: int) -> None:
        if a == b:
            return
        d = self.partners[a]
        c = d[b]
        if c == 1:
            del d[b]
            self.featsum[a] -= self.x[b]
            self.count[a] -= 1
        else:
            d[b] = c - 1

    def advance(self, t0: float) -> None:
        if t0 < self._t0:
            raise ValueError("slider must advance with nondecreasing t0")
        self._t0 = t0
        times = self.store.times
        n = len(times)
        while self._enter < n and times[self._enter] < t0:
            s = int(self.store.src_ix[self._enter])
            d = int(self.store.dst_ix[self._enter])
            self._add(s, d)
            self._add(d, s)
            self._enter += 1
        lo = t0 - self.window
        while self._exit < n and times[self._exit] < lo:
            s = int(self.store.src_ix[self._exit])
            d = int(self.store.dst_ix[self._exit])
            self._remove(s, d)
            self._remove(d, s)
            self._exit += 1

    def neighbors_ix(self, node_ix: int) -> np.ndarray:
        """Distinct windowed partners, ascending internal index."""
        return np.fromiter(sorted(self.partners[node_ix]), dtype=np.intp,
                           count=len(self.partners[node_ix]))

    def z(self, node_ix: int) -> np.ndarray:
        c = self.count[node_ix]
        if c == 0:
            return self.x[node_ix].copy()
        return self.x[node_ix] + self.featsum[node_ix] / c

    def z_rows(self, nodes_ix: np.ndarray) -> np.ndarray:
        c = np.maximum(self.count[nodes_ix], 1)[:, None]
        return self.x[nodes_ix] + self.featsum[nodes_ix] / c


@dataclass
class ForwardOutput:
    """Tape tensors for one chunk of queries (aligned with the input order)."""

    y_iid: Tensor
    y_struct: Tensor | None
    y_temp: Tensor | None
    h_struct: Tensor
    h_temp: Tensor


class SIGModel:
    """Parameters plus the batched forward machinery."""

    def __init__(self, store: EventStore, cfg: ModelConfig, seed: int = 0):
        if store.node_features is None:
            raise ExtractError("store needs node features before building a model")
        self.store = store
        self.cfg = cfg
        self.params = ad.ParameterSet()
        rng = np.random.default_rng(seed)
        token_width = cfg.time_dim + store.feature_dim
        ex.init_mixer_params(self.params, rng, token_width, cfg.hidden,
                             cfg.n_recent, cfg.token_expansion,
                             cfg.channel_expansion)
        fd = store.node_feature_dim
        emb = 2 * fd + 2 * cfg.hidden
        heads.init_head_params(self.params, rng, struct_in=2 * fd,
                               temp_in=2 * cfg.hidden, hidden=cfg.hidden,
                               emb_dim=emb)
        self.dictionary: ConfounderDictionary | None = None

    # -- config-derived helpers ------------------------------------------

    @property
    def window(self) -> float:
        if self.cfg.window is not None:
            return self.cfg.window
        span = float(self.store.times[-1] - self.store.times[0])
        return span if span > 0 else 1.0

    def embedding_dim(self) -> int:
        return 2 * self.store.node_feature_dim + 2 * self.cfg.hidden

    def new_slider(self) -> StructuralSlider:
        return StructuralSlider(self.store, self.window)

    # -- temporal side ----------------------------------------------------

    def _pack_sequences(self, pairs: list[tuple[int, float]],
                        exclude: list[set[int] | None] | None
                        ) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """Token tensor (S, L, width), mask, and the event-id array per
        (node, t0) pair, most recent first."""
        store = self.store
        cfg = self.cfg
        tcfg = cfg.time_cfg()
        n = cfg.n_recent
        ev_lists: list[np.ndarray] = []
        for i, (node, t0) in enumerate(pairs):
            ix = store.index_of(node)
            times = store._adj_times[ix]
            pos = int(np.searchsorted(times, t0, side="left"))
            ev = store._adj[ix][max(0, pos - n):pos][::-1]
            if exclude is not None and exclude[i]:
                excl = exclude[i]
                if len(ev):
                    keepm = np.fromiter((int(e) not in excl for e in ev),
                                        dtype=bool, count=len(ev))
                    ev = ev[keepm]
            ev_lists.append(ev)
        lives = np.fromiter((len(e) for e in ev_lists), dtype=np.intp,
                            count=len(ev_lists))
        length = max(1, int(lives.max()) if len(lives) else 1)
        width = tcfg.dim + store.feature_dim
        tokens = np.zeros((len(ev_lists), length, width))
        mask = np.zeros((len(ev_lists), length), dtype=bool)
        if lives.sum():
            row_ids = np.repeat(np.arange(len(ev_lists)), lives)
            col_ids = np.concatenate([np.arange(l) for l in lives])
            ev = np.concatenate([e for e in ev_lists if len(e)])
            t0s = np.repeat(np.asarray([p[1] for p in pairs]), lives)
            dts = t0s - store.times[ev]
            tokens[row_ids, col_ids, :tcfg.dim] = ex.time_encode(dts, tcfg)
            tokens[row_ids, col_ids, tcfg.dim:] = store.edge_features[ev]
            mask[row_ids, col_ids] = True
        return tokens, mask, ev_lists

    def _attention(self, f: Tensor, mask: np.ndarray, iq: np.ndarray,
                   ik: np.ndarray) -> Tensor:
        """Scores (B, L) of key-side rows ik queried by the mean of rows iq."""
        p = self.params
        counts = mask.sum(axis=1)
        w = np.where(counts[:, None] > 0, mask / np.maximum(counts, 1)[:, None], 0.0)
        mean_f = ad.matmul(Tensor(w[:, None, :]), f)      # (S, 1, h)
        mean_f = ad.reshape(mean_f, (mask.shape[0], f.shape[-1]))
        q_all = ad.matmul(mean_f, ad.transpose(p["attn.q_w"]))
        k_all = ad.matmul(f, ad.transpose(p["attn.k_w"]))
        b = len(iq)
        h = f.shape[-1]
        q = ad.reshape(ad.take(q_all, iq, axis=0), (b, h, 1))
        k = ad.take(k_all, ik, axis=0)                    # (B, L, h)
        logits = ad.scale(ad.reshape(ad.matmul(k, q), (b, k.shape[1])),
                          1.0 / np.sqrt(h))
        pad = np.where(mask[ik], 0.0, -1e30)
        return ad.softmax(logits + Tensor(pad), axis=-1)

    @staticmethod
    def _select_mask(scores: np.ndarray, lives: np.ndarray, k: int) -> np.ndarray:
        """Hard top-k per row (ties to lower index) as a 0/1 matrix."""
        b, length = scores.shape
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        valid = np.arange(min(k, length))[None, :] < np.minimum(lives, k)[:, None]
        sel = np.zeros((b, length))
        np.put_along_axis(sel, order[:, :valid.shape[1]], valid.astype(np.float64), axis=1)
        return sel

    def _pool(self, f: Tensor, scores: Tensor, sel: np.ndarray,
              rows_ix: np.ndarray) -> Tensor:
        picked = ad.mul(scores, Tensor(sel))
        sums = (scores.data * sel).sum(axis=1, keepdims=True)
        fix = np.where(sums > 0, 0.0, 1.0)  # keep empty rows at exactly zero
        denom = ad.tsum(picked, axis=1, keepdims=True) + Tensor(fix)
        w = ad.div(picked, denom)
        b, length = sel.shape
        rows = ad.take(f, rows_ix, axis=0)
        pooled = ad.matmul(ad.reshape(w, (b, 1, length)), rows)
        return ad.reshape(pooled, (b, f.shape[-1]))

    # -- structural side (plain numpy; no learned weights) -----------------

    def _structural_batch(self, queries: list[Query],
                          slider: StructuralSlider,
                          collect: list[dict] | None = None) -> np.ndarray:
        """H^S rows for one chunk, vectorized over a ragged neighbor layout.

        Queries must be ordered by nondecreasing t0. Per query side the
        neighbor scores are a softmax of ``z_nbr . z_other / sqrt(d)``;
        the top-k selected neighbors' raw features are averaged into the
        endpoint representation. Segment reductions implement the ragged
        per-side softmax / selection in a handful of numpy passes.
        """
        store = self.store
        cfg = self.cfg
        fd = store.node_feature_dim
        inv = 1.0 / np.sqrt(fd)
        nq = len(queries)

        # per unique (node, t0): own z, neighbor indices, and the neighbors'
        # z rows, all read at that query's slider position
        cache: dict[tuple[int, float], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        side_nbrs: list[np.ndarray] = [None] * (2 * nq)
        side_znbrs: list[np.ndarray] = [None] * (2 * nq)
        z_own = np.empty((2 * nq, fd))
        node_ix = np.empty(2 * nq, dtype=np.intp)
        for qi, (u, v, t0) in enumerate(queries):
            slider.advance(t0)
            for side, node in enumerate((u, v)):
                ixn = store.index_of(node)
                key = (ixn, t0)
                got = cache.get(key)
                if got is None:
                    if cfg.hops == 1:
                        nbrs = slider.neighbors_ix(ixn)
                        z = slider.z(ixn)
                        zr = slider.z_rows(nbrs) if len(nbrs) else np.empty((0, fd))
                    else:
                        z, ids = ex.structural_embed(store, node, t0,
                                                     self.window, cfg.hops)
                        nbrs = np.asarray([store.index_of(i) for i in ids],
                                          dtype=np.intp)
                        zr = self._z_rows_at(nbrs, t0, slider) if len(nbrs) \
                            else np.empty((0, fd))
                    got = cache[key] = (nbrs, z, zr)
                si = 2 * qi + side
                side_nbrs[si] = got[0]
                side_znbrs[si] = got[2]
                z_own[si] = got[1]
                node_ix[si] = ixn

        lens = np.fromiter((len(n) for n in side_nbrs), dtype=np.intp,
                           count=2 * nq)
        empty_pairs = (lens[0::2] == 0) & (lens[1::2] == 0)
        if np.any(empty_pairs):
            raise ExtractError("no structural context")

        out = np.empty((nq, 2 * fd))
        base = store.node_features[node_ix]  # x of each endpoint
        total = int(lens.sum())
        if total == 0:
            out[:, :fd] = base[0::2]
            out[:, fd:] = base[1::2]
            if collect is not None:
                for qi in range(nq):
                    for tag in ("u", "v"):
                        collect[qi][f"nbrs_{tag}"] = []
                        collect[qi][f"nscores_{tag}"] = np.empty(0)
                        collect[qi][f"nsel_{tag}"] = np.empty(0, dtype=np.intp)
            return out

        flat_nbrs = np.concatenate([n for n in side_nbrs if len(n)])
        seg = np.repeat(np.arange(2 * nq), lens)
        offsets = np.concatenate(([0], np.cumsum(lens)))
        z_nbr_rows = np.concatenate([zr for zr in side_znbrs if len(zr)])
        other = np.empty(2 * nq, dtype=np.intp)
        other[0::2] = np.arange(1, 2 * nq, 2)
        other[1::2] = np.arange(0, 2 * nq, 2)
        logits = np.einsum("ij,ij->i", z_nbr_rows, z_own[other][seg]) * inv

        # segmented stable softmax
        seg_max = np.full(2 * nq, -np.inf)
        np.maximum.at(seg_max, seg, logits)
        e = np.exp(logits - seg_max[seg])
        seg_sum = np.zeros(2 * nq)
        np.add.at(seg_sum, seg, e)
        scores = e / seg_sum[seg]

        # segmented top-k selection: order rows by (segment, -score, index)
        within = np.concatenate([np.arange(l) for l in lens if l]) if total else \
            np.empty(0, dtype=np.intp)
        order = np.lexsort((within, -scores, seg))
        ranks = np.empty(total, dtype=np.intp)
        ranks[order] = np.arange(total) - np.repeat(offsets[:-1], lens)
        selected = ranks < min(cfg.k_select, total)
        selected &= ranks < np.minimum(lens, cfg.k_select)[seg]

        sel_feats = np.zeros((2 * nq, fd))
        np.add.at(sel_feats, seg[selected], store.node_features[flat_nbrs[selected]])
        sel_counts = np.zeros(2 * nq)
        np.add.at(sel_counts, seg[selected], 1.0)
        means = sel_feats / np.maximum(sel_counts, 1.0)[:, None]
        reps = base + means
        out[:, :fd] = reps[0::2]
        out[:, fd:] = reps[1::2]

        if collect is not None:
            for qi in range(nq):
                for side, tag in ((0, "u"), (1, "v")):
                    si = 2 * qi + side
                    a, b = offsets[si], offsets[si + 1]
                    s = scores[a:b]
                    collect[qi][f"nbrs_{tag}"] = [int(store.node_ids[i])
                                                  for i in side_nbrs[si]]
                    collect[qi][f"nscores_{tag}"] = s.copy()
                    collect[qi][f"nsel_{tag}"] = ex.top_k_select(
                        s, cfg.k_select, len(s))
        return out

    def _z_rows_at(self, nbrs: np.ndarray, t0: float,
                   slider: StructuralSlider) -> np.ndarray:
        if self.cfg.hops == 1:
            return slider.z_rows(nbrs)
        store = self.store
        return np.stack([ex.structural_embed(
            store, int(store.node_ids[i]), t0, self.window, self.cfg.hops)[0]
            for i in nbrs])

    def x_row(self, node_ix: int) -> np.ndarray:
        return self.store.node_features[node_ix]

    # -- full forward -------------------------------------------------------

    def forward_chunk(self, queries: list[Query], slider: StructuralSlider,
                      need_interventions: bool = False,
                      exclude: list[set[int] | None] | None = None,
                      collect: list[dict] | None = None
                      ) -> ForwardOutput:
        """Evaluate one chunk of queries (t0 nondecreasing across calls).

        With ``need_interventions`` the confounder dictionary must be
        built; the interventional heads are skipped otherwise. When
        ``collect`` is a list it receives one dict per query with the
        extraction details (sequences, scores, selections) used by the
        explanation pipeline.
        """
        cfg = self.cfg
        chunk_collect = [{} for _ in queries] if collect is not None else None

        if exclude is None:
            pair_of: dict[tuple[int, float], int] = {}
            pairs: list[tuple[int, float]] = []
            iu = np.empty(len(queries), dtype=np.intp)
            iv = np.empty(len(queries), dtype=np.intp)
            for qi, (u, v, t0) in enumerate(queries):
                for side, node in enumerate((u, v)):
                    key = (node, t0)
                    s = pair_of.get(key)
                    if s is None:
                        s = pair_of[key] = len(pairs)
                        pairs.append(key)
                    (iu if side == 0 else iv)[qi] = s
            pair_excl = None
        else:
            pairs = []
            pair_excl = []
            iu = np.arange(0, 2 * len(queries), 2, dtype=np.intp)
            iv = np.arange(1, 2 * len(queries), 2, dtype=np.intp)
            for qi, (u, v, t0) in enumerate(queries):
                pairs.extend([(u, t0), (v, t0)])
                pair_excl.extend([exclude[qi], exclude[qi]])

        tokens, mask, seqs = self._pack_sequences(pairs, pair_excl)
        f = ex.mixer_forward(Tensor(tokens), mask, self.params)

        lives_u = mask[iu].sum(axis=1)
        lives_v = mask[iv].sum(axis=1)
        if np.any(lives_u + lives_v == 0):
            raise ExtractError("no temporal context")
        m_v = self._attention(f, mask, iu, iv)
        m_u = self._attention(f, mask, iv, iu)
        sel_u = self._select_mask(m_u.data, lives_u, cfg.k_select)
        sel_v = self._select_mask(m_v.data, lives_v, cfg.k_select)
        h_t = ad.concat([self._pool(f, m_u, sel_u, iu),
                         self._pool(f, m_v, sel_v, iv)], axis=1)

        if chunk_collect is not None:
            for qi in range(len(queries)):
                for tag, idx, m, lv in (("u", iu[qi], m_u, int(lives_u[qi])),
                                        ("v", iv[qi], m_v, int(lives_v[qi]))):
                    ev = seqs[idx][:lv]
                    d = chunk_collect[qi]
                    d[f"events_{tag}"] = np.asarray(ev, dtype=np.intp).copy()
                    d[f"times_{tag}"] = self.store.times[ev].copy()
                    d[f"scores_{tag}"] = m.data[qi, :lv].copy()
                    d[f"sel_{tag}"] = ex.top_k_select(m.data[qi], cfg.k_select, lv)

        h_s = Tensor(self._structural_batch(queries, slider, collect=chunk_collect))

        y_i = heads.predict_iid(h_s, h_t, self.params)
        y_s = y_t = None
        if need_interventions:
            if self.dictionary is None:
                raise ExtractError("confounder dictionary not built")
            p = self.params
            e_s = confounder_expectation(h_s, self.dictionary,
                                         p["conf_attn.dict_w"],
                                         p["conf_attn.q_struct_w"])
            e_t = confounder_expectation(h_t, self.dictionary,
                                         p["conf_attn.dict_w"],
                                         p["conf_attn.q_temp_w"])
            y_s = heads.predict_struct_intervention(h_s, e_s, self.params)
            y_t = heads.predict_temporal_intervention(h_t, e_t, self.params)
        if collect is not None:
            collect.extend(chunk_collect)
        return ForwardOutput(y_iid=y_i, y_struct=y_s, y_temp=y_t,
                             h_struct=h_s, h_temp=h_t)

    def score_queries(self, queries: list[Query], chunk: int = 512,
                      need_interventions: bool = False,
                      exclude: list[set[int] | None] | None = None,
                      collect: list[dict] | None = None
                      ) -> dict[str, np.ndarray]:
        """Forward-only scores for arbitrary query lists (any t0 order)."""
        order = np.argsort([q[2] for q in queries], kind="stable")
        inv_order = np.argsort(order, kind="stable")
        qs = [queries[i] for i in order]
        exs = [exclude[i] for i in order] if exclude is not None else None
        slider = self.new_slider()
        outs: dict[str, list[np.ndarray]] = {"iid": [], "struct": [], "temp": []}
        emb_s: list[np.ndarray] = []
        emb_t: list[np.ndarray] = []
        details: list[dict] | None = [] if collect is not None else None
        with ad.no_grad():
            for lo in range(0, len(qs), chunk):
                part = qs[lo:lo + chunk]
                pexc = exs[lo:lo + chunk] if exs is not None else None
                res = self.forward_chunk(part, slider,
                                         need_interventions=need_interventions,
                                         exclude=pexc, collect=details)
                outs["iid"].append(res.y_iid.data)
                if res.y_struct is not None:
                    outs["struct"].append(res.y_struct.data)
                    outs["temp"].append(res.y_temp.data)
                emb_s.append(res.h_struct.data)
                emb_t.append(res.h_temp.data)
        result = {"iid": np.concatenate(outs["iid"])[inv_order]}
        if outs["struct"]:
            result["struct"] = np.concatenate(outs["struct"])[inv_order]
            result["temp"] = np.concatenate(outs["temp"])[inv_order]
        result["h_struct"] = np.concatenate(emb_s)[inv_order]
        result["h_temp"] = np.concatenate(emb_t)[inv_order]
        if collect is not None:
            collect.extend(details[i] for i in inv_order)
        return result

    def embed_queries(self, queries: list[Query], chunk: int = 512) -> np.ndarray:
        """Link embeddings ``[H^S || H^T]`` used for confounder clustering."""
        res = self.score_queries(queries, chunk=chunk)
        return np.concatenate([res["h_struct"], res["h_temp"]], axis=1)
