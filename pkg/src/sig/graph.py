"""Event stream ingestion and time-indexed queries.

The store is a time-sorted sequence of interaction events with per-node
adjacency indices, built once and then queried concurrently: recency
lookups, time-windowed n-hop neighborhoods, chronological splits and
negative sampling all operate on the same immutable arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed inputs or invalid queries."""


@dataclass(frozen=True)
class Event:
    """One timestamped interaction between two nodes."""

    src: int
    dst: int
    time: float
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))


@dataclass(frozen=True)
class SplitRanges:
    """Contiguous, chronologically ordered index ranges over sorted events."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def slice(self, name: str) -> slice:
        lo, hi = getattr(self, name)
        return slice(lo, hi)


class EventStore:
    """Immutable time-sorted event store with per-node adjacency indices.

    Node identity is the original integer id from the input; a dense
    internal index is used for arrays. All query results are expressed in
    original ids.
    """

    def __init__(self, events: Sequence[Event]):
        if len(events) == 0:
            raise GraphError("no events")
        feat_dim = len(events[0].features)
        for i, e in enumerate(events):
            if not np.isfinite(e.time) or e.time < 0:
                raise GraphError(f"event {i}: time must be finite and >= 0, got {e.time}")
            if len(e.features) != feat_dim:
                raise GraphError(
                    f"event {i}: feature length {len(e.features)} != {feat_dim}")

        order = np.argsort([e.time for e in events], kind="stable")
        self.source_rows = np.asarray(order, dtype=np.intp)
        events = [events[i] for i in order]

        ids = sorted({e.src for e in events} | {e.dst for e in events})
        self.node_ids = np.asarray(ids, dtype=np.int64)
        self._id_to_ix = {nid: ix for ix, nid in enumerate(ids)}

        self.times = np.asarray([e.time for e in events], dtype=np.float64)
        self.src_ix = np.asarray([self._id_to_ix[e.src] for e in events], dtype=np.intp)
        self.dst_ix = np.asarray([self._id_to_ix[e.dst] for e in events], dtype=np.intp)
        self.edge_features = np.asarray([e.features for e in events], dtype=np.float64)
        if self.edge_features.ndim == 1:  # zero-width features
            self.edge_features = self.edge_features.reshape(len(events), 0)

        # adjacency: incident event indices per node, ascending in (time, index);
        # events are already time-sorted so append order is the sorted order
        adj: list[list[int]] = [[] for _ in ids]
        for k in range(len(events)):
            adj[self.src_ix[k]].append(k)
            if self.dst_ix[k] != self.src_ix[k]:
                adj[self.dst_ix[k]].append(k)
        self._adj = [np.asarray(a, dtype=np.intp) for a in adj]
        self._adj_times = [self.times[a] for a in self._adj]

        self.node_features: np.ndarray | None = None

    @property
    def node_count(self) -> int:
        return len(self.node_ids)

    @property
    def edge_count(self) -> int:
        return len(self.times)

    @property
    def feature_dim(self) -> int:
        return self.edge_features.shape[1]

    @property
    def node_feature_dim(self) -> int:
        if self.node_features is None:
            raise GraphError("node features not set; call default_node_features")
        return self.node_features.shape[1]

    def index_of(self, node_id: int) -> int:
        try:
            return self._id_to_ix[node_id]
        except KeyError:
            raise GraphError(f"unknown node {node_id}") from None

    def partner_ix(self, event_idx: np.ndarray, node_ix: int) -> np.ndarray:
        """Internal index of the other endpoint of each incident event."""
        s = self.src_ix[event_idx]
        d = self.dst_ix[event_idx]
        return np.where(s == node_ix, d, s)

    def events_as_tuples(self) -> list[tuple[int, int, float]]:
        src = self.node_ids[self.src_ix]
        dst = self.node_ids[self.dst_ix]
        return list(zip(src.tolist(), dst.tolist(), self.times.tolist()))


@dataclass(frozen=True)
class EdgeSequence:
    """Incident events of one node, most recent first."""

    node: int
    event_indices: np.ndarray
    times: np.ndarray
    partners_ix: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.event_indices)


# ---------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class CsvSchema:
    """Column layout: src, dst, timestamp, state label, then edge features."""

    src: int = 0
    dst: int = 1
    time: int = 2
    state: int = 3


def _parse_row(row: list[str], schema: CsvSchema, lineno: int) -> Event:
    try:
        src = int(row[schema.src])
        dst = int(row[schema.dst])
        t = float(row[schema.time])
        feats = [float(v) for v in row[schema.state + 1:]]
    except (ValueError, IndexError) as exc:
        raise GraphError(f"line {lineno}: malformed row ({exc})") from None
    if not np.isfinite(t) or t < 0:
        raise GraphError(f"line {lineno}: timestamp must be nonnegative, got {row[schema.time]}")
    return Event(src=src, dst=dst, time=t, features=np.asarray(feats))


def load_events(path, schema: CsvSchema | None = None) -> EventStore:
    """Read a comma-separated event file into a store.

    Rows are ``src,dst,timestamp,state_label,f1,...,fm`` with an optional
    single header line; the state label column is ignored. Feature arity
    must be constant across rows.
    """
    schema = schema or CsvSchema()
    events: list[Event] = []
    feat_dim = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1:
                try:
                    _parse_row(row, schema, lineno)
                except GraphError:
                    continue  # header line
            ev = _parse_row(row, schema, lineno)
            if feat_dim is None:
                feat_dim = len(ev.features)
            elif len(ev.features) != feat_dim:
                raise GraphError(
                    f"line {lineno}: inconsistent feature arity {len(ev.features)} != {feat_dim}")
            events.append(ev)
    if not events:
        raise GraphError("no events")
    return EventStore(events)


def write_events_csv(store: EventStore, path, header: bool = False) -> None:
    """Write the store back out in the input CSV schema (state label 0)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            cols = ["src", "dst", "timestamp", "state_label"]
            cols += [f"f{i+1}" for i in range(store.feature_dim)]
            w.writerow(cols)
        src = store.node_ids[store.src_ix]
        dst = store.node_ids[store.dst_ix]
        for k in range(store.edge_count):
            row = [int(src[k]), int(dst[k]), repr(float(store.times[k])), 0]
            row += [repr(float(v)) for v in store.edge_features[k]]
            w.writerow(row)


# ---------------------------------------------------------------------------
# node features


def default_node_features(store: EventStore, mode: str = "one_hot",
                          landmarks: int = 100,
                          rng: np.random.Generator | None = None,
                          one_hot_cap: int = 20000) -> EventStore:
    """Attach default node features to a featureless dataset.

    ``one_hot`` assigns identity rows (dimension = node count). ``landmark``
    assigns hop distances to randomly chosen landmark nodes, with
    unreachable pairs set to the sentinel value ``node_count``.
    """
    v = store.node_count
    if mode == "one_hot":
        if v > one_hot_cap:
            raise GraphError(
                f"one_hot features for {v} nodes exceed cap {one_hot_cap}; "
                "use landmark mode")
        store.node_features = np.eye(v, dtype=np.float64)
        return store
    if mode == "landmark":
        if rng is None:
            rng = np.random.default_rng(0)
        m = min(landmarks, v)
        chosen = rng.choice(v, size=m, replace=False)
        feats = np.full((v, m), float(v), dtype=np.float64)
        neigh: list[set[int]] = [set() for _ in range(v)]
        for s, d in zip(store.src_ix, store.dst_ix):
            neigh[s].add(int(d))
            neigh[d].add(int(s))
        for j, lm in enumerate(chosen):
            dist = np.full(v, -1, dtype=np.int64)
            dist[lm] = 0
            frontier = [int(lm)]
            depth = 0
            while frontier:
                depth += 1
                nxt = []
                for node in frontier:
                    for nb in neigh[node]:
                        if dist[nb] < 0:
                            dist[nb] = depth
                            nxt.append(nb)
                frontier = nxt
            reached = dist >= 0
            feats[reached, j] = dist[reached]
        store.node_features = feats
        return store
    raise GraphError(f"unknown node feature mode {mode!r}")


def set_node_features(store: EventStore, features: np.ndarray) -> EventStore:
    """Attach explicit per-node features (rows follow internal node order)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != store.node_count:
        raise GraphError(
            f"feature rows {features.shape[0]} != node count {store.node_count}")
    store.node_features = features
    return store


# ---------------------------------------------------------------------------
# splits and sampling


def split_chronological(store: EventStore,
                        fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
                        ) -> SplitRanges:
    """Chronological train/val/test ranges: first ``floor(f1*E)`` events,
    next ``floor(f2*E)``, remainder. Ties in time are resolved by stable
    index order, which the store already fixed at construction."""
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise GraphError(f"fractions must be positive and sum to 1, got {fractions}")
    e = store.edge_count
    if e < 3:
        raise GraphError(f"need at least 3 events to split, got {e}")
    n_train = int(np.floor(fractions[0] * e))
    n_val = int(np.floor(fractions[1] * e))
    return SplitRanges(train=(0, n_train), val=(n_train, n_train + n_val),
                       test=(n_train + n_val, e))


def sample_negatives(store: EventStore, positives: Sequence[tuple[int, int, float]],
                     ratio: int, rng: np.random.Generator) -> list[tuple[int, int, float]]:
    """Draw ``ratio`` corrupted copies per positive: source and time kept,
    destination resampled uniformly from all nodes except the true one."""
    if ratio < 1:
        raise GraphError(f"ratio must be >= 1, got {ratio}")
    if store.node_count < 2:
        raise GraphError("cannot sample negatives on a single-node graph")
    v = store.node_count
    out = []
    for src, dst, t in positives:
        true_ix = store.index_of(dst)
        draws = rng.integers(0, v - 1, size=ratio)
        draws = np.where(draws >= true_ix, draws + 1, draws)
        for d in draws:
            out.append((src, int(store.node_ids[d]), t))
    return out


# ---------------------------------------------------------------------------
# temporal queries


def recent_edges(store: EventStore, node: int, t0: float, n: int) -> EdgeSequence:
    """Up to ``n`` incident events strictly before ``t0``, most recent first.

    Nodes with fewer than ``n`` prior events return all of them.
    """
    if n < 1:
        raise GraphError(f"n must be >= 1, got {n}")
    if not np.isfinite(t0):
        raise GraphError(f"t0 must be finite, got {t0}")
    ix = store.index_of(node)
    times = store._adj_times[ix]
    pos = int(np.searchsorted(times, t0, side="left"))
    lo = max(0, pos - n)
    chosen = store._adj[ix][lo:pos][::-1]
    return EdgeSequence(
        node=node,
        event_indices=chosen,
        times=store.times[chosen],
        partners_ix=store.partner_ix(chosen, ix),
        features=store.edge_features[chosen],
    )


def n_hop_neighbors(store: EventStore, node: int, t0: float, window: float,
                    hops: int = 1) -> list[int]:
    """Nodes reachable within ``hops`` hops using only events with time in
    ``[t0 - window, t0)``; the seed node itself is excluded.

    Returns original node ids in ascending id order (deterministic).
    """
    if hops < 1:
        raise GraphError(f"hops must be >= 1, got {hops}")
    if not window > 0:
        raise GraphError(f"window must be positive, got {window}")
    seed = store.index_of(node)
    lo_t = t0 - window
    found: set[int] = set()
    frontier = {seed}
    for _ in range(hops):
        nxt: set[int] = set()
        for u in frontier:
            times = store._adj_times[u]
            a = int(np.searchsorted(times, lo_t, side="left"))
            b = int(np.searchsorted(times, t0, side="left"))
            if b > a:
                partners = store.partner_ix(store._adj[u][a:b], u)
                nxt.update(int(p) for p in partners)
        nxt -= found
        nxt.discard(seed)
        if not nxt:
            break
        found |= nxt
        frontier = nxt
    return [int(store.node_ids[i]) for i in sorted(found)]
