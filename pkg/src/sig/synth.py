"""Synthetic data: planted-pattern graphs and OOD bias injection.

The planted generator produces a desk-scale event stream where the label
of a query edge is decided by a causal pattern (a triadic closure through
connector nodes, or a burst of recent activity on the destination),
while a decoy signal (a recent edge to a hub node) is strongly
correlated with the label in the training region but decorrelated on a
dedicated out-of-distribution query slice. Lets the tests check that a
model learned the pattern rather than the decoy.

``ood_inject`` is the separate corruption used on real datasets: per
node, twice its degree in synthetic intervention events, split between
neighbors and non-neighbors by the scale parameter.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .graph import Event, EventStore, set_node_features


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledQuery:
    src: int
    dst: int
    t0: float
    label: int


@dataclass
class PlantedDataset:
    store: EventStore
    train_probe: list[LabeledQuery]
    iid_test: list[LabeledQuery]
    ood_test: list[LabeledQuery]
    meta: dict = field(default_factory=dict)


def phi_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation of two binary vectors (0 when either is constant)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    n11 = int((a & b).sum())
    n10 = int((a & ~b).sum())
    n01 = int((~a & b).sum())
    n00 = int((~a & ~b).sum())
    denom = (n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00)
    if denom == 0:
        return 0.0
    return (n11 * n00 - n10 * n01) / np.sqrt(denom)


# ---------------------------------------------------------------------------
# planted-pattern generator


@dataclass(frozen=True)
class PlantedParams:
    n_connectors: int = 16
    n_hubs: int = 4
    code_dim: int = 4
    noise_scale: float = 0.3
    hub_amplitude: float = 3.0
    pattern_window_frac: float = 0.006  # window = frac * horizon
    plant_frac: float = 0.10            # plants per total event budget
    decoy_prob_train: float = 0.95
    decoy_prob_ood: float = 0.5
    hub_background_prob: float = 0.01
    recent_bias: float = 0.9
    recent_pool: int = 40
    burst_size: int = 3
    n_ood_hub_events: int = 800
    events_per_time: float = 0.5
    warmup_frac: float = 0.02
    probe_size: int = 500
    iid_test_size: int = 500


def _has_recent_partner(store: EventStore, node: int, t0: float,
                        window: float, targets: set[int]) -> bool:
    ix = store.index_of(node)
    times = store._adj_times[ix]
    a = int(np.searchsorted(times, t0 - window, side="left"))
    b = int(np.searchsorted(times, t0, side="left"))
    if b <= a:
        return False
    partners = store.node_ids[store.partner_ix(store._adj[ix][a:b], ix)]
    return any(int(p) in targets for p in partners)


def _windowed_partners(store: EventStore, node: int, t0: float,
                       window: float) -> set[int]:
    ix = store.index_of(node)
    times = store._adj_times[ix]
    a = int(np.searchsorted(times, t0 - window, side="left"))
    b = int(np.searchsorted(times, t0, side="left"))
    if b <= a:
        return set()
    return {int(p) for p in store.node_ids[store.partner_ix(store._adj[ix][a:b], ix)]}


def _pattern_holds(store: EventStore, rule: str, u: int, v: int, t0: float,
                   window: float, connectors: set[int], burst_size: int) -> bool:
    if rule == "triadic_closure":
        pu = _windowed_partners(store, u, t0, window)
        pv = _windowed_partners(store, v, t0, window)
        return bool((pu & pv) & connectors)
    # recency_burst: the destination saw enough events inside the window
    ix = store.index_of(v)
    times = store._adj_times[ix]
    a = int(np.searchsorted(times, t0 - window, side="left"))
    b = int(np.searchsorted(times, t0, side="left"))
    return (b - a) >= burst_size


def planted_pattern_generate(nodes: int, horizon: float, rule: str, seed: int,
                             n_events: int | None = None,
                             params: PlantedParams | None = None
                             ) -> PlantedDataset:
    """Build a planted-pattern stream plus labeled query slices.

    Positives in the query slices satisfy the rule's causal pattern within
    a window before t0; negatives do not. The hub decoy co-occurs with
    positives in the training region and is balanced to be label-independent
    on the OOD slice (asserted at generation time).
    """
    if rule not in ("triadic_closure", "recency_burst"):
        raise GenerationError(f"unknown rule {rule!r}")
    p = params or PlantedParams()
    rng = np.random.default_rng(seed)
    if n_events is None:
        n_events = int(round(p.events_per_time * horizon))
    window = p.pattern_window_frac * horizon

    connectors = list(range(p.n_connectors))
    hubs = list(range(p.n_connectors, p.n_connectors + p.n_hubs))
    regular_lo = p.n_connectors + p.n_hubs
    regulars = np.arange(regular_lo, nodes)
    connector_set = set(connectors)

    # node features: identity code, hub flag, connector flag, noise
    fd = p.code_dim + 2 + 2
    node_x = np.zeros((nodes, fd))
    codes = rng.choice([-1.0, 1.0], size=(nodes, p.code_dim))
    node_x[:, :p.code_dim] = codes
    node_x[hubs, p.code_dim] = p.hub_amplitude
    node_x[connectors, p.code_dim + 1] = 1.0
    node_x[:, p.code_dim + 2:] = rng.normal(0.0, p.noise_scale, size=(nodes, 2))

    # --- plant records -----------------------------------------------------
    t_lo = p.warmup_frac * horizon + window
    n_plants = int(round(p.plant_frac * n_events))
    anchors = np.sort(rng.uniform(t_lo, horizon, size=n_plants))
    test_time = 0.85 * horizon
    ood_flags = np.zeros(n_plants, dtype=bool)
    test_ids = np.flatnonzero(anchors > test_time)
    shuffled = test_ids.copy()
    rng.shuffle(shuffled)
    ood_flags[shuffled[: len(shuffled) // 2]] = True

    records: list[tuple[float, int, int, str]] = []  # (time, src, dst, kind)
    plant_info = []
    half_toggle = 0
    for i, t in enumerate(anchors):
        u, v = rng.choice(regulars, size=2, replace=False)
        u, v = int(u), int(v)
        dts = rng.uniform(0.1 * window, 0.9 * window, size=3)
        if rule == "triadic_closure":
            w = int(rng.choice(connectors))
            records.append((t - dts[0], u, w, "bridge"))
            records.append((t - dts[1], w, v, "bridge"))
        else:
            for j in range(p.burst_size):
                r = int(rng.choice(regulars))
                dtj = rng.uniform(0.1 * window, 0.9 * window)
                records.append((t - dtj, r, v, "burst"))
        if ood_flags[i]:
            has_decoy = half_toggle % 2 == 0  # exact balance on the OOD slice
            half_toggle += 1
        else:
            has_decoy = bool(rng.uniform() < p.decoy_prob_train)
        if has_decoy:
            b = int(rng.choice(hubs))
            records.append((t - dts[2], v, b, "decoy"))
        records.append((t, u, v, "pos"))
        plant_info.append({"u": u, "v": v, "t": float(t), "ood": bool(ood_flags[i]),
                           "decoy": has_decoy})

    # label-independent hub activity for the OOD negative pool
    ood_hub_nodes = []
    for _ in range(p.n_ood_hub_events):
        x = int(rng.choice(regulars))
        b = int(rng.choice(hubs))
        t = float(rng.uniform(test_time, horizon))
        records.append((t, x, b, "oodhub"))
        ood_hub_nodes.append((x, t))

    # --- background with recency-biased destinations -----------------------
    n_background = max(0, n_events - len(records))
    bg_times = np.sort(rng.uniform(0.0, horizon, size=n_background))
    merged = sorted(
        [(t, s, d, k) for (t, s, d, k) in records]
        + [(float(t), -1, -1, "bg") for t in bg_times])

    recent: deque[int] = deque(maxlen=p.recent_pool)
    events: list[Event] = []
    hub_flag_col = p.code_dim

    def edge_feature(a: int, b: int) -> np.ndarray:
        f = np.empty(p.code_dim + 2)
        f[:p.code_dim] = codes[a] + codes[b]
        f[p.code_dim] = p.hub_amplitude if (a in hubs or b in hubs) else 0.0
        f[p.code_dim + 1] = rng.normal(0.0, p.noise_scale)
        return f

    for t, s, d, kind in merged:
        if kind == "bg":
            s = int(rng.choice(regulars))
            if rng.uniform() < p.hub_background_prob:
                d = int(rng.choice(hubs))
            elif recent and rng.uniform() < p.recent_bias:
                d = int(recent[int(rng.integers(len(recent)))])
            else:
                d = int(rng.choice(regulars))
            while d == s:
                d = int(rng.choice(regulars))
        events.append(Event(src=s, dst=d, time=float(t), features=edge_feature(s, d)))
        recent.append(s)
        recent.append(d)

    store = EventStore(events)
    # isolated ids never touched by an event would shrink the node table;
    # give every id at least one warmup event so the table is complete
    missing = set(range(nodes)) - {int(i) for i in store.node_ids}
    if missing:
        warm_t = sorted(rng.uniform(0.0, 0.5 * p.warmup_frac * horizon,
                                    size=len(missing)))
        extra = []
        for m, wt in zip(sorted(missing), warm_t):
            d = int(rng.choice(regulars))
            while d == m:
                d = int(rng.choice(regulars))
            extra.append(Event(src=m, dst=d, time=float(wt),
                               features=edge_feature(m, d)))
        store = EventStore(events + extra)
    set_node_features(store, node_x)

    # --- query slices -------------------------------------------------------
    e = store.edge_count
    t_train_end = float(store.times[int(np.floor(0.7 * e))])
    t_val_end = float(store.times[int(np.floor(0.85 * e))])
    hub_set = set(hubs)

    def has_decoy_flag(node: int, t0: float) -> bool:
        return _has_recent_partner(store, node, t0, window, hub_set)

    def negative_dst(u: int, t0: float, want_decoy: bool | None) -> int:
        for _ in range(200):
            if want_decoy and ood_hub_nodes:
                cands = [x for (x, te) in ood_hub_nodes if t0 - window <= te < t0]
                x = int(rng.choice(cands)) if cands else int(rng.choice(regulars))
            else:
                x = int(rng.choice(regulars))
            if x == u:
                continue
            if want_decoy is not None and has_decoy_flag(x, t0) != want_decoy:
                continue
            if _pattern_holds(store, rule, u, x, t0, window, connector_set,
                              p.burst_size):
                continue
            return x
        raise GenerationError("could not sample a valid negative destination")

    train_plants = [pi for pi in plant_info if pi["t"] <= t_train_end]
    rng.shuffle(train_plants)
    probe: list[LabeledQuery] = []
    probe_decoy: list[bool] = []
    for pi in train_plants[: p.probe_size]:
        probe.append(LabeledQuery(pi["u"], pi["v"], pi["t"], 1))
        probe_decoy.append(has_decoy_flag(pi["v"], pi["t"]))
        x = negative_dst(pi["u"], pi["t"], want_decoy=None)
        probe.append(LabeledQuery(pi["u"], x, pi["t"], 0))
        probe_decoy.append(has_decoy_flag(x, pi["t"]))

    test_lo = int(np.floor(0.85 * e))
    test_ids_all = np.arange(test_lo, e)
    pick = rng.choice(test_ids_all, size=min(p.iid_test_size, len(test_ids_all)),
                      replace=False)
    iid_test: list[LabeledQuery] = []
    node_ids = store.node_ids
    for k in sorted(int(i) for i in pick):
        u = int(node_ids[store.src_ix[k]])
        v = int(node_ids[store.dst_ix[k]])
        t0 = float(store.times[k])
        iid_test.append(LabeledQuery(u, v, t0, 1))
        x = int(rng.choice(node_ids))
        while x == v:
            x = int(rng.choice(node_ids))
        iid_test.append(LabeledQuery(u, x, t0, 0))

    ood_plants = [pi for pi in plant_info if pi["ood"] and pi["t"] > t_val_end]
    ood_test: list[LabeledQuery] = []
    ood_decoy: list[bool] = []
    ood_labels: list[int] = []
    for j, pi in enumerate(ood_plants):
        ood_test.append(LabeledQuery(pi["u"], pi["v"], pi["t"], 1))
        ood_decoy.append(has_decoy_flag(pi["v"], pi["t"]))
        ood_labels.append(1)
        want = j % 2 == 0  # exact decoy balance among negatives too
        x = negative_dst(pi["u"], pi["t"], want_decoy=want)
        ood_test.append(LabeledQuery(pi["u"], x, pi["t"], 0))
        ood_decoy.append(has_decoy_flag(x, pi["t"]))
        ood_labels.append(0)

    probe_corr = phi_coefficient([q.label for q in probe], probe_decoy)
    ood_corr = phi_coefficient(ood_labels, ood_decoy)
    if probe_corr <= 0.6:
        raise GenerationError(
            f"train decoy-label correlation {probe_corr:.3f} <= 0.6")
    if abs(ood_corr) >= 0.05:
        raise GenerationError(
            f"OOD decoy-label correlation {ood_corr:.3f} not near zero")

    meta = {
        "rule": rule, "seed": seed, "nodes": nodes, "horizon": horizon,
        "events": store.edge_count, "window": window,
        "connectors": connectors, "hubs": hubs,
        "train_decoy_corr": float(probe_corr),
        "ood_decoy_corr": float(ood_corr),
        "t_train_end": t_train_end, "t_val_end": t_val_end,
    }
    return PlantedDataset(store=store, train_probe=probe, iid_test=iid_test,
                          ood_test=ood_test, meta=meta)


# ---------------------------------------------------------------------------
# OOD bias injection for real datasets


def ood_inject(store: EventStore, scale: float,
               rng: np.random.Generator) -> EventStore:
    """Add ``2 * degree(u)`` intervention events per node.

    A fraction ``scale`` of each node's added events re-attach to its
    existing neighbors; the rest go to uniformly sampled non-neighbors.
    Times are uniform over the node's active window and features are
    copied from a random existing event of the node. Original events are
    preserved unchanged.
    """
    if not 0.0 < scale < 1.0:
        raise ValueError(f"scale must be in (0, 1), got {scale}")
    node_ids = store.node_ids
    all_ids = set(int(i) for i in node_ids)
    originals = [Event(src=int(node_ids[store.src_ix[k]]),
                       dst=int(node_ids[store.dst_ix[k]]),
                       time=float(store.times[k]),
                       features=store.edge_features[k].copy())
                 for k in range(store.edge_count)]
    added: list[Event] = []
    for ix in range(store.node_count):
        u = int(node_ids[ix])
        incident = store._adj[ix]
        degree = len(incident)
        if degree == 0:
            continue
        t_lo = float(store._adj_times[ix][0])
        t_hi = float(store._adj_times[ix][-1])
        neighbors = sorted({int(node_ids[p])
                            for p in store.partner_ix(incident, ix)} - {u})
        non_neighbors = sorted(all_ids - set(neighbors) - {u})
        n_add = 2 * degree
        n_pos = int(round(scale * n_add))
        for j in range(n_add):
            t = float(rng.uniform(t_lo, t_hi))
            if j < n_pos and neighbors:
                dst = int(neighbors[int(rng.integers(len(neighbors)))])
            elif non_neighbors:
                dst = int(non_neighbors[int(rng.integers(len(non_neighbors)))])
            else:
                dst = int(neighbors[int(rng.integers(len(neighbors)))])
            src_ev = incident[int(rng.integers(degree))]
            feats = store.edge_features[src_ev].copy()
            added.append(Event(src=u, dst=dst, time=t, features=feats))
    out = EventStore(originals + added)
    if store.node_features is not None:
        # same id set and ordering, so the feature table carries over
        set_node_features(out, store.node_features)
    return out
