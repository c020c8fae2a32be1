"""Explanation subgraphs and fidelity / sparsity scoring.

The explanation universe for a query is the set of temporal candidate
edges that entered the extractors (both endpoints' recent-edge
sequences). At sparsity ``s`` the explanation keeps the top
``ceil(s * |universe|)`` edges by importance score; fidelity at ``s`` is
the drop in average precision when the model re-predicts every query
seeing only the residual edges. Structural node scores are exported for
inspection but never counted toward sparsity (the metric divides by edge
counts).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Query, SIGModel
from .training import evaluate_ap_auc


class ExplainError(ValueError):
    pass


@dataclass
class ScoredEdge:
    event_index: int
    src: int
    dst: int
    time: float
    dt: float
    score: float


@dataclass
class ExplanationRecord:
    """Self-contained explanation for one query."""

    src: int
    dst: int
    t0: float
    temporal: list[ScoredEdge]
    structural: list[tuple[int, float]]
    y_full: float
    y_residual: float

    def to_json(self) -> str:
        obj = {
            "query": {"src": self.src, "dst": self.dst, "t0": self.t0},
            "temporal": [{"src": e.src, "dst": e.dst, "t": e.time,
                          "dt": e.dt, "score": e.score} for e in self.temporal],
            "structural": [{"node": n, "score": s} for n, s in self.structural],
            "y_full": self.y_full,
            "y_residual": self.y_residual,
        }
        return json.dumps(obj, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "ExplanationRecord":
        obj = json.loads(line)
        return ExplanationRecord(
            src=obj["query"]["src"], dst=obj["query"]["dst"],
            t0=obj["query"]["t0"],
            temporal=[ScoredEdge(event_index=-1, src=e["src"], dst=e["dst"],
                                 time=e["t"], dt=e["dt"], score=e["score"])
                      for e in obj["temporal"]],
            structural=[(d["node"], d["score"]) for d in obj["structural"]],
            y_full=obj["y_full"], y_residual=obj["y_residual"])


@dataclass
class FidelityCurve:
    points: list[tuple[float, float]]
    aufsc: float
    aufsc_raw: float


# ---------------------------------------------------------------------------
# universes and sparsity subsets


def _universe_from_details(model: SIGModel, det: dict) -> list[ScoredEdge]:
    """Union of both endpoints' candidate edges; duplicated events keep
    their larger score. Ordered by score desc, then more recent, then
    lower event index."""
    store = model.store
    best: dict[int, ScoredEdge] = {}
    for tag in ("u", "v"):
        events = det.get(f"events_{tag}", np.empty(0, dtype=np.intp))
        times = det.get(f"times_{tag}", np.empty(0))
        scores = det.get(f"scores_{tag}", np.empty(0))
        for e, t, s in zip(events, times, scores):
            e = int(e)
            prev = best.get(e)
            if prev is None or s > prev.score:
                best[e] = ScoredEdge(
                    event_index=e,
                    src=int(store.node_ids[store.src_ix[e]]),
                    dst=int(store.node_ids[store.dst_ix[e]]),
                    time=float(t), dt=0.0, score=float(s))
    edges = sorted(best.values(),
                   key=lambda e: (-e.score, -e.time, e.event_index))
    return edges


def explanation_at_sparsity(model: SIGModel, query: Query, s: float
                            ) -> tuple[list[ScoredEdge], list[ScoredEdge]]:
    """Split the query's candidate universe into (kept, residual) at
    sparsity ``s``: kept is the top ``ceil(s * |universe|)`` edges."""
    if not 0.0 < s <= 1.0:
        raise ExplainError(f"sparsity must be in (0, 1], got {s}")
    details: list[dict] = []
    model.score_queries([query], collect=details)
    edges = _universe_from_details(model, details[0])
    if not edges:
        raise ExplainError("empty explanation universe for query")
    keep = math.ceil(s * len(edges))
    return edges[:keep], edges[keep:]


# ---------------------------------------------------------------------------
# fidelity and the area under the fidelity-sparsity curve


def _residual_excludes(model: SIGModel, queries: list[Query], s: float,
                       details: list[dict]) -> list[set[int]]:
    excludes = []
    for det in details:
        edges = _universe_from_details(model, det)
        keep = math.ceil(s * len(edges)) if edges else 0
        excludes.append({e.event_index for e in edges[:keep]})
    return excludes


def fidelity(model: SIGModel, queries: list[Query], labels, s: float,
             _cache: dict | None = None) -> float:
    """``ap(full) - ap(residual)`` over the query set at sparsity ``s``."""
    labels = np.asarray(labels)
    if _cache is not None and "full" in _cache:
        full_scores, details = _cache["full"]
    else:
        details = []
        full_scores = model.score_queries(queries, collect=details)["iid"]
        if _cache is not None:
            _cache["full"] = (full_scores, details)
    ap_full, _ = evaluate_ap_auc(full_scores, labels)
    excludes = _residual_excludes(model, queries, s, details)
    resid_scores = model.score_queries(queries, exclude=excludes)["iid"]
    ap_resid, _ = evaluate_ap_auc(resid_scores, labels)
    return float(ap_full - ap_resid)


def fidelity_curve(model: SIGModel, queries: list[Query], labels,
                   grid=(0.2, 0.4, 0.6, 0.8, 1.0)) -> FidelityCurve:
    grid = sorted(grid)
    cache: dict = {}
    points = [(float(s), fidelity(model, queries, labels, s, _cache=cache))
              for s in grid]
    norm, raw = aufsc(points)
    return FidelityCurve(points=points, aufsc=norm, aufsc_raw=raw)


def aufsc(points: list[tuple[float, float]]) -> tuple[float, float]:
    """Trapezoidal area under the fidelity-sparsity curve.

    Returns (area / sparsity range, raw area); the normalized form is the
    mean fidelity over the grid span.
    """
    if len(points) < 2:
        raise ExplainError(f"need at least 2 curve points, got {len(points)}")
    pts = sorted(points)
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    if np.any(np.diff(xs) <= 0):
        raise ExplainError("sparsity grid values must be strictly increasing")
    raw = float(np.trapezoid(ys, xs))
    return raw / float(xs[-1] - xs[0]), raw


# ---------------------------------------------------------------------------
# records and export


def build_explanation_record(model: SIGModel, query: Query, s: float
                             ) -> ExplanationRecord:
    """Explanation for one query at sparsity ``s``: the kept temporal
    edges, the per-side selected structural nodes, and the prediction with
    and without the kept edges in the history."""
    kept, _ = explanation_at_sparsity(model, query, s)
    details: list[dict] = []
    full = model.score_queries([query], collect=details)["iid"][0]
    resid = model.score_queries(
        [query], exclude=[{e.event_index for e in kept}])["iid"][0]
    det = details[0]
    t0 = query[2]
    for e in kept:
        e.dt = float(t0 - e.time)
    structural: list[tuple[int, float]] = []
    for tag in ("u", "v"):
        nbrs = det.get(f"nbrs_{tag}", [])
        scores = det.get(f"nscores_{tag}", np.empty(0))
        sel = det.get(f"nsel_{tag}", np.empty(0, dtype=np.intp))
        structural.extend((int(nbrs[i]), float(scores[i])) for i in sel)
    return ExplanationRecord(src=query[0], dst=query[1], t0=float(t0),
                             temporal=kept, structural=structural,
                             y_full=float(full), y_residual=float(resid))


def export_explanations(records: list[ExplanationRecord], path) -> None:
    """One JSON object per line, UTF-8, full float precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_explanations(path) -> list[ExplanationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ExplanationRecord.from_json(line))
    return out
