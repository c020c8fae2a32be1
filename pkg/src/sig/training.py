"""Training loop, ranking metrics, and the throughput micro-benchmark.

The protocol: chronological batches, negatives resampled each epoch,
Adam updates, per-epoch validation on the IID head's average precision
with 1:1 negatives, early stopping on patience, best-validation snapshot
returned. Runs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import heads
from .confounders import ConfounderDictionary, build_dictionary, kmeans
from .extractors import ExtractError
from .graph import EventStore, GraphError, SplitRanges, sample_negatives
from .model import ModelConfig, Query, SIGModel


class TrainingDiverged(RuntimeError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Protocol constants plus architecture knobs; defaults are the
    published training protocol."""

    epochs: int = 300
    batch_size: int = 600
    lr: float = 1e-4
    weight_decay: float = 1e-6
    patience: int = 5
    neg_ratio_train: int = 5
    neg_ratio_eval: int = 1
    n_recent: int = 50
    hops: int = 1
    hidden: int = 100
    k_select: int = 20
    k_confounders: int = 10
    lambda_i: float = 1.0
    lambda_t: float = 0.5
    lambda_s: float = 0.5
    seed: int = 1
    time_dim: int = 100
    alpha: float = 10.0
    beta: float = 10.0
    window: float | None = None
    token_expansion: float = 0.5
    channel_expansion: float = 4.0
    warmup_epochs: int = 3
    dict_refresh_every: int = 0  # 0: build once after warmup, then frozen
    chunk_size: int = 96  # positives per forward/backward micro-chunk

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            hidden=self.hidden, time_dim=self.time_dim, alpha=self.alpha,
            beta=self.beta, n_recent=self.n_recent, k_select=self.k_select,
            hops=self.hops, window=self.window,
            token_expansion=self.token_expansion,
            channel_expansion=self.channel_expansion,
            k_confounders=self.k_confounders)

    def uses_interventions(self) -> bool:
        return self.lambda_t != 0.0 or self.lambda_s != 0.0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_ap: float
    val_auc: float


@dataclass
class TrainResult:
    model: SIGModel
    history: list[EpochStats]
    best_val_ap: float
    best_epoch: int
    config: TrainConfig


# ---------------------------------------------------------------------------
# ranking metrics


def evaluate_ap_auc(scores, labels) -> tuple[float, float]:
    """Average precision and ROC AUC for binary labels.

    AUC counts tied scores as half-wins. AP is the mean over positives of
    the precision at each positive's rank under a descending stable sort
    (ties resolved by original index).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores and labels must be equal-length 1-D, got {s.shape} vs {y.shape}")
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0 or pos + neg != len(y):
        raise MetricError("labels must contain both classes and only 0/1")

    # AUC via average ranks (ties share their mean rank)
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    auc = (ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg)

    # AP: walk the descending ranking
    desc = np.lexsort((np.arange(len(s)), -s))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(desc, start=1):
        if y[idx] == 1:
            hits += 1
            total += hits / rank
    return total / pos, float(auc)


# ---------------------------------------------------------------------------
# context filtering


def _node_has_context(store: EventStore, node_ix: int, t0: float,
                      window: float) -> tuple[bool, bool]:
    times = store._adj_times[node_ix]
    b = int(np.searchsorted(times, t0, side="left"))
    t_ok = b > 0
    a = int(np.searchsorted(times, t0 - window, side="left"))
    s_ok = False
    if b > a:
        partners = store.partner_ix(store._adj[node_ix][a:b], node_ix)
        s_ok = bool(np.any(partners != node_ix))
    return t_ok, s_ok


def filter_valid_queries(store: EventStore, model: SIGModel,
                         queries: list[Query]) -> list[int]:
    """Indices of queries with at least one live temporal edge and one
    windowed structural neighbor on either side (the rest are undefined
    under the extraction contracts and are skipped)."""
    window = model.window
    keep = []
    for qi, (u, v, t0) in enumerate(queries):
        tu, su = _node_has_context(store, store.index_of(u), t0, window)
        tv, sv = _node_has_context(store, store.index_of(v), t0, window)
        if (tu or tv) and (su or sv):
            keep.append(qi)
    return keep


def filter_valid_sources(store: EventStore, model: SIGModel,
                         positives: list[Query]) -> list[int]:
    """Training filter: keep positives whose source side alone carries
    temporal and structural context, so every destination-substituted
    negative derived from them stays well-defined."""
    window = model.window
    keep = []
    for qi, (u, _, t0) in enumerate(positives):
        tu, su = _node_has_context(store, store.index_of(u), t0, window)
        if tu and su:
            keep.append(qi)
    return keep


# ---------------------------------------------------------------------------
# training


def _epoch_queries(positives: list[Query], negatives: list[Query],
                   ratio: int) -> tuple[list[Query], np.ndarray]:
    """Interleave each positive with its negatives (t0 stays nondecreasing)."""
    queries: list[Query] = []
    labels = np.zeros(len(positives) * (1 + ratio))
    qi = 0
    for i, p in enumerate(positives):
        queries.append(p)
        labels[qi] = 1.0
        qi += 1
        for j in range(ratio):
            queries.append(negatives[i * ratio + j])
            qi += 1
    return queries, labels


def _eval_queries(store: EventStore, model: SIGModel, positives: list[Query],
                  ratio: int, rng: np.random.Generator
                  ) -> tuple[list[Query], np.ndarray]:
    negs = sample_negatives(store, positives, ratio, rng)
    queries, labels = _epoch_queries(positives, negs, ratio)
    keep = filter_valid_queries(store, model, queries)
    return [queries[i] for i in keep], labels[keep]


def build_confounder_dictionary(model: SIGModel, positives: list[Query],
                                rng: np.random.Generator) -> ConfounderDictionary:
    """Embed the training links and cluster them into dictionary rows."""
    x = model.embed_queries(positives)
    k = min(model.cfg.k_confounders, x.shape[0])
    assign, _ = kmeans(x, k, rng=rng)
    return build_dictionary(assign, x)


def train(store: EventStore, split: SplitRanges, config: TrainConfig,
          run_dir: str | Path | None = None, log=None) -> TrainResult:
    """Full training run returning the best-validation model.

    Warm-up epochs train the IID pathway alone; the confounder dictionary
    is then built from the training links and the interventional heads
    join the objective. A run with zero intervention weights never builds
    a dictionary.
    """
    if split.train[1] - split.train[0] < 1:
        raise GraphError("empty train split")
    model = SIGModel(store, config.model_config(), seed=config.seed)
    neg_rng = np.random.default_rng(config.seed + 1)
    val_rng = np.random.default_rng(config.seed + 2)
    cluster_rng = np.random.default_rng(config.seed + 4)

    all_events = store.events_as_tuples()
    train_pos = all_events[split.slice("train")]
    val_pos = all_events[split.slice("val")]
    keep = filter_valid_sources(store, model, train_pos)
    train_pos = [train_pos[i] for i in keep]
    if not train_pos:
        raise GraphError("no trainable events in the train split")
    val_queries, val_labels = _eval_queries(store, model, val_pos,
                                            config.neg_ratio_eval, val_rng)

    opt = ad.OptimizerState()
    lam_full = (config.lambda_i, config.lambda_t, config.lambda_s)
    warm_i = config.lambda_i if config.lambda_i > 0 else 1.0
    interventions = config.uses_interventions()
    warmup = config.warmup_epochs if interventions else 0

    metrics_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.tsv"

    history: list[EpochStats] = []
    best_ap = -1.0
    best_epoch = -1
    best_params = None
    best_dict = None
    stale = 0

    for epoch in range(1, config.epochs + 1):
        in_warmup = interventions and epoch <= warmup
        if interventions and not in_warmup:
            after = epoch - warmup  # 1-based count of post-warmup epochs
            refresh = (config.dict_refresh_every > 0 and after > 1
                       and (after - 1) % config.dict_refresh_every == 0)
            if model.dictionary is None or refresh:
                model.dictionary = build_confounder_dictionary(
                    model, train_pos, cluster_rng)
        lam = (warm_i, 0.0, 0.0) if in_warmup else lam_full
        use_iv = interventions and not in_warmup

        negs = sample_negatives(store, train_pos, config.neg_ratio_train, neg_rng)
        queries, labels = _epoch_queries(train_pos, negs, config.neg_ratio_train)
        slider = model.new_slider()

        group = 1 + config.neg_ratio_train
        pos_per_batch = config.batch_size
        loss_sum = 0.0
        loss_n = 0
        for b0 in range(0, len(train_pos), pos_per_batch):
            lo = b0 * group
            hi = min((b0 + pos_per_batch) * group, len(queries))
            batch_q = queries[lo:hi]
            batch_y = labels[lo:hi]
            model.params.zero_grad()
            n_batch = len(batch_q)
            chunk_q = config.chunk_size * group
            batch_loss = 0.0
            for c0 in range(0, n_batch, chunk_q):
                part = batch_q[c0:c0 + chunk_q]
                party = batch_y[c0:c0 + chunk_q]
                out = model.forward_chunk(part, slider, need_interventions=use_iv)
                loss = heads.total_loss(out.y_iid, out.y_temp, out.y_struct,
                                        party, lam)
                scaled = ad.scale(loss, len(part) / n_batch)
                ad.backward(scaled)
                batch_loss += scaled.item()
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {b0}")
            ad.adam_step(model.params, opt, lr=config.lr,
                         weight_decay=config.weight_decay)
            loss_sum += batch_loss * n_batch
            loss_n += n_batch

        val_scores = model.score_queries(val_queries)["iid"]
        val_ap, val_auc = evaluate_ap_auc(val_scores, val_labels)
        stats = EpochStats(epoch=epoch, train_loss=loss_sum / max(loss_n, 1),
                           val_ap=val_ap, val_auc=val_auc)
        history.append(stats)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(f"{epoch}\t{stats.train_loss:.6f}\t{val_ap:.6f}\t{val_auc:.6f}\n")
        if log is not None:
            log(f"epoch {epoch}: loss {stats.train_loss:.4f} "
                f"val_ap {val_ap:.4f} val_auc {val_auc:.4f}"
                + (" (warmup)" if in_warmup else ""))

        if val_ap > best_ap:
            best_ap = val_ap
            best_epoch = epoch
            best_params = model.params.copy()
            best_dict = (ConfounderDictionary(model.dictionary.centroids.copy(),
                                              model.dictionary.sizes.copy())
                         if model.dictionary is not None else None)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    if best_params is not None:
        model.params.load_values(best_params)
        model.dictionary = best_dict
    return TrainResult(model=model, history=history, best_val_ap=best_ap,
                       best_epoch=best_epoch, config=config)


def evaluate_split(store: EventStore, model: SIGModel, split: SplitRanges,
                   which: str, ratio: int, seed: int) -> tuple[float, float]:
    """AP/AUC of the IID head on a chronological split with sampled
    negatives (seeded deterministically)."""
    rng = np.random.default_rng(seed)
    positives = store.events_as_tuples()[split.slice(which)]
    queries, labels = _eval_queries(store, model, positives, ratio, rng)
    scores = model.score_queries(queries)["iid"]
    return evaluate_ap_auc(scores, labels)


# ---------------------------------------------------------------------------
# throughput benchmark


def affine_fit_r2(x, y) -> tuple[float, float, float]:
    """Least-squares a + b x; returns (a, b, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b, a = np.polyfit(x, y, 1)
    pred = a + b * x
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(a), float(b), r2


def bench_per_edge_latency(store: EventStore, base: TrainConfig,
                           n_values=(10, 20, 40, 80), n_queries: int = 200,
                           repeats: int = 3, seed: int = 0
                           ) -> list[tuple[int, float]]:
    """Median forward latency per query edge for each recent-edge budget N.

    A fresh model is built per N (token-mixing weights are sized by N);
    queries are drawn from the densest part of the stream so sequences
    actually reach N live edges.
    """
    rng = np.random.default_rng(seed)
    t_hi = float(store.times[-1]) + 1.0
    nodes = store.node_ids
    queries = [(int(rng.choice(nodes)), int(rng.choice(nodes)), t_hi)
               for _ in range(n_queries)]
    out = []
    for n in n_values:
        cfg_n = TrainConfig(**{**asdict(base), "n_recent": int(n)})
        model = SIGModel(store, cfg_n.model_config(), seed=seed)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.score_queries(queries)
            best = min(best, time.perf_counter() - t0)
        out.append((int(n), best / n_queries))
    return out
