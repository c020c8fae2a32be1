"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``explain``, ``oodgen``, ``synth``,
``gradcheck``, ``bench``. Configuration resolves in three layers:
built-in defaults, then a ``key=value`` config file, then flags. The
fully resolved configuration is echoed into the run directory so every
run is reproducible from its artifacts.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go
to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import explain as explain_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .graph import (EventStore, GraphError, default_node_features, load_events,
                    set_node_features, split_chronological, write_events_csv)
from .model import SIGModel
from .synth import LabeledQuery, ood_inject, planted_pattern_generate
from .training import (TrainConfig, bench_per_edge_latency, affine_fit_r2,
                       evaluate_split, train, _eval_queries)

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}

# spec-level flag spellings that differ from the dataclass field names
_FLAG_ALIASES = {
    "recent_n": "n_recent",
    "batch": "batch_size",
    "neg_ratio": "neg_ratio_train",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _coerce(name: str, raw: str):
    f = _CONFIG_FIELDS[name]
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if "float | None" in str(f.type):
        return None if raw.lower() in ("none", "auto") else float(raw)
    return raw


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; unknown keys fail."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _FLAG_ALIASES.get(key, key)
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, val)
    return out


def resolve_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for field in _CONFIG_FIELDS:
        flag = getattr(args, field, None)
        if flag is not None:
            values[field] = flag
    return TrainConfig(**values)


def echo_config(cfg: TrainConfig, path: Path) -> None:
    lines = [f"{k}={v}" for k, v in sorted(dataclasses.asdict(cfg).items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for field in _CONFIG_FIELDS.values():
        flag = field.name.replace("_", "-")
        p.add_argument(f"--{flag}", dest=field.name, default=None)
    for alias, target in _FLAG_ALIASES.items():
        p.add_argument(f"--{alias.replace('_', '-')}", dest=target, default=None)


def _post_coerce(args) -> None:
    for name in _CONFIG_FIELDS:
        raw = getattr(args, name, None)
        if isinstance(raw, str):
            setattr(args, name, _coerce(name, raw))


def _load_store(args) -> EventStore:
    store = load_events(args.data)
    if getattr(args, "node_features", None):
        feats = _read_node_features(args.node_features, store)
        set_node_features(store, feats)
    else:
        mode = getattr(args, "node_feature_mode", "one_hot")
        rng = np.random.default_rng(getattr(args, "seed", None) or 0)
        default_node_features(store, mode=mode,
                              landmarks=int(getattr(args, "landmarks", 100)),
                              rng=rng)
    return store


def _read_node_features(path, store: EventStore) -> np.ndarray:
    rows = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                nid = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise GraphError(f"{path}:{lineno}: malformed node feature row")
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise GraphError(f"{path}:{lineno}: inconsistent feature arity")
            rows[nid] = vals
    feats = np.zeros((store.node_count, dim or 0))
    for ix, nid in enumerate(store.node_ids):
        if int(nid) not in rows:
            raise GraphError(f"node {nid} missing from {path}")
        feats[ix] = rows[int(nid)]
    return feats


def _write_node_features(path, store: EventStore) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ix, nid in enumerate(store.node_ids):
            vals = ",".join(repr(float(v)) for v in store.node_features[ix])
            fh.write(f"{int(nid)},{vals}\n")


def _rebuild_model(store: EventStore, ckpt_path) -> tuple[SIGModel, TrainConfig, dict]:
    params, dictionary, config, meta = load_checkpoint(ckpt_path)
    cfg = TrainConfig(**{k: v for k, v in config.items() if k in _CONFIG_FIELDS})
    model = SIGModel(store, cfg.model_config(), seed=cfg.seed)
    for name, tensor in model.params.items():
        if name not in params:
            raise GraphError(f"checkpoint is missing parameter {name!r}")
        if params[name].shape != tensor.shape:
            raise GraphError(
                f"checkpoint parameter {name!r} has shape {params[name].shape}, "
                f"expected {tensor.shape} (wrong dataset or config?)")
    model.params.load_values(params)
    model.dictionary = dictionary
    return model, cfg, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    store = _load_store(args)
    cfg = resolve_config(args)
    split = split_chronological(store)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config.resolved")
    result = train(store, split, cfg, run_dir=out,
                   log=lambda msg: print(msg, file=sys.stderr))
    meta = {"best_val_ap": result.best_val_ap, "best_epoch": result.best_epoch}
    save_checkpoint(out / "checkpoint.bin", result.model.params,
                    result.model.dictionary, dataclasses.asdict(cfg), meta)
    test_ap, test_auc = evaluate_split(store, result.model, split, "test",
                                       cfg.neg_ratio_eval, cfg.seed + 3)
    print(f"best_val_ap\t{result.best_val_ap:.6f}")
    print(f"best_epoch\t{result.best_epoch}")
    print(f"test_ap\t{test_ap:.6f}")
    print(f"test_auc\t{test_auc:.6f}")
    return 0


def cmd_eval(args) -> int:
    store = _load_store(args)
    model, cfg, meta = _rebuild_model(store, args.checkpoint)
    split = split_chronological(store)
    val_ap, val_auc = evaluate_split(store, model, split, "val",
                                     cfg.neg_ratio_eval, cfg.seed + 2)
    test_ap, test_auc = evaluate_split(store, model, split, "test",
                                       cfg.neg_ratio_eval, cfg.seed + 3)
    print(f"val_ap\t{val_ap:.6f}")
    print(f"val_auc\t{val_auc:.6f}")
    print(f"test_ap\t{test_ap:.6f}")
    print(f"test_auc\t{test_auc:.6f}")
    if "best_val_ap" in meta:
        print(f"checkpoint_val_ap\t{meta['best_val_ap']:.6f}")
    return 0


def _queries_from_file(path):
    queries, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            queries.append((int(obj["src"]), int(obj["dst"]), float(obj["t0"])))
            labels.append(int(obj["label"]))
    return queries, np.asarray(labels)


def cmd_explain(args) -> int:
    store = _load_store(args)
    model, cfg, _ = _rebuild_model(store, args.checkpoint)
    grid = [float(s) for s in args.sparsity.split(",")]
    if args.queries:
        queries, labels = _queries_from_file(args.queries)
    else:
        split = split_chronological(store)
        positives = store.events_as_tuples()[split.slice("test")]
        rng = np.random.default_rng(cfg.seed + 3)
        queries, labels = _eval_queries(store, model, positives, 1, rng)
    if args.max_queries and len(queries) > args.max_queries:
        queries = queries[: args.max_queries]
        labels = labels[: args.max_queries]
    curve = explain_mod.fidelity_curve(model, queries, labels, grid=grid)
    for s, f in curve.points:
        print(f"fidelity@{s:g}\t{f:.6f}")
    print(f"aufsc\t{curve.aufsc:.6f}")
    print(f"aufsc_raw\t{curve.aufsc_raw:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        n_export = min(len(queries), args.max_export)
        for s in grid:
            records = [explain_mod.build_explanation_record(model, q, s)
                       for q in queries[:n_export]]
            explain_mod.export_explanations(records, out / f"explanations_s{s:g}.jsonl")
    return 0


def cmd_oodgen(args) -> int:
    store = _load_store(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    biased = ood_inject(store, scale=float(args.scale), rng=rng)
    write_events_csv(biased, args.out)
    print(f"wrote {biased.edge_count} events ({store.edge_count} original) to {args.out}")
    return 0


def cmd_synth(args) -> int:
    data = planted_pattern_generate(nodes=args.nodes, horizon=args.horizon,
                                    rule=args.rule,
                                    seed=args.seed if args.seed is not None else 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_events_csv(data.store, out / "events.csv")
    _write_node_features(out / "node_features.csv", data.store)
    with open(out / "queries.jsonl", "w", encoding="utf-8") as fh:
        for slice_name in ("train_probe", "iid_test", "ood_test"):
            for q in getattr(data, slice_name):
                fh.write(json.dumps({"slice": slice_name, "src": q.src,
                                     "dst": q.dst, "t0": q.t0,
                                     "label": q.label}) + "\n")
    (out / "meta.json").write_text(json.dumps(data.meta, indent=2, sort_keys=True),
                                   encoding="utf-8")
    print(f"wrote {data.store.edge_count} events, "
          f"{len(data.iid_test)} iid and {len(data.ood_test)} ood queries to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    failures = 0
    for name, fn, inputs in ad.standard_op_checks(rng):
        rep = ad.grad_check(fn, inputs, max_coords=args.max_coords, rng=rng)
        status = "ok" if rep.passed else "FAIL"
        print(f"{status}\t{name}\t{rep.max_rel_error:.3e}")
        failures += 0 if rep.passed else 1
    if failures:
        print(f"{failures} operations failed", file=sys.stderr)
        return 2
    return 0


def cmd_bench(args) -> int:
    if args.data:
        store = _load_store(args)
    else:
        # dense synthetic stream so sequences reach every requested N
        rng = np.random.default_rng(0)
        from .graph import Event
        events = [Event(int(rng.integers(60)), int(rng.integers(60)),
                        float(t), np.array([0.0]))
                  for t in np.sort(rng.uniform(0, 1000.0, size=15000))]
        store = EventStore(events)
        default_node_features(store, mode="one_hot")
    cfg = resolve_config(args)
    n_values = [int(v) for v in args.n_values.split(",")]
    rows = bench_per_edge_latency(store, cfg, n_values=n_values,
                                  n_queries=args.queries_per_n)
    for n, sec in rows:
        print(f"N={n}\t{sec * 1e3:.3f} ms/edge")
    _, slope, r2 = affine_fit_r2([r[0] for r in rows], [r[1] for r in rows])
    print(f"slope\t{slope * 1e6:.3f} us/edge per unit N")
    print(f"r2\t{r2:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="sig", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data_required=True):
        sp.add_argument("--data", required=data_required)
        sp.add_argument("--node-features", dest="node_features")
        sp.add_argument("--node-feature-mode", dest="node_feature_mode",
                        default="one_hot", choices=["one_hot", "landmark"])
        sp.add_argument("--landmarks", type=int, default=100)

    sp = sub.add_parser("train", help="train a model and write a checkpoint")
    common(sp)
    sp.add_argument("--out", required=True)
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the splits")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("explain", help="fidelity curve and explanation export")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sparsity", default="0.2,0.4,0.6,0.8,1.0")
    sp.add_argument("--queries", help="JSONL with src,dst,t0,label")
    sp.add_argument("--out", help="directory for explanation exports")
    sp.add_argument("--max-queries", type=int, default=400)
    sp.add_argument("--max-export", type=int, default=50)
    sp.set_defaults(fn=cmd_explain)

    sp = sub.add_parser("oodgen", help="inject synthetic intervention edges")
    common(sp)
    sp.add_argument("--scale", required=True, type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_oodgen)

    sp = sub.add_parser("synth", help="generate a planted-pattern dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--nodes", type=int, default=2000)
    sp.add_argument("--horizon", type=float, default=100000.0)
    sp.add_argument("--rule", default="triadic_closure",
                    choices=["triadic_closure", "recency_burst"])
    sp.add_argument("--seed", type=int, default=1)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("gradcheck", help="finite-difference checks per operation")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-coords", type=int, default=16)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("bench", help="per-edge latency versus recent-edge budget")
    sp.add_argument("--data")
    sp.add_argument("--node-features", dest="node_features")
    sp.add_argument("--n-values", default="10,20,40,80")
    sp.add_argument("--queries-per-n", type=int, default=200)
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _post_coerce(args)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract: exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
