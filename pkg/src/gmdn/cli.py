"""Command-line entry point: ``gmdn <verb> --config PATH [--seed N] [--out DIR] [--workers N]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import hist_fit, rand_loglik
from .batch import dataset_batches, from_records, summary_batch
from .config import ConfigError, EdgeListSpec, config_hash, load_config
from .graphs import make_rng, two_block_graph
from .model import GMDN
from .reconstruction import format_mean_std, load_edge_list, make_link_split, select_and_fit
from .sir import (
    SimulationRecord, SirParams, generate_dataset, load_dataset, make_graph, sample_initial_mask, save_dataset,
)
from .training import (
    concat_batches, evaluate_loglik, load_state, save_state, train_model, write_history_csv,
)

log = logging.getLogger("gmdn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------
# output helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict]) -> None:
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def _provenance(command: str, cfg) -> dict:
    return {"command": command, "config_hash": config_hash(cfg), "version": __version__, "seed": cfg.seed}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _batch_for(model: GMDN, graphs, records):
    make = summary_batch if model.cfg.structure_blind else from_records
    return make(graphs, records)


def _load_model(path) -> tuple[GMDN, dict]:
    model, extra = GMDN.load(_require(path))
    meta = {}
    if "dataset_n" in extra:
        meta["dataset_n"] = int(extra["dataset_n"])
    return model, meta


# ----------------------------------------------------------------------
# commands


def cmd_generate(cfg, out: Path, workers: int) -> dict:
    entries = []
    for spec in cfg.datasets:
        ds = generate_dataset(
            spec.family, spec.n, spec.connectivities, spec.graphs_per_conn, spec.sims_per_config,
            seed=cfg.seed, workers=workers, init_probs=spec.init_probs,
        )
        path = out / f"{spec.name}.jsonl"
        save_dataset(ds, path)
        entries.append({
            "name": spec.name,
            "file": path.name,
            "family": spec.family,
            "n": spec.n,
            "num_graphs": len(ds.graphs),
            "num_records": len(ds.records),
            "split_counts": ds.split_counts(),
            "sha256": _sha256(path),
        })
        log.info("wrote %s (%d records)", path, len(ds.records))
    manifest = {**_provenance("generate", cfg), "datasets": entries}
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_train(cfg, out: Path, workers: int) -> dict:
    ds = load_dataset(_require(cfg.dataset))
    grid = cfg.model.expand(cfg.seed)
    tc = cfg.train.train_config()
    blind = cfg.model.kind == "mdn"
    batches = dataset_batches(ds, structure_blind=blind)
    budget = cfg.train.stop_after
    rows, states = [], []
    for i, mcfg in enumerate(grid):
        ckpt = out / f"ckpt_{i}.npz"
        if ckpt.exists():
            model, state = load_state(ckpt)
            if model.cfg != mcfg:
                raise RuntimeError(f"{ckpt} was written for a different model config")
        else:
            model, state = GMDN(mcfg), None
        while state is None or not state.done:
            step = cfg.train.checkpoint_every if budget is None else min(cfg.train.checkpoint_every, budget)
            if step <= 0:
                break
            before = 0 if state is None else state.epoch
            state = train_model(model, batches["train"], batches["val"], tc, state=state, max_epochs=step)
            save_state(model, state, ckpt)
            if budget is not None:
                budget -= state.epoch - before
        if state is None:
            break
        write_history_csv(state.history, out / f"history_{i}.csv")
        _write_json(out / f"history_{i}.json", state.history)
        states.append((model, state))
        rows.append({
            "index": i, "config": json.dumps(mcfg.to_dict(), sort_keys=True), "done": state.done,
            "epochs_run": state.epoch, "best_epoch": state.best_epoch, "best_val_loglik": state.best_val,
        })
        if not state.done:
            break
    report = {**_provenance("train", cfg), "dataset": str(cfg.dataset), "grid": rows}
    if len(states) < len(grid) or not states[-1][1].done:
        report["status"] = "paused"
        _write_json(out / "train_report.json", report)
        return report

    best = int(np.argmax([s.best_val for _, s in states]))
    model = states[best][0]
    if cfg.train.refit:
        merged = concat_batches([batches["train"], batches["val"]])
        n_ep = states[best][1].best_epoch + 1
        model = GMDN(grid[best])
        refit_cfg = dataclasses.replace(tc, epochs=n_ep, patience=min(tc.patience, n_ep), early_stopping=False)
        train_model(model, merged, None, refit_cfg)
    test = batches["test"]
    test_ll = float(evaluate_loglik(model, test).mean()) if test.num_graphs else None
    model.save(out / "model.npz", {"dataset_n": np.array(ds.n)})
    report.update({"status": "done", "selected": best, "test_loglik": test_ll, "num_test": int(test.num_graphs)})
    _write_json(out / "train_report.json", report)
    _write_csv(out / "train_report.csv", rows)
    return report


def _baseline_rows(ds, split, names, y) -> list[dict]:
    rows = []
    if "RAND" in names:
        rows.append({"name": "RAND", "loglik": rand_loglik(ds.n), "num_samples": len(y)})
    if "HIST" in names:
        h = hist_fit([r.target for r in ds.records_in("train")], ds.n)
        rows.append({"name": "HIST", "loglik": float(h.loglik(y).mean()), "num_samples": len(y)})
    return rows


def cmd_evaluate(cfg, out: Path, workers: int) -> dict:
    model, meta = _load_model(cfg.model)
    ds = load_dataset(_require(cfg.dataset))
    if meta.get("dataset_n", ds.n) != ds.n:
        raise RuntimeError(f"model was trained on n={meta['dataset_n']} but the dataset has n={ds.n}")
    records = ds.records_in(cfg.split)
    if not records:
        raise RuntimeError(f"split '{cfg.split}' is empty")
    batch = _batch_for(model, ds.graphs, records)
    ll = evaluate_loglik(model, batch)
    rows = [{"name": "model", "loglik": float(ll.mean()), "num_samples": len(ll)}]
    rows += _baseline_rows(ds, cfg.split, cfg.baselines, batch.y)
    report = {**_provenance("evaluate", cfg), "split": cfg.split, "n": ds.n, "rows": rows}
    _write_json(out / "evaluate.json", report)
    _write_csv(out / "evaluate.csv", rows)
    return report


def cmd_transfer(cfg, out: Path, workers: int) -> dict:
    model, _ = _load_model(cfg.model)
    paths = [_require(p) for p in cfg.datasets]
    rows = []
    for p in paths:
        ds = load_dataset(p)
        records = ds.records if cfg.split == "all" else ds.records_in(cfg.split)
        ll = evaluate_loglik(model, _batch_for(model, ds.graphs, records))
        rows.append({
            "dataset": p.name, "family": ds.family, "n": ds.n, "num_samples": len(ll),
            "loglik": float(ll.mean()), "rand_loglik": rand_loglik(ds.n),
            "all_finite": bool(np.all(np.isfinite(ll))),
        })
    report = {**_provenance("transfer", cfg), "split": cfg.split, "rows": rows}
    _write_json(out / "transfer.json", report)
    _write_csv(out / "transfer.csv", rows)
    return report


def _trace_graphs(cfg):
    if cfg.dataset is not None:
        ds = load_dataset(_require(cfg.dataset))
        bad = [i for i in cfg.graph_ids if not 0 <= i < len(ds.graphs)]
        if bad:
            raise RuntimeError(f"graph ids out of range: {bad}")
        return [(i, ds.graphs[i]) for i in cfg.graph_ids]
    spec = cfg.graphs
    conn = int(spec.connectivity) if spec.family == "BA" else spec.connectivity
    return [(k, make_graph(spec.family, spec.n, conn, (cfg.seed, 13, k))) for k in range(spec.count)]


def cmd_trace(cfg, out: Path, workers: int) -> dict:
    model, _ = _load_model(cfg.model)
    C = model.cfg.num_components
    r0s = np.linspace(cfg.r0_min, cfg.r0_max, cfg.num_points)
    rows = []
    for gid, g in _trace_graphs(cfg):
        mask = sample_initial_mask(g.num_nodes, cfg.init_prob, make_rng(cfg.seed, 17, gid))
        records = []
        for r0 in r0s:
            p = SirParams(float(r0 * cfg.gamma), cfg.gamma, cfg.init_prob)
            records.append(SimulationRecord(0, p.beta, p.gamma, p.init_prob, mask, 0))
        o = model.forward(_batch_for(model, [g], records))
        w = o.weights
        for j, r0 in enumerate(r0s):
            row = {"graph": gid, "beta": records[j].beta, "gamma": cfg.gamma, "r0": float(r0)}
            row.update({f"w_{i}": float(w[j, i]) for i in range(C)})
            if o.family == "binomial":
                row.update({f"p_{i}": float(o.p.value[j, i]) for i in range(C)})
            else:
                row.update({f"mu_{i}": float(o.mu.value[j, i]) for i in range(C)})
                row.update({f"sigma_{i}": float(o.sigma.value[j, i]) for i in range(C)})
            rows.append(row)
    _write_csv(out / "trace.csv", rows)
    report = {**_provenance("trace", cfg), "num_rows": len(rows), "num_components": C}
    _write_json(out / "trace.json", report)
    return report


def cmd_reconstruct(cfg, out: Path, workers: int) -> dict:
    if isinstance(cfg.graph, EdgeListSpec):
        g = load_edge_list(_require(cfg.graph.path), cfg.graph.features and _require(cfg.graph.features))
    else:
        s = cfg.graph
        g = two_block_graph(s.block_size, s.p_in, s.p_out, seed=s.seed)
    splits = [make_link_split(g, cfg.fractions, seed=cfg.seed + i) for i in range(cfg.num_splits)]
    rows, per_split = [], []
    for kind in cfg.distances:
        grid = cfg.grid.expand(kind, cfg.seed)
        aucs, aps = [], []
        for i, split in enumerate(splits):
            m = select_and_fit(g, split, grid).metrics
            aucs.append(m["test_auc"])
            aps.append(m["test_ap"])
            per_split.append({"distance": kind, "split": i, **{k: m[k] for k in sorted(m)}})
            log.info("%s split %d: AUC %.3f AP %.3f", kind, i, m["test_auc"], m["test_ap"])
        rows.append({
            "distance": kind, "auc": format_mean_std(aucs), "ap": format_mean_std(aps),
            "auc_mean": float(np.mean(aucs)), "ap_mean": float(np.mean(aps)), "num_splits": len(splits),
        })
    report = {**_provenance("reconstruct", cfg), "rows": rows, "splits": per_split}
    _write_json(out / "reconstruct.json", report)
    _write_csv(out / "reconstruct.csv", rows)
    return report


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "trace": cmd_trace,
    "reconstruct": cmd_reconstruct,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmdn", description="Graph mixture density network experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML or JSON config file")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = load_config(args.command, args.config, args.seed)
    except (UsageError, ConfigError) as e:
        print(f"gmdn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        report = COMMANDS[args.command](cfg, out, args.workers)
    except Exception as e:  # noqa: BLE001 - every failure past validation is a runtime error
        log.debug("failure", exc_info=True)
        print(f"gmdn: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({k: report[k] for k in ("command", "config_hash") if k in report}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
