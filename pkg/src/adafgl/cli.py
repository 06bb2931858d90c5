"""Experiment orchestration: `split`, `train`, and `metrics` subcommands.

Every run is driven by a JSON config (flags override config keys) and copies
the effective config into the output directory, so results are reproducible
from that file alone. Exit codes: 0 success, 1 validation error, 2 runtime
error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, federation, personalize, splits
from .graph import Graph, edge_homophily, node_homophily


class ValidationError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = ""
    out: str = "runs/out"
    task_dir: str = ""  # defaults to <out>/task
    strategy: str = "community"
    num_clients: int = 10
    p_s: float = 0.5
    injection_ratio: float = 0.5
    split_ratios: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.4])
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    hidden: int = 64
    lr: float = 0.01
    weight_decay: float = 5e-4
    rounds: int = 100
    local_epochs: int = 5
    participation: float = 1.0
    alpha: float = 0.75
    beta: float = 0.9
    smooth_steps: int = 3
    message_layers: int = 2
    step2_epochs: int = 100
    step2_lr: float = 0.01
    step2_weight_decay: float = 5e-4
    kappa: float = 0.5
    lp_steps: int = 5
    mask_prob: float = 0.5
    knowledge_scale: str | float = 1.0
    feature_missing: float = 0.0
    edge_drop: float = 0.0
    label_rate: float | None = None
    dense_cap: int = 8000
    workers: int = 1

    def validate(self) -> None:
        checks = [
            (self.strategy in ("community", "structure-noniid"), "strategy must be community or structure-noniid"),
            (self.num_clients >= 2, "num_clients must be >= 2"),
            (0.0 <= self.p_s <= 1.0, "p_s must lie in [0, 1]"),
            (self.injection_ratio >= 0.0, "injection_ratio must be >= 0"),
            (len(self.split_ratios) == 3 and abs(sum(self.split_ratios) - 1.0) < 1e-9, "split_ratios must be three values summing to 1"),
            (len(self.seeds) >= 1, "seeds must be non-empty"),
            (self.hidden >= 1, "hidden must be >= 1"),
            (self.lr > 0 and self.step2_lr > 0, "learning rates must be positive"),
            (self.weight_decay >= 0 and self.step2_weight_decay >= 0, "weight decay must be >= 0"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.local_epochs >= 0, "local_epochs must be >= 0"),
            (0.0 < self.participation <= 1.0, "participation must lie in (0, 1]"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]"),
            (self.smooth_steps >= 1, "smooth_steps must be >= 1"),
            (self.message_layers >= 0, "message_layers must be >= 0"),
            (self.step2_epochs >= 0, "step2_epochs must be >= 0"),
            (0.0 <= self.kappa <= 1.0, "kappa must lie in [0, 1]"),
            (self.lp_steps >= 0, "lp_steps must be >= 0"),
            (0.0 < self.mask_prob <= 1.0, "mask_prob must lie in (0, 1]"),
            (self.knowledge_scale == "hcs" or (isinstance(self.knowledge_scale, (int, float)) and self.knowledge_scale >= 0), "knowledge_scale must be 'hcs' or a non-negative number"),
            (0.0 <= self.feature_missing <= 1.0, "feature_missing must lie in [0, 1]"),
            (0.0 <= self.edge_drop < 1.0, "edge_drop must lie in [0, 1)"),
            (self.label_rate is None or 0.0 < self.label_rate <= 1.0, "label_rate must lie in (0, 1]"),
            (self.dense_cap >= 1, "dense_cap must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValidationError(message)

    @property
    def effective_task_dir(self) -> Path:
        return Path(self.task_dir) if self.task_dir else Path(self.out) / "task"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    data: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig(**data)
    cfg.validate()
    return cfg


def _write_config_copy(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _client_stats_row(client_id, g: Graph, mode: str = "") -> dict:
    deg = g.degrees
    hist = np.bincount(g.labels, minlength=g.num_classes)
    return {
        "client_id": client_id,
        "num_nodes": g.num_nodes,
        "num_edges": g.num_edges,
        "node_homophily": node_homophily(g) if g.num_edges else "",
        "edge_homophily": edge_homophily(g) if g.num_edges else "",
        "deg_min": int(deg.min()) if g.num_nodes else 0,
        "deg_mean": float(deg.mean()) if g.num_nodes else 0.0,
        "deg_max": int(deg.max()) if g.num_nodes else 0,
        "label_histogram": ":".join(str(c) for c in hist),
        "injection_mode": mode,
    }


def _print_stats_table(rows: list[dict]) -> None:
    cols = ["client_id", "num_nodes", "num_edges", "node_homophily", "edge_homophily", "injection_mode"]
    print("  ".join(f"{c:>15}" for c in cols))
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v:15.4f}" if isinstance(v, float) else f"{str(v):>15}")
        print("  ".join(cells))


def cmd_split(cfg: ExperimentConfig) -> int:
    if not cfg.dataset:
        raise ValidationError("split needs a dataset path (config key 'dataset')")
    g = dataio.load_graph(cfg.dataset)
    if not g.train_mask.any():
        g = dataio.make_masks(g, tuple(cfg.split_ratios), cfg.seed)
    if cfg.strategy == "community":
        task = splits.community_split(g, cfg.num_clients, cfg.seed)
    else:
        task = splits.structure_noniid_split(
            g, cfg.num_clients, cfg.p_s, cfg.injection_ratio, cfg.seed
        )
    out = Path(cfg.out)
    dataio.save_task(task, cfg.effective_task_dir)
    _write_config_copy(cfg, out)
    rows = [
        _client_stats_row(sub.client_id, sub.graph, record.mode)
        for sub, record in zip(task.clients, task.injection_log)
    ]
    _print_stats_table(rows)
    print(f"task written to {cfg.effective_task_dir}")
    return 0


def _step2_seed(train_seed: int, client_id: int) -> int:
    return int(np.random.SeedSequence([train_seed, client_id]).generate_state(1)[0])


def _run_one_seed(task, cfg: ExperimentConfig, method: str, train_seed: int):
    fed_cfg = federation.FederationConfig(
        rounds=cfg.rounds,
        local_epochs=cfg.local_epochs,
        participation=cfg.participation,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        hidden=cfg.hidden,
        seed=train_seed,
    )
    extractor, reports, workers = federation.run_federation(task, fed_cfg)

    client_rows = []
    if method == "fedgcn":
        for worker in workers:
            g = worker.subgraph.graph
            _, test_acc = federation.evaluate_model(worker, extractor)
            client_rows.append(
                {
                    "client_id": worker.client_id,
                    "n_test": int(g.test_mask.sum()),
                    "test_acc": test_acc,
                }
            )
    else:
        hyper_base = dict(
            alpha=cfg.alpha,
            beta=cfg.beta,
            smooth_steps=cfg.smooth_steps,
            message_layers=cfg.message_layers,
            epochs=cfg.step2_epochs,
            lr=cfg.step2_lr,
            weight_decay=cfg.step2_weight_decay,
            hidden=cfg.hidden,
            knowledge_scale=cfg.knowledge_scale,
            kappa=cfg.kappa,
            lp_steps=cfg.lp_steps,
            mask_prob=cfg.mask_prob,
            dense_cap=cfg.dense_cap,
        )

        def run_client(sub):
            hyper = personalize.Step2Hyper(
                seed=_step2_seed(train_seed, sub.client_id), **hyper_base
            )
            return personalize.step2_train(sub, extractor, hyper)

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(run_client, task.clients))
        else:
            results = [run_client(sub) for sub in task.clients]
        results.sort(key=lambda r: r.client_id)
        for sub, res in zip(task.clients, results):
            client_rows.append(
                {
                    "client_id": res.client_id,
                    "n_test": int(sub.graph.test_mask.sum()),
                    "test_acc": res.adafgl_acc,
                    "hcs": res.hcs,
                    "extractor_acc": res.extractor_acc,
                }
            )

    total = sum(r["n_test"] for r in client_rows if r["test_acc"] is not None)
    weighted = sum(
        r["test_acc"] * r["n_test"] for r in client_rows if r["test_acc"] is not None
    )
    seed_acc = weighted / total if total else None
    return {
        "seed": train_seed,
        "test_accuracy": seed_acc,
        "clients": client_rows,
    }, reports


def cmd_train(cfg: ExperimentConfig, method: str) -> int:
    if method not in ("fedgcn", "adafgl"):
        raise ValidationError("method must be fedgcn or adafgl")
    task_dir = cfg.effective_task_dir
    if not (task_dir / "manifest.json").exists():
        raise ValidationError(f"no task at {task_dir}; run `adafgl split` first")
    task = dataio.load_task(task_dir)
    if cfg.feature_missing or cfg.edge_drop or cfg.label_rate is not None:
        task = splits.apply_sparsity(
            task, cfg.feature_missing, cfg.edge_drop, cfg.label_rate, seed=cfg.seed
        )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_copy(cfg, out)

    per_seed = []
    curve_rows = []
    try:
        for train_seed in cfg.seeds:
            seed_result, reports = _run_one_seed(task, cfg, method, train_seed)
            per_seed.append(seed_result)
            for report in reports:
                for cm in report.clients:
                    curve_rows.append(
                        [
                            train_seed,
                            report.round_index,
                            cm.client_id,
                            _fmt(cm.train_loss),
                            _fmt(cm.val_acc),
                            _fmt(cm.test_acc),
                        ]
                    )
    finally:
        if per_seed:  # flush partial results on failure
            _write_results(out, cfg, method, per_seed, curve_rows)

    accs = [s["test_accuracy"] for s in per_seed if s["test_accuracy"] is not None]
    if accs:
        print(f"{method}: mean test accuracy {np.mean(accs):.4f} over {len(per_seed)} seeds")
    else:
        print(f"{method}: no test nodes to score")
    return 0


def _fmt(v):
    return "" if v is None else repr(float(v))


def _write_results(out: Path, cfg, method, per_seed, curve_rows) -> None:
    accs = [s["test_accuracy"] for s in per_seed if s["test_accuracy"] is not None]
    results = {
        "method": method,
        "strategy": cfg.strategy,
        "num_clients": cfg.num_clients,
        "seeds": [s["seed"] for s in per_seed],
        "mean_test_accuracy": float(np.mean(accs)) if accs else None,
        "std_test_accuracy": float(np.std(accs)) if accs else None,
        "per_seed": per_seed,
    }
    with open(out / "results.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "round", "client_id", "train_loss", "val_acc", "test_acc"])
        writer.writerows(curve_rows)
    with open(out / "clients.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["seed", "client_id", "n_test", "test_acc", "hcs", "extractor_acc"]
        writer.writerow(header)
        for seed_result in per_seed:
            for row in seed_result["clients"]:
                writer.writerow(
                    [
                        seed_result["seed"],
                        row["client_id"],
                        row["n_test"],
                        _fmt(row.get("test_acc")),
                        _fmt(row.get("hcs")),
                        _fmt(row.get("extractor_acc")),
                    ]
                )


def cmd_metrics(path: str, out_dir: str) -> int:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"no such path: {path}")
    rows = []
    if (p / "manifest.json").exists():
        task = dataio.load_task(p)
        for sub, record in zip(task.clients, task.injection_log):
            rows.append(_client_stats_row(sub.client_id, sub.graph, record.mode))
    else:
        rows.append(_client_stats_row("global", dataio.load_graph(p)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "config.json", "w") as fh:
        json.dump({"command": "metrics", "path": str(path), "out": str(out_dir)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print_stats_table(rows)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map usage errors onto exit code 1
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adafgl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")

    sp = sub.add_parser("split", parents=[common], help="generate a federated task")
    sp.add_argument("--dataset", help="graph directory")
    sp.add_argument("--strategy", choices=["community", "structure-noniid"])
    sp.add_argument("--num-clients", type=int, dest="num_clients")

    tp = sub.add_parser("train", parents=[common], help="run fedgcn or adafgl")
    tp.add_argument("--method", choices=["fedgcn", "adafgl"], required=True)
    tp.add_argument("--task", dest="task_dir", help="task directory (default <out>/task)")
    tp.add_argument("--participation", type=float)
    tp.add_argument("--feature-missing", type=float, dest="feature_missing")
    tp.add_argument("--edge-drop", type=float, dest="edge_drop")
    tp.add_argument("--label-rate", type=float, dest="label_rate")
    tp.add_argument("--workers", type=int)

    mp = sub.add_parser("metrics", parents=[common], help="graph/task statistics")
    mp.add_argument("path", help="graph or task directory")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = {
            k: v
            for k, v in vars(args).items()
            if k not in ("command", "config", "path", "method") and v is not None
        }
        if args.command == "train" and args.seed is not None:
            overrides["seeds"] = [args.seed]
        if args.command == "metrics":
            out = args.out or "."
            return cmd_metrics(args.path, out)
        cfg = load_config(args.config, overrides)
        if args.command == "split":
            return cmd_split(cfg)
        return cmd_train(cfg, args.method)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
