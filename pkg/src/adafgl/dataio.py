"""On-disk formats: graph file sets, stratified masks, task directories.

A graph directory holds:
  edges.tsv      one "u<TAB>v" pair per line (duplicates/self-loops tolerated on load)
  features.bin   little-endian int64 header (n, f) then n*f float64 row-major
  labels.txt     one integer class per line
  masks.tsv      optional; one of train/val/test/none per line

A task directory holds manifest.json plus one graph directory per client.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from pathlib import Path

import numpy as np

from .graph import Graph, from_edges
from .splits import ClientSubgraph, FederatedTask, InjectionRecord

log = logging.getLogger(__name__)

MASK_TOKENS = ("train", "val", "test", "none")


def save_graph(path: str | Path, g: Graph) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    edges = g.edge_array()
    with open(path / "edges.tsv", "w") as fh:
        for u, v in edges:
            fh.write(f"{u}\t{v}\n")
    with open(path / "features.bin", "wb") as fh:
        fh.write(struct.pack("<qq", g.num_nodes, g.features.shape[1]))
        fh.write(g.features.astype("<f8").tobytes())
    with open(path / "labels.txt", "w") as fh:
        for y in g.labels:
            fh.write(f"{y}\n")
    token = np.full(g.num_nodes, "none", dtype=object)
    token[g.train_mask] = "train"
    token[g.val_mask] = "val"
    token[g.test_mask] = "test"
    with open(path / "masks.tsv", "w") as fh:
        for t in token:
            fh.write(f"{t}\n")


def load_graph(path: str | Path, num_classes: int | None = None) -> Graph:
    """Load and validate a graph directory; reports dropped duplicate/self edges."""
    path = Path(path)
    for name in ("edges.tsv", "features.bin", "labels.txt"):
        if not (path / name).exists():
            raise FileNotFoundError(f"graph directory {path} is missing {name}")

    with open(path / "features.bin", "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}/features.bin: truncated header")
        n, f = struct.unpack("<qq", header)
        if n < 0 or f < 0:
            raise ValueError(f"{path}/features.bin: negative dimensions")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * f:
        raise ValueError(
            f"{path}/features.bin: expected {n * f} values, found {data.size}"
        )
    features = data.reshape(n, f).copy()

    raw_edges = []
    with open(path / "edges.tsv") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}/edges.tsv:{lineno}: expected 'u<TAB>v'")
            u, v = int(parts[0]), int(parts[1])
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"{path}/edges.tsv:{lineno}: endpoint out of range")
            raw_edges.append((u, v))
    edges = np.asarray(raw_edges, dtype=np.int64).reshape(-1, 2)

    labels = []
    with open(path / "labels.txt") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line:
                labels.append(int(line))
    if len(labels) != n:
        raise ValueError(f"{path}/labels.txt: expected {n} labels, found {len(labels)}")
    labels = np.asarray(labels, dtype=np.int64)
    classes = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 0)
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"{path}/labels.txt: label outside [0, {classes})")

    masks = {}
    mask_file = path / "masks.tsv"
    if mask_file.exists():
        tokens = [line.strip() for line in open(mask_file) if line.strip()]
        if len(tokens) != n:
            raise ValueError(f"{path}/masks.tsv: expected {n} rows, found {len(tokens)}")
        bad = set(tokens) - set(MASK_TOKENS)
        if bad:
            raise ValueError(f"{path}/masks.tsv: unknown tokens {sorted(bad)}")
        arr = np.asarray(tokens)
        masks = {
            "train_mask": arr == "train",
            "val_mask": arr == "val",
            "test_mask": arr == "test",
        }

    g = from_edges(n, edges, features, labels, num_classes=classes, **masks)
    dropped = len(edges) - g.num_edges
    if dropped:
        log.info("load_graph(%s): dropped %d duplicate/self-loop edge lines", path, dropped)
    return g


def make_masks(g: Graph, ratios: tuple[float, float, float], seed: int) -> Graph:
    """Per-class stratified train/val/test masks at the given ratios."""
    tr, va, te = ratios
    if abs(tr + va + te - 1.0) > 1e-9:
        raise ValueError("mask ratios must sum to 1")
    if min(tr, va, te) < 0:
        raise ValueError("mask ratios must be non-negative")
    rng = np.random.default_rng(seed)
    train = np.zeros(g.num_nodes, dtype=bool)
    val = np.zeros(g.num_nodes, dtype=bool)
    test = np.zeros(g.num_nodes, dtype=bool)
    for cls in range(g.num_classes):
        idx = np.flatnonzero(g.labels == cls)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        count = len(idx)
        if count < 3:
            warnings.warn(
                f"class {cls} has only {count} nodes; falling back to a proportional split"
            )
            train[idx[0]] = True
            if count > 1:
                val[idx[1]] = True
            continue
        n_tr = max(1, int(round(tr * count)))
        n_va = int(round(va * count))
        n_va = min(n_va, count - n_tr)
        train[idx[:n_tr]] = True
        val[idx[n_tr : n_tr + n_va]] = True
        test[idx[n_tr + n_va :]] = True
    return g.with_masks(train, val, test)


def save_task(task: FederatedTask, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "fgl-task",
        "version": 1,
        "strategy": task.strategy,
        "seed": task.seed,
        "num_clients": task.num_clients,
        "p_s": task.p_s,
        "ratio": task.ratio,
        "injection_log": [
            {
                "client_id": r.client_id,
                "mode": r.mode,
                "edges_added": r.edges_added,
                "shortfall": r.shortfall,
            }
            for r in task.injection_log
        ],
        "clients": [
            {
                "client_id": sub.client_id,
                "path": f"client_{sub.client_id:03d}",
                "num_classes": sub.graph.num_classes,
                "global_ids": [int(i) for i in sub.global_ids],
            }
            for sub in task.clients
        ],
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for sub in task.clients:
        save_graph(path / f"client_{sub.client_id:03d}", sub.graph)


def load_task(path: str | Path) -> FederatedTask:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"{path} has no manifest.json")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("format") != "fgl-task":
        raise ValueError(f"{manifest_file} is not a task manifest")
    clients = []
    for entry in manifest["clients"]:
        g = load_graph(path / entry["path"], num_classes=entry.get("num_classes"))
        clients.append(
            ClientSubgraph(
                client_id=entry["client_id"],
                graph=g,
                global_ids=np.asarray(entry["global_ids"], dtype=np.int64),
            )
        )
    log_entries = tuple(
        InjectionRecord(e["client_id"], e["mode"], e["edges_added"], e["shortfall"])
        for e in manifest["injection_log"]
    )
    return FederatedTask(
        clients=tuple(clients),
        strategy=manifest["strategy"],
        seed=manifest["seed"],
        injection_log=log_entries,
        p_s=manifest.get("p_s"),
        ratio=manifest.get("ratio"),
    )
