"""Downstream probes on frozen embeddings.

A probe is a 3-layer MLP (two ReLU hidden layers and a task head) trained
with Adam on embeddings from an encoder that is never updated.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .network import AdamState, CfnParams, adam_step, embed_batch, glorot_layer, load_checkpoint, mlp_backward, mlp_forward
from .patches import N_FAMILIES, N_INSTRUMENTS, NoteArrays, SliceSpec, load_split

TASKS = {"family": N_FAMILIES, "instrument": N_INSTRUMENTS, "pitch": None}


@dataclass
class ProbeConfig:
    task: str = "family"
    train_size: int = 500
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    hidden: tuple[int, int] = (128, 64)
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if self.train_size < 1:
            raise ValueError(f"train_size must be >= 1, got {self.train_size}")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValueError(f"hidden must be two positive widths, got {self.hidden}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")


@dataclass
class ProbeResult:
    task: str
    metric: str
    value: float
    train_size: int
    seed: int
    train_indices: np.ndarray = dataclasses.field(repr=False, default=None)


def extract_embeddings(params: CfnParams, data: NoteArrays, spec: SliceSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """One identity-order embedding per record, plus every label column."""
    emb = embed_batch(params, data.spectrograms, spec)
    labels = {task: data.labels(task) for task in TASKS}
    return emb, labels


def _standardize(train: np.ndarray, *others: np.ndarray):
    """Center each column, then divide by one global scale (the RMS column
    std).  A per-column scale would blow up rarely active units."""
    mu = train.mean(axis=0)
    sd = float(np.sqrt(np.mean(train.var(axis=0))))
    sd = sd if sd > 1e-12 else 1.0
    return [(x - mu) / sd for x in (train,) + others], mu, sd


def train_probe(train_emb: np.ndarray, train_labels: np.ndarray, test_emb: np.ndarray, test_labels: np.ndarray,
                config: ProbeConfig) -> ProbeResult:
    """Fit a probe on ``config.train_size`` seeded-shuffled training rows and
    score it on the test rows (accuracy, or MSE in raw label units)."""
    if train_emb.shape[0] != train_labels.shape[0] or test_emb.shape[0] != test_labels.shape[0]:
        raise ValueError("embedding and label row counts differ")
    if config.train_size > train_emb.shape[0]:
        raise ValueError(f"train_size {config.train_size} exceeds {train_emb.shape[0]} available rows")
    rng = np.random.default_rng(config.seed)
    idx = rng.permutation(train_emb.shape[0])[: config.train_size]
    (x_tr, x_te), _, _ = _standardize(train_emb[idx].astype(np.float64), test_emb.astype(np.float64))
    x_tr = x_tr.astype(np.float32)
    x_te = x_te.astype(np.float32)

    n_classes = TASKS[config.task]
    regression = n_classes is None
    if regression:
        t_raw = train_labels[idx].astype(np.float64)
        t_mu, t_sd = t_raw.mean(), t_raw.std()
        # constant targets: train on zeros, and predict the constant exactly
        t_sd = t_sd if t_sd > 1e-8 else 0.0
        targets = ((t_raw - t_mu) / (t_sd or 1.0)).astype(np.float32)[:, None]
        out_dim = 1
    else:
        targets = train_labels[idx].astype(np.int64)
        out_dim = n_classes

    h1, h2 = config.hidden
    layers = [
        glorot_layer(rng, x_tr.shape[1], h1, "relu", np.float32),
        glorot_layer(rng, h1, h2, "relu", np.float32),
        glorot_layer(rng, h2, out_dim, "identity", np.float32),
    ]
    arrays = [a for l in layers for a in (l.weight, l.bias)]
    adam = AdamState.zeros_like(arrays, lr=config.lr)
    N = x_tr.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(N)
        for lo in range(0, N, config.batch_size):
            b = order[lo:lo + config.batch_size]
            out, cache = mlp_forward(layers, x_tr[b])
            if regression:
                dout = (out - targets[b]) * (2.0 / b.size)
            else:
                z = out - out.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                p[np.arange(b.size), targets[b]] -= 1.0
                dout = p / b.size
            grads, _ = mlp_backward(layers, cache, dout.astype(np.float32))
            adam_step(adam, arrays, [g for pair in grads for g in pair])

    pred, _ = mlp_forward(layers, x_te)
    if regression:
        value = float(np.mean((pred[:, 0].astype(np.float64) * t_sd + t_mu - test_labels) ** 2))
        metric = "mse"
    else:
        value = float(np.mean(np.argmax(pred, axis=1) == test_labels))
        metric = "accuracy"
    return ProbeResult(config.task, metric, value, config.train_size, config.seed, idx)


def probe_checkpoint(model_path, manifest, config: ProbeConfig, train_split: str = "train", test_split: str = "test") -> ProbeResult:
    params, meta = load_checkpoint(model_path)
    spec = SliceSpec(meta["pretrain"]["n_x"], meta["pretrain"]["n_y"])
    train = NoteArrays.from_records(load_split(manifest, train_split))
    test = NoteArrays.from_records(load_split(manifest, test_split))
    e_tr, l_tr = extract_embeddings(params, train, spec)
    e_te, l_te = extract_embeddings(params, test, spec)
    return train_probe(e_tr, l_tr[config.task], e_te, l_te[config.task], config)


def worker_count() -> int:
    """Worker cap from ``PERMSSL_THREADS``, defaulting to the logical CPU count."""
    raw = os.environ.get("PERMSSL_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"PERMSSL_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def _model_name(path) -> str:
    return Path(path).stem


def _grid_cell(args):
    emb_file, model, task, size, seed, overrides = args
    with np.load(emb_file) as z:
        cfg = ProbeConfig(task=task, train_size=size, seed=seed, **overrides)
        res = train_probe(z["train"], z[f"train_{task}"], z["test"], z[f"test_{task}"], cfg)
    return {"model": model, "task": task, "train_size": size, "seed": seed, "metric": res.metric, "value": res.value}


def run_experiment_grid(model_paths: Sequence, manifest, tasks: Sequence[str], train_sizes: Sequence[int],
                        seeds: Sequence[int], probe_overrides: dict | None = None, workers: int | None = None,
                        scratch_dir=None) -> list[dict]:
    """Probe every (model, task, size, seed) cell; rows come back in that
    nested order regardless of how many workers ran them."""
    for path in model_paths:
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
    names = [_model_name(p) for p in model_paths]
    if len(set(names)) != len(names):
        raise ValueError(f"model names must be unique, got {names}")
    overrides = dict(probe_overrides or {})
    for task in tasks:
        ProbeConfig(task=task)
    train = NoteArrays.from_records(load_split(manifest, "train"))
    test = NoteArrays.from_records(load_split(manifest, "test"))

    import tempfile

    with tempfile.TemporaryDirectory(dir=scratch_dir) as tmp:
        cells = []
        for path, name in zip(model_paths, names):
            params, meta = load_checkpoint(path)
            spec = SliceSpec(meta["pretrain"]["n_x"], meta["pretrain"]["n_y"])
            e_tr, l_tr = extract_embeddings(params, train, spec)
            e_te, l_te = extract_embeddings(params, test, spec)
            emb_file = Path(tmp) / f"{len(cells)}-{name}.npz"
            np.savez(emb_file, train=e_tr, test=e_te,
                     **{f"train_{t}": l_tr[t] for t in TASKS}, **{f"test_{t}": l_te[t] for t in TASKS})
            for task in tasks:
                for size in train_sizes:
                    for seed in seeds:
                        cells.append((str(emb_file), name, task, int(size), int(seed), overrides))
        workers = min(worker_count() if workers is None else workers, len(cells))
        if workers <= 1:
            return [_grid_cell(c) for c in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_grid_cell, cells))


def rows_to_jsonl(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def summarize(rows: Sequence[dict]) -> str:
    """CSV of mean and sample std over seeds per (model, task, train_size)."""
    groups: dict[tuple, list[float]] = {}
    metrics = {}
    for r in rows:
        key = (r["model"], r["task"], r["train_size"])
        groups.setdefault(key, []).append(r["value"])
        metrics[key] = r["metric"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "task", "train_size", "metric", "n_seeds", "mean", "std"])
    for key, vals in groups.items():
        v = np.array(vals)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        w.writerow([*key, metrics[key], v.size, repr(float(v.mean())), repr(std)])
    return buf.getvalue()
