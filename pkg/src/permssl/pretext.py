"""Permutation-inversion pre-training and pretext evaluation.

Every example gets a fresh permutation each epoch, derived from
``(seed, epoch, example index)``, so runs with different losses but equal
seeds see exactly the same shuffles.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import softrank
from .network import AdamState, CfnParams, adam_step, cfn_backward, cfn_forward, init_cfn
from .patches import NoteArrays, SliceSpec, slice_batch
from .permcore import hard_rank, max_hamming_set, random_permutation

LOSSES = ("fy", "softrank-mse", "mse-raw", "xe-fixed")
DEFAULT_EPSILON = {"fy": 0.5, "softrank-mse": 0.1}

# salts separating the random streams drawn from one seed
_TRAIN_PERM, _EVAL_PERM, _NOISE, _ORDER = 1, 2, 3, 4


@dataclass
class PretrainConfig:
    loss: str = "fy"
    epsilon: float | None = None
    mc_samples: int = 32
    n_x: int = 1
    n_y: int = 6
    fixed_set_size: int | None = None
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    encoder_widths: tuple[int, ...] = (256, 128)
    head_width: int = 256

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.epsilon is None and self.loss in DEFAULT_EPSILON:
            self.epsilon = DEFAULT_EPSILON[self.loss]
        if self.loss == "xe-fixed" and self.fixed_set_size is None:
            self.fixed_set_size = 100
        self.validate()

    @property
    def spec(self) -> SliceSpec:
        return SliceSpec(self.n_x, self.n_y)

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.n_x < 1 or self.n_y < 1 or self.n_x * self.n_y < 2:
            raise ValueError(f"need n_x, n_y >= 1 and n_x * n_y >= 2, got {self.n_x}, {self.n_y}")
        if self.loss in DEFAULT_EPSILON and not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.loss == "xe-fixed":
            if self.fixed_set_size < 2:
                raise ValueError(f"fixed_set_size must be >= 2, got {self.fixed_set_size}")
        elif self.fixed_set_size is not None:
            raise ValueError(f"fixed_set_size only applies to xe-fixed, not {self.loss!r}")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    split: str
    loss: float
    partial_ranks_accuracy: float
    wall_time: float | None = None

    def to_dict(self, include_time: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_time:
            del d["wall_time"]
        return d


def fixed_permutation_set(config: PretrainConfig) -> np.ndarray | None:
    if config.loss != "xe-fixed":
        return None
    return max_hamming_set(config.spec.n, config.fixed_set_size, pool=1000, seed=config.seed)


def draw_targets(config: PretrainConfig, fixed_set, salt: int, epoch: int, indices: Iterable[int]):
    """Permutations (and, for xe-fixed, set indices) for the given examples."""
    n = config.spec.n
    perms, classes = [], []
    for i in indices:
        key = (config.seed, salt, epoch, int(i))
        if fixed_set is None:
            perms.append(random_permutation(n, key))
        else:
            c = int(np.random.default_rng(key).integers(fixed_set.shape[0]))
            classes.append(c)
            perms.append(fixed_set[c])
    return np.array(perms), (np.array(classes) if fixed_set is not None else None)


def batch_loss_and_grad(theta: np.ndarray, perms: np.ndarray, classes, config: PretrainConfig, noise_keys):
    """Mean loss over the batch and its gradient w.r.t. the scores."""
    theta = np.asarray(theta, dtype=np.float64)
    B = theta.shape[0]
    losses = np.empty(B)
    grads = np.empty_like(theta)
    for b in range(B):
        if config.loss == "fy":
            losses[b], grads[b] = softrank.fy_loss_and_grad(theta[b], perms[b], config.epsilon, config.mc_samples, noise_keys[b])
        elif config.loss == "softrank-mse":
            losses[b], grads[b] = softrank.soft_rank_mse_loss_and_grad(theta[b], perms[b], config.epsilon)
        elif config.loss == "mse-raw":
            losses[b], grads[b] = softrank.mse_raw_loss_and_grad(theta[b], perms[b])
        else:
            losses[b], grads[b] = softrank.xe_fixed_loss_and_grad(theta[b], int(classes[b]))
    return float(losses.mean()), grads / B


def predicted_ranks(theta: np.ndarray, fixed_set) -> np.ndarray:
    """Hard ranks of the scores; for a fixed-set classifier, the arg-max set element."""
    if fixed_set is None:
        return hard_rank(theta)
    return fixed_set[np.argmax(theta, axis=1)]


def _accuracy(pred: np.ndarray, perms: np.ndarray) -> np.ndarray:
    return (pred == perms).mean(axis=1)


def _shuffle(X: np.ndarray, perms: np.ndarray) -> np.ndarray:
    return np.take_along_axis(X, perms[:, :, None], axis=1)


def _pretext_pass(score_fn, X, config, fixed_set, salt, epoch, batch=256):
    """Loss and partial ranks accuracy without updates."""
    losses, accs = [], []
    for lo in range(0, X.shape[0], batch):
        idx = np.arange(lo, min(lo + batch, X.shape[0]))
        perms, classes = draw_targets(config, fixed_set, salt, epoch, idx)
        theta = np.asarray(score_fn(_shuffle(X[idx], perms)), dtype=np.float64)
        keys = [(config.seed, _NOISE, salt, epoch, int(i)) for i in idx]
        loss, _ = batch_loss_and_grad(theta, perms, classes, config, keys)
        losses.append(loss * idx.size)
        accs.append(_accuracy(predicted_ranks(theta, fixed_set), perms))
    return float(np.sum(losses) / X.shape[0]), float(np.concatenate(accs).mean())


def _score_fn(model):
    if isinstance(model, CfnParams):
        return lambda Xb: cfn_forward(model, Xb)[0]
    return model


def evaluate_pretext(model, data: NoteArrays, config: PretrainConfig, seed: int = 0) -> float:
    """Partial ranks accuracy of one seeded shuffle per example.

    ``model`` is a :class:`CfnParams` or any callable mapping shuffled
    patches ``(B, n, d)`` to scores ``(B, n)``.
    """
    X = slice_batch(data.spectrograms, config.spec)
    if isinstance(model, CfnParams) and (model.n, model.d) != X.shape[1:]:
        raise ValueError(f"network expects (n, d)={(model.n, model.d)}, data gives {X.shape[1:]}")
    cfg = dataclasses.replace(config, seed=seed)
    fixed = fixed_permutation_set(config)
    _, acc = _pretext_pass(_score_fn(model), X, cfg, fixed, _EVAL_PERM, 0)
    return acc


def input_stats(data: NoteArrays) -> dict:
    """Scalar mean and std of all training values, for input standardization."""
    x = np.asarray(data.spectrograms, dtype=np.float64)
    sd = float(x.std())
    return {"input_shift": float(x.mean()), "input_scale": sd if sd > 1e-12 else 1.0}


def random_embedding_baseline(n: int, d: int, seed: int = 0, **dims) -> CfnParams:
    """Untrained encoder, named so experiment configs can refer to the baseline.
    Pass ``**input_stats(train)`` to standardize inputs as pre-training does."""
    return init_cfn(n, d, seed=seed, **dims)


def init_for_config(config: PretrainConfig, d: int, dtype=np.float32, stats: dict | None = None) -> CfnParams:
    out_dim = config.fixed_set_size if config.loss == "xe-fixed" else None
    return init_cfn(config.spec.n, d, config.encoder_widths, config.head_width, out_dim, config.seed, dtype,
                    **(stats or {}))


def pretrain(train: NoteArrays, config: PretrainConfig, valid: NoteArrays | None = None,
             on_metrics: Callable[[MetricsRecord], None] | None = None,
             on_epoch: Callable[[int, CfnParams], None] | None = None,
             dtype=np.float32) -> tuple[CfnParams, list[MetricsRecord]]:
    """Train the CFN to invert patch permutations.

    Emits a validation record before training (epoch 0) and a train and
    validation record after each epoch.  Returns the final parameters and
    all records.
    """
    config.validate()
    if len(train) == 0:
        raise ValueError("empty training set")
    spec = config.spec
    X = slice_batch(train.spectrograms, spec)
    Xv = slice_batch(valid.spectrograms, spec) if valid is not None else None
    params = init_for_config(config, X.shape[2], dtype, input_stats(train))
    fixed = fixed_permutation_set(config)
    arrays = params.arrays()
    adam = AdamState.zeros_like(arrays, lr=config.lr)
    records: list[MetricsRecord] = []
    t0 = time.perf_counter()

    def emit(rec):
        records.append(rec)
        if on_metrics is not None:
            on_metrics(rec)

    def validate(epoch, step):
        if Xv is not None:
            loss, acc = _pretext_pass(_score_fn(params), Xv, config, fixed, _EVAL_PERM, 0)
            emit(MetricsRecord(step, epoch, "valid", loss, acc, time.perf_counter() - t0))

    validate(0, 0)
    N = X.shape[0]
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng((config.seed, _ORDER, epoch)).permutation(N)
        loss_sum, acc_sum = 0.0, 0.0
        for lo in range(0, N, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            perms, classes = draw_targets(config, fixed, _TRAIN_PERM, epoch, idx)
            theta, trace = cfn_forward(params, _shuffle(X[idx], perms))
            keys = [(config.seed, _NOISE, _TRAIN_PERM, epoch, int(i)) for i in idx]
            loss, dtheta = batch_loss_and_grad(theta, perms, classes, config, keys)
            grads = cfn_backward(params, trace, dtheta)
            adam_step(adam, arrays, grads)
            step += 1
            loss_sum += loss * idx.size
            acc_sum += float(_accuracy(predicted_ranks(theta, fixed), perms).sum())
        emit(MetricsRecord(step, epoch, "train", loss_sum / N, acc_sum / N, time.perf_counter() - t0))
        validate(epoch, step)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, records
