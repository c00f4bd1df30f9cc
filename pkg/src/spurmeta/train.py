"""Training loops: episodic meta-training, ERM baselines, model selection.

One epoch of meta-training rebuilds the full-data centroid classifier,
recomputes the spuriousness table from its training-set predictions,
constructs tasks from the table, and takes one momentum-SGD step per task
under a cosine-annealed learning rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FeatureStore
from .episodes import Episode, EpisodeConfig, build_episode, build_random_episode
from .groups import (GroupIndex, PredictionRecord, SpuriousnessTable,
                     build_spuriousness_table, group_accuracy)
from .model import (ExtractorParams, GradientSet, LinearHead, full_data_centroids,
                    init_params, episode_gradient, erm_loss, forward,
                    predict_classes, ModelError)

SELECTION_MODES = ("pseudo-unbiased", "validation-accuracy")


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    tasks_per_epoch: int = 60
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 5.0
    n_support: int = 10
    metric: str = "tanh-abs-log-ratio"
    selection: str = "pseudo-unbiased"
    seed: int = 0
    hidden_dims: tuple[int, ...] = (16, 8)
    activation: str = "tanh"
    episode_mode: str = "spuriousness-aware"
    n_classes_per_task: int | None = None
    retry_budget: int = 20
    recompute_interval: int = 1  # epochs between spuriousness-table refreshes
    task_batch_size: int = 1
    erm_batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.tasks_per_epoch < 1:
            raise ValueError("epochs and tasks_per_epoch must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection!r}")

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(n_support=self.n_support,
                             n_classes_per_task=self.n_classes_per_task,
                             retry_budget=self.retry_budget,
                             mode=self.episode_mode)


_CONFIG_TYPES = {
    "epochs": int, "tasks_per_epoch": int, "lr": float, "momentum": float,
    "weight_decay": float, "tau": float, "n_support": int, "metric": str,
    "selection": str, "seed": int, "activation": str, "episode_mode": str,
    "n_classes_per_task": int, "retry_budget": int, "recompute_interval": int,
    "task_batch_size": int, "erm_batch_size": int,
}


def load_train_config(path, extra_keys: dict | None = None):
    """Parse a flat key=value config file into a TrainConfig.

    ``extra_keys`` maps additional allowed keys to their types; their parsed
    values come back in a side dict (used by the CLI for pipeline-level
    settings).  Unknown keys are an error.
    """
    extra_keys = extra_keys or {}
    overrides = {}
    extras = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TrainError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "hidden_dims":
                overrides[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif key in _CONFIG_TYPES:
                overrides[key] = _CONFIG_TYPES[key](value)
            elif key in extra_keys:
                extras[key] = extra_keys[key](value)
            else:
                raise TrainError(f"{path}:{lineno}: unknown config key {key!r}")
    try:
        cfg = TrainConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise TrainError(f"{path}: invalid config ({exc})") from exc
    return cfg, extras


@dataclass
class OptimizerState:
    velocities: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: ExtractorParams, extra_shapes=()) -> "OptimizerState":
        bufs = [np.zeros_like(a) for a in params.weights + params.biases]
        bufs += [np.zeros(s) for s in extra_shapes]
        return cls(bufs)


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at epoch 0 to 0 at epoch == total."""
    if not 0 <= epoch <= total:
        raise ValueError("epoch must lie in [0, total]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total))


def sgd_step(arrays: list[np.ndarray], grads: list[np.ndarray],
             state: OptimizerState, lr: float, momentum: float,
             weight_decay: float):
    """In-place momentum SGD with decoupled-from-nothing L2 weight decay."""
    for a, g, v in zip(arrays, grads, state.velocities):
        gp = g + weight_decay * a
        v *= momentum
        v += gp
        a -= lr * v
        if not np.isfinite(a).all():
            raise TrainError("non-finite parameter update (divergence)")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    selection_metric: float
    lr: float
    params: ExtractorParams
    table: SpuriousnessTable


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def best_epoch(self) -> int:
        """Index (1-based epoch) of the max selection metric, earliest on ties."""
        if not self.records:
            raise TrainError("empty training history")
        best = max(range(len(self.records)),
                   key=lambda i: (self.records[i].selection_metric, -i))
        return self.records[best].epoch

    def best_params(self) -> ExtractorParams:
        target = self.best_epoch()
        for rec in self.records:
            if rec.epoch == target:
                return rec.params
        raise TrainError("best epoch not found")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "selection_metric", "lr"])
            for rec in self.records:
                writer.writerow([rec.epoch, repr(rec.mean_loss),
                                 repr(rec.selection_metric), repr(rec.lr)])


def train_prediction_record(params: ExtractorParams, store: FeatureStore,
                            tau: float) -> PredictionRecord:
    """Predict the whole store with the full-data centroid classifier."""
    cset = full_data_centroids(params, store, tau)
    preds = predict_classes(cset, params, store.features)
    return PredictionRecord({sid: (int(p), int(y))
                             for sid, p, y in zip(store.ids, preds, store.labels)})


def pseudo_unbiased_accuracy(params: ExtractorParams, val_index: GroupIndex,
                             val_store: FeatureStore, train_store: FeatureStore,
                             tau: float) -> float:
    """Mean accuracy over the nonempty (class, attribute) validation groups."""
    cset = full_data_centroids(params, train_store, tau)
    preds = predict_classes(cset, params, val_store.features)
    record = PredictionRecord({sid: (int(p), int(y))
                               for sid, p, y in zip(val_store.ids, preds, val_store.labels)})
    accs = []
    for k in val_index.classes:
        for a in range(val_index.n_attributes):
            group = val_index.members(k, a)
            if group:
                accs.append(group_accuracy(group, record))
    if not accs:
        raise TrainError("all validation groups are empty")
    return float(np.mean(accs))


def validation_accuracy(params: ExtractorParams, val_store: FeatureStore,
                        train_store: FeatureStore, tau: float) -> float:
    cset = full_data_centroids(params, train_store, tau)
    preds = predict_classes(cset, params, val_store.features)
    return float((preds == val_store.labels).mean())


def meta_train(cfg: TrainConfig, train_store: FeatureStore,
               train_index: GroupIndex, val_store: FeatureStore,
               val_index: GroupIndex | None = None) -> TrainHistory:
    """Run the episodic outer loop and record one snapshot per epoch."""
    if cfg.selection == "pseudo-unbiased" and val_index is None:
        raise TrainError("pseudo-unbiased selection needs a validation group index")
    root = np.random.SeedSequence(cfg.seed)
    init_ss, loop_ss = root.spawn(2)
    params = init_params((train_store.dim, *cfg.hidden_dims), cfg.activation,
                         np.random.default_rng(init_ss))
    state = OptimizerState.zeros_like(params)
    ecfg = cfg.episode_config()
    history = TrainHistory()
    table = None
    for epoch in range(1, cfg.epochs + 1):
        if table is None or (epoch - 1) % cfg.recompute_interval == 0:
            record = train_prediction_record(params, train_store, cfg.tau)
            table = build_spuriousness_table(train_index, record, cfg.metric,
                                             epoch_tag=epoch)
        else:
            table = replace(table, epoch_tag=epoch)
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr)
        losses = []
        pending: list[GradientSet] = []
        for task in range(cfg.tasks_per_epoch):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=loop_ss.entropy,
                                       spawn_key=(epoch, task)))
            if cfg.episode_mode == "random":
                episode = build_random_episode(train_index, ecfg, rng)
            else:
                episode = build_episode(train_index, table, ecfg, rng)
            loss, grads = episode_gradient(params, episode, train_store, cfg.tau)
            losses.append(loss)
            pending.append(grads)
            if len(pending) == cfg.task_batch_size or task == cfg.tasks_per_epoch - 1:
                merged = pending[0]
                for extra in pending[1:]:
                    merged.add_(extra)
                flat = [a / len(pending)
                        for a in merged.d_weights + merged.d_biases]
                sgd_step(params.weights + params.biases, flat, state, lr,
                         cfg.momentum, cfg.weight_decay)
                pending = []
        if cfg.selection == "pseudo-unbiased":
            metric = pseudo_unbiased_accuracy(params, val_index, val_store,
                                              train_store, cfg.tau)
        else:
            metric = validation_accuracy(params, val_store, train_store, cfg.tau)
        history.records.append(EpochRecord(epoch=epoch,
                                           mean_loss=float(np.mean(losses)),
                                           selection_metric=metric, lr=lr,
                                           params=params.copy(), table=table))
    return history


@dataclass
class ErmResult:
    params: ExtractorParams
    head: LinearHead
    history: list[tuple[int, float, float, float]]  # epoch, mean_loss, val_acc, lr
    best_epoch: int
    best_params: ExtractorParams
    best_head: LinearHead


def erm_predict(params: ExtractorParams, head: LinearHead, X: np.ndarray,
                mode: str, tau: float) -> np.ndarray:
    E, _ = forward(params, X)
    if mode == "linear":
        logits = E @ head.weight.T + head.bias
    else:
        from .model import cosine_matrix
        C, _, _, _ = cosine_matrix(E, head.weight)
        logits = tau * C
    return np.argmax(logits, axis=1)


def erm_train(cfg: TrainConfig, train_store: FeatureStore,
              val_store: FeatureStore, mode: str = "linear") -> ErmResult:
    """Minibatch cross-entropy baseline with the same optimizer contract.

    Model selection uses average validation accuracy, per the baseline
    convention.
    """
    if mode not in ("linear", "cosine"):
        raise TrainError(f"unknown ERM mode {mode!r}")
    root = np.random.SeedSequence(cfg.seed)
    init_ss, loop_ss = root.spawn(2)
    init_rng = np.random.default_rng(init_ss)
    params = init_params((train_store.dim, *cfg.hidden_dims), cfg.activation, init_rng)
    K = train_store.n_classes
    D = params.out_dim
    head = LinearHead(weight=init_rng.normal(0.0, np.sqrt(1.0 / D), size=(K, D)),
                      bias=np.zeros(K))
    state = OptimizerState.zeros_like(params,
                                      extra_shapes=[head.weight.shape, head.bias.shape])
    n = len(train_store)
    history = []
    snapshots = []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=loop_ss.entropy, spawn_key=(epoch,)))
        order = rng.permutation(n)
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr)
        losses = []
        for start in range(0, n, cfg.erm_batch_size):
            batch = order[start:start + cfg.erm_batch_size]
            loss, grads, dWh, dbh = erm_loss(params, head,
                                             train_store.features[batch],
                                             train_store.labels[batch],
                                             mode=mode, tau=cfg.tau)
            losses.append(loss)
            sgd_step(params.weights + params.biases + [head.weight, head.bias],
                     grads.d_weights + grads.d_biases + [dWh, dbh],
                     state, lr, cfg.momentum, cfg.weight_decay)
        preds = erm_predict(params, head, val_store.features, mode, cfg.tau)
        val_acc = float((preds == val_store.labels).mean())
        history.append((epoch, float(np.mean(losses)), val_acc, lr))
        snapshots.append((params.copy(),
                          LinearHead(head.weight.copy(), head.bias.copy())))
    best_i = max(range(len(history)), key=lambda i: (history[i][2], -i))
    best_params, best_head = snapshots[best_i]
    return ErmResult(params=params, head=head, history=history,
                     best_epoch=history[best_i][0],
                     best_params=best_params, best_head=best_head)
