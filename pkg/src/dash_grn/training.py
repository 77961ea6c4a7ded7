"""Training loop with interleaved pruning, early stopping and lambda selection."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import ConfigurationError, ContractError, DivergenceError
from .odeint import DEFAULT_N_SUB, TrajectoryDataset, combined_loss, data_loss
from .pruning import PruneScores, PruneSchedule, apply_prune, bioprune_scores, dash_scores, magnitude_scores

log = logging.getLogger(__name__)

SCORERS = ("dash", "imp", "bioprune")


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.9
    decay_window: int = 3
    # relative val-MSE improvement over a window below which lr decays
    min_improvement: float = 1e-3
    patience: int = 40
    max_epochs: int = 500
    lambda1: float = 0.0
    lambda2: float = 0.0
    tau: float = 1.0
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    n_sub: int = DEFAULT_N_SUB
    batch_size: int = 10
    seed: int = 0
    # pruning scores at schedule events: "dash", "imp" (magnitude) or "bioprune" (prior only)
    method: str = "dash"

    def __post_init__(self):
        if self.method not in SCORERS:
            raise ConfigurationError(f"unknown pruning method {self.method!r}; choose from {sorted(SCORERS)}")
        if isinstance(self.schedule, (dict, type(None))):
            self.schedule = PruneSchedule.from_config(self.schedule, self.max_epochs)
        for name in ("lambda1", "lambda2", "tau"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ContractError("lr0 must be > 0 and lr_decay in (0, 1]")
        if self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1 or self.n_sub < 1:
            raise ContractError("max_epochs >= 0, patience >= 1, batch_size >= 1 and n_sub >= 1 required")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schedule"] = self.schedule.to_config()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) that never moves masked entries."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, masks: dict | None = None) -> dict:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            if masks and name in masks:
                update = update * masks[name]
            out[name] = p - update
        return out

    def clear_masked(self, masks: dict):
        for name, mask in masks.items():
            if name in self.m:
                self.m[name] = self.m[name] * mask
                self.v[name] = self.v[name] * mask


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    sparsity: float
    lr: float
    pruned: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f.name for f in fields(EpochRecord)])
            for r in self.records:
                w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_mse)), repr(float(r.sparsity)), repr(float(r.lr)),
                            "" if r.pruned is None else repr(float(r.pruned))])
        return path


@dataclass
class TrainResult:
    model: object  # best-validation snapshot
    history: TrainHistory
    best_val: float
    best_epoch: int
    stop_reason: str
    final_model: object = None

    @property
    def diverged(self) -> bool:
        return self.stop_reason == "diverged"


def model_sparsity(p) -> float:
    """Fraction of masked entries over the weight matrices (biases excluded)."""
    total = sum(p.masks[n].size for n in p.weight_names)
    zeros = sum(int(np.count_nonzero(p.masks[n] == 0)) for n in p.weight_names)
    return zeros / total if total else 0.0


def _unpack(datasets):
    if isinstance(datasets, dict):
        return datasets["train"], datasets["val"]
    return datasets[0], datasets[1]


def _rngs(seed):
    shuffle, scores = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(scores)


def _scorer(config):
    if config.method == "imp":
        return magnitude_scores
    if config.method == "bioprune":
        return bioprune_scores
    return lambda p, prev, priors, epoch, rng=None: dash_scores(
        p, prev, priors, config.lambda1, config.lambda2, epoch, rng)


def _needs_priors(config):
    if config.tau < 1.0:
        return True
    if not config.schedule.events:
        return False
    return config.method == "bioprune" or (config.method == "dash" and (config.lambda1 > 0 or config.lambda2 > 0))


def train(model, datasets, priors, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Train ``model`` with Adam, pruning at schedule events.

    At each prune event the DASH scores are refreshed, the lowest-scored
    fraction of unmasked weights is masked, and the learning rate is reset to
    ``lr0``. Returns the snapshot with the best validation MSE.

    ``on_epoch(record, model)`` is called after every completed epoch.
    """
    train_ds, val_ds = _unpack(datasets)
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ContractError("train and validation sets must be non-empty")
    if _needs_priors(config) and priors is None:
        raise ConfigurationError("priors are required for prior-guided pruning or tau < 1")
    score = _scorer(config)
    prior_adj = None if priors is None else np.asarray(priors.P, dtype=np.float64)

    model = model.copy()
    history = TrainHistory()
    shuffle_rng, score_rng = _rngs(config.seed)
    optimizer = Adam()
    lr = config.lr0
    try:
        val = float(data_loss(model.rhs(), val_ds, config.n_sub))
    except DivergenceError as exc:
        log.warning("initial model diverges: %s", exc)
        return TrainResult(model, history, math.inf, 0, "diverged", model)
    best, best_val, best_epoch = model.copy(), val, 0
    if config.max_epochs == 0:
        return TrainResult(best, history, best_val, 0, "max_epochs", model)

    scores: PruneScores | None = None
    if config.schedule.events:
        scores = score(model, None, priors, 0, score_rng)
    refresh = 0
    window_ref, window_len = best_val, 0
    since_best = 0
    stop = "max_epochs"
    n = len(train_ds)
    for epoch in range(1, config.max_epochs + 1):
        frac = config.schedule.fraction_at(epoch)
        extra = config.schedule.refresh_every
        if scores is not None and (frac is not None or (extra and epoch % extra == 0)):
            refresh += 1
            scores = score(model, scores, priors, refresh)
        if frac is not None:
            model.masks = apply_prune(model, scores.scores, frac)
            optimizer.clear_masked(model.masks)
            lr = config.lr0
            window_ref, window_len = best_val if not history.records else history.records[-1].val_mse, 0

        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        try:
            for start in range(0, n, config.batch_size):
                batch = train_ds.subset(order[start:start + config.batch_size])
                tape = ag.Tape()
                leaves = {name: tape.variable(a, name) for name, a in model.arrays().items()}
                loss = combined_loss(model.rhs(leaves), prior_adj, batch, config.tau, config.n_sub)
                if not np.isfinite(loss.value):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}", step=epoch)
                grads = ag.grad(loss, leaves)
                new = optimizer.step(model.arrays(), grads, lr, model.masks)
                for name, a in new.items():
                    setattr(model, name, a)
                loss_sum += float(loss.value) * len(batch)
            val = float(data_loss(model.rhs(), val_ds, config.n_sub))
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}", step=epoch)
        except DivergenceError as exc:
            log.warning("training aborted: %s", exc)
            stop = "diverged"
            break

        if val < best_val:
            best, best_val, best_epoch, since_best = model.copy(), val, epoch, 0
        else:
            since_best += 1
        history.records.append(EpochRecord(epoch, loss_sum / n, val, model_sparsity(model), lr, frac))
        if on_epoch is not None:
            on_epoch(history.records[-1], model)

        window_len += 1
        if window_len >= config.decay_window:
            if window_ref <= 0 or (window_ref - val) / window_ref < config.min_improvement:
                lr *= config.lr_decay
            window_ref, window_len = val, 0
        if since_best >= config.patience:
            stop = "patience"
            break
    return TrainResult(best, history, best_val, best_epoch, stop, model)


# -- lambda cross-validation -------------------------------------------------------


@dataclass
class CVResult:
    best: tuple[float, float]
    table: list[dict]


def _kfold(train_ds: TrajectoryDataset, val_ds: TrajectoryDataset, folds: int, seed: int):
    pooled = TrajectoryDataset(
        train_ds.times, np.concatenate([train_ds.states, val_ds.states]), train_ds.gene_names,
        traj_ids=train_ds.traj_ids + val_ds.traj_ids,
    )
    perm = np.random.default_rng(seed).permutation(len(pooled))
    parts = np.array_split(perm, folds)
    for i in range(folds):
        held = np.sort(parts[i])
        rest = np.sort(np.concatenate([parts[j] for j in range(folds) if j != i]))
        yield pooled.subset(rest, "train"), pooled.subset(held, "val")


def _cv_cell(model, splits, priors, config):
    vals, spars = [], []
    for tr, va in splits:
        res = train(model, (tr, va), priors, config)
        vals.append(res.best_val)
        spars.append(model_sparsity(res.model))
    return float(np.mean(vals)), float(np.mean(spars))


def select_lambda(table: list[dict]) -> tuple[float, float]:
    """Cell with the lowest mean val MSE; ties prefer larger lambda1 + lambda2."""
    if not table:
        raise ContractError("empty lambda grid")
    row = min(table, key=lambda r: (r["val_mse"], -(r["lambda1"] + r["lambda2"])))
    return row["lambda1"], row["lambda2"]


def cross_validate_lambda(grid, model, datasets, priors, config: TrainConfig, folds: int | None = None,
                          threads: int = 1) -> CVResult:
    """Train one model per ``(lambda1, lambda2)`` cell and pick the best by validation MSE.

    With ``folds`` unset the given validation split is used; otherwise train and
    validation trajectories are pooled and split into ``folds`` folds.
    """
    grid = [(float(a), float(b)) for a, b in grid]
    if not grid:
        raise ContractError("lambda grid must be non-empty")
    train_ds, val_ds = _unpack(datasets)
    if folds:
        if folds < 2:
            raise ContractError("folds must be >= 2")
        splits = list(_kfold(train_ds, val_ds, folds, config.seed))
    else:
        splits = [(train_ds, val_ds)]
    jobs = [(model, splits, priors, replace(config, lambda1=l1, lambda2=l2)) for l1, l2 in grid]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_cv_cell, *zip(*jobs)))
    else:
        results = [_cv_cell(*job) for job in jobs]
    table = [
        {"lambda1": l1, "lambda2": l2, "val_mse": v, "sparsity": s}
        for (l1, l2), (v, s) in zip(grid, results)
    ]
    return CVResult(select_lambda(table), table)
