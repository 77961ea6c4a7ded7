"""Fixed-step RK4 integration of dynamics models and trajectory losses."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .errors import ContractError, DivergenceError, ShapeError

DEFAULT_N_SUB = 20


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), k)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        _check_times(self.times)
        if self.states.shape[0] != self.times.size:
            raise ShapeError(f"{self.states.shape[0]} states for {self.times.size} time points")
        if not np.all(np.isfinite(self.states)):
            raise ContractError("trajectory contains non-finite states")


@dataclass
class TrajectoryDataset:
    """Trajectories sharing one time grid, stored as an ``(n, T, k)`` array."""

    times: np.ndarray
    states: np.ndarray
    gene_names: list[str]
    split: str = "all"
    traj_ids: list[str] = field(default=None)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        _check_times(self.times)
        if self.states.ndim != 3 or self.states.shape[1:] != (self.times.size, len(self.gene_names)):
            raise ShapeError(
                f"states shape {self.states.shape} does not match "
                f"(n, {self.times.size}, {len(self.gene_names)})"
            )
        if self.traj_ids is None:
            self.traj_ids = [str(i) for i in range(self.states.shape[0])]
        if len(self.traj_ids) != self.states.shape[0]:
            raise ShapeError("one id per trajectory required")
        self.traj_ids = [str(t) for t in self.traj_ids]

    def __len__(self):
        return self.states.shape[0]

    @property
    def k(self) -> int:
        return len(self.gene_names)

    @property
    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.times, s) for s in self.states]

    def subset(self, index, split: str | None = None) -> "TrajectoryDataset":
        index = list(index)
        return TrajectoryDataset(
            self.times, self.states[index], list(self.gene_names),
            split=self.split if split is None else split,
            traj_ids=[self.traj_ids[i] for i in index],
        )

    @classmethod
    def from_trajectories(cls, trajectories, gene_names, split="all", traj_ids=None):
        if not trajectories:
            raise ContractError("no trajectories given")
        times = trajectories[0].times
        for tr in trajectories:
            if not np.array_equal(tr.times, times):
                raise ContractError("all trajectories must share time points")
        return cls(times, np.stack([tr.states for tr in trajectories]), list(gene_names), split, traj_ids)


def _check_times(times):
    if times.ndim != 1 or times.size < 1:
        raise ShapeError("times must be a non-empty 1-D sequence")
    if np.any(np.diff(times) <= 0):
        raise ContractError("times must be strictly increasing")


def _rhs_of(model) -> Callable:
    return model.rhs() if hasattr(model, "rhs") else model


def rk4_path(f: Callable, y0, times, n_sub: int = DEFAULT_N_SUB) -> list:
    """States at each of ``times`` starting from ``y0`` at ``times[0]``.

    Works on arrays and on autograd nodes alike; with nodes the returned states
    are nodes, so gradients flow through every substep.
    """
    if n_sub < 1:
        raise ContractError("n_sub must be >= 1")
    times = np.asarray(times, dtype=np.float64)
    y = y0
    out = [y]
    step = 0
    for t0, t1 in zip(times[:-1], times[1:]):
        h = (t1 - t0) / n_sub
        for _ in range(n_sub):
            k1 = f(y)
            k2 = f(y + k1 * (h / 2))
            k3 = f(y + k2 * (h / 2))
            k4 = f(y + k3 * h)
            y = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6)
            step += 1
            if not np.isfinite(ag.value(y)).all():
                raise DivergenceError(f"non-finite state at integration step {step}", step=step)
        out.append(y)
    return out


def integrate(model, g0, times, n_sub: int = DEFAULT_N_SUB) -> np.ndarray:
    """Predicted states at ``times``; row 0 equals ``g0``.

    ``g0`` may be one state ``(k,)`` or a batch ``(n, k)``; the result has shape
    ``(T, k)`` or ``(T, n, k)`` respectively.
    """
    g0 = np.asarray(g0, dtype=np.float64)
    if not np.all(np.isfinite(g0)):
        raise ContractError("initial state must be finite")
    times = np.asarray(times, dtype=np.float64)
    _check_times(times)
    f = _rhs_of(model)
    if g0.ndim == 1:
        path = rk4_path(f, g0[None, :], times, n_sub)
        return np.stack([y[0] for y in path])
    return np.stack(rk4_path(f, g0, times, n_sub))


def _predict(f, states, times, n_sub):
    return rk4_path(f, states[:, 0, :], times, n_sub)


def data_loss(f, dataset: TrajectoryDataset, n_sub: int = DEFAULT_N_SUB):
    """Mean squared error over trajectories, non-initial times and genes."""
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    if dataset.times.size < 2:
        raise ContractError("dataset needs at least two time points")
    path = _predict(f, dataset.states, dataset.times, n_sub)
    total = None
    for t in range(1, dataset.times.size):
        sq = ag.sum_all(ag.square(path[t] - dataset.states[:, t, :]))
        total = sq if total is None else total + sq
    n, T, k = dataset.states.shape
    return total * (1.0 / (n * (T - 1) * k))


def trajectory_mse(model, dataset: TrajectoryDataset, n_sub: int = DEFAULT_N_SUB) -> float:
    return float(data_loss(_rhs_of(model), dataset, n_sub))


def prior_loss(f, prior_adjacency, dataset: TrajectoryDataset):
    """Mean squared difference between the linear prior model ``A g - g`` and ``f(g)``."""
    a = np.asarray(prior_adjacency, dtype=np.float64)
    k = dataset.k
    if a.shape != (k, k):
        raise ShapeError(f"prior adjacency must be {k}x{k}, got {a.shape}")
    g = dataset.states.reshape(-1, k)
    target = g @ a.T - g
    return ag.mean_all(ag.square(f(g) - target))


def combined_loss(f, prior_adjacency, dataset, tau: float, n_sub: int = DEFAULT_N_SUB):
    """tau * data MSE + (1 - tau) * prior-model mismatch."""
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    if tau == 1.0:
        return data_loss(f, dataset, n_sub)
    if tau == 0.0:
        return prior_loss(f, prior_adjacency, dataset)
    return data_loss(f, dataset, n_sub) * tau + prior_loss(f, prior_adjacency, dataset) * (1.0 - tau)


def pinn_penalty(model, prior_adjacency, dataset: TrajectoryDataset, tau: float, n_sub: int = DEFAULT_N_SUB) -> float:
    return float(combined_loss(_rhs_of(model), prior_adjacency, dataset, tau, n_sub))


# -- trajectory CSV ------------------------------------------------------------


def write_trajectories_csv(dataset: TrajectoryDataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj", "time", *dataset.gene_names])
        for tid, states in zip(dataset.traj_ids, dataset.states):
            for t, row in zip(dataset.times, states):
                w.writerow([tid, repr(float(t)), *(repr(float(x)) for x in row)])
    return path


def read_trajectories_csv(path, split: str | None = None) -> TrajectoryDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["traj", "time"] or len(header) < 3:
            raise ContractError(f"{path}: expected header 'traj,time,<genes...>'")
        genes = header[2:]
        rows: dict[str, list] = {}
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                raise ContractError(f"{path}: row has {len(line)} fields, expected {len(header)}")
            rows.setdefault(line[0], []).append([float(x) for x in line[1:]])
    if not rows:
        raise ContractError(f"{path}: no trajectories")
    trajs = [Trajectory(np.array(r)[:, 0], np.array(r)[:, 1:]) for r in rows.values()]
    return TrajectoryDataset.from_trajectories(
        trajs, genes, split=split or path.stem, traj_ids=list(rows.keys())
    )
