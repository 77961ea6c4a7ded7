"""Synthetic regulatory systems, noisy trajectories and (corrupted) priors.

Ground-truth kinetics: for gene i with in-degree d_i and regulators j,

    dg_i/dt = gamma * (sigmoid(gain * sum_j A_ij * (2 h(g_j) - 1) / max(d_i, 1)) - g_i)
    h(x)    = x^n / (0.5^n + x^n)

so an unregulated gene relaxes exponentially to 0.5 and expression stays in
(0, 1) with mean close to 0.5. Averaging over regulators keeps heavily
regulated genes out of saturation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, DivergenceError
from .odeint import TrajectoryDataset, rk4_path

log = logging.getLogger(__name__)

DEFAULT_TIMES = (0.0, 2.0, 3.0, 7.0, 9.0)


@dataclass
class GroundTruthNetwork:
    """``A[i, j] != 0`` means gene j regulates gene i (+1 activates, -1 represses)."""

    gene_names: list[str]
    A: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        k = len(self.gene_names)
        if self.A.shape != (k, k):
            raise ContractError(f"adjacency must be {k}x{k}, got {self.A.shape}")
        if not np.all(np.isin(self.A, (-1.0, 0.0, 1.0))):
            raise ContractError("adjacency entries must be in {-1, 0, 1}")

    @property
    def k(self) -> int:
        return len(self.gene_names)

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(self.A))

    @property
    def density(self) -> float:
        return self.n_edges / self.A.size


@dataclass
class PriorKnowledge:
    """Input-output prior ``P`` (r x k) and input-input prior ``C`` (k x k)."""

    P: np.ndarray
    C: np.ndarray
    sigma_pct: float = 0.0

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim != 2 or self.C.shape[0] != self.C.shape[1]:
            raise ContractError(f"C must be square, got {self.C.shape}")
        if self.P.ndim != 2 or self.P.shape[1] != self.C.shape[0]:
            raise ContractError(f"P shape {self.P.shape} inconsistent with C shape {self.C.shape}")
        if np.any(self.P < 0) or np.any(self.C < 0):
            raise ContractError("prior entries must be non-negative")


def gene_names(k: int) -> list[str]:
    width = len(str(k))
    return [f"G{i + 1:0{width}d}" for i in range(k)]


def _power_law_degrees(k, mean_out_degree, rng, max_degree):
    """Out-degrees from P(d) ~ (d + 1)^-2 on {0..max_degree}, rescaled to sum to round(mean * k)."""
    support = np.arange(max_degree + 1)
    prob = (support + 1.0) ** -2.0
    raw = rng.choice(support, size=k, p=prob / prob.sum()).astype(np.float64)
    total = int(round(mean_out_degree * k))
    if raw.sum() == 0:
        raw[rng.integers(k)] = 1.0
    scaled = raw * total / raw.sum()
    deg = np.minimum(np.floor(scaled), max_degree).astype(int)
    residual = scaled - deg
    tiebreak = rng.permutation(k)
    while deg.sum() < total:
        open_ = np.flatnonzero(deg < max_degree)
        j = open_[np.lexsort((tiebreak[open_], -residual[open_]))[0]]
        deg[j] += 1
        residual[j] -= 1.0
    return deg


def generate_network(k: int, mean_out_degree: float, sign_fraction: float = 0.5, seed: int = 0,
                     allow_self_loops: bool = False, max_density: float = 1.0) -> GroundTruthNetwork:
    """Random sparse signed network with heavy-tailed (power-law) out-degrees."""
    if k < 2:
        raise ConfigurationError("need k >= 2 genes")
    if mean_out_degree < 1:
        raise ConfigurationError("mean_out_degree must be >= 1")
    if not 0.0 <= sign_fraction <= 1.0:
        raise ConfigurationError("sign_fraction must lie in [0, 1]")
    max_degree = k if allow_self_loops else k - 1
    if mean_out_degree > max_degree:
        raise ConfigurationError(f"mean out-degree {mean_out_degree} infeasible for k={k}")
    if round(mean_out_degree * k) / (k * k) > max_density + 1e-12:
        raise ConfigurationError(f"requested density exceeds maximum {max_density}")
    rng = np.random.default_rng(seed)
    deg = _power_law_degrees(k, mean_out_degree, rng, max_degree)
    A = np.zeros((k, k))
    for j in range(k):
        targets = np.arange(k) if allow_self_loops else np.delete(np.arange(k), j)
        chosen = rng.choice(targets, size=deg[j], replace=False)
        A[chosen, j] = np.where(rng.random(deg[j]) < sign_fraction, 1.0, -1.0)
    return GroundTruthNetwork(gene_names(k), A)


def hill_response(x, n: float = 2.0):
    x = np.clip(x, 0.0, None)
    xn = x ** n
    return xn / (0.5 ** n + xn)


def kinetics(A, gamma: float = 1.0, gain: float = 4.0, hill_n: float = 2.0):
    """Vectorized ground-truth right-hand side ``f(G)`` for rows of states."""
    A = np.asarray(A, dtype=np.float64)
    A = A / np.maximum(np.count_nonzero(A, axis=1), 1)[:, None]

    def f(g):
        drive = (2.0 * hill_response(g, hill_n) - 1.0) @ A.T
        return gamma * (1.0 / (1.0 + np.exp(-gain * drive)) - g)

    return f


def _traj_rng(seed, index):
    return np.random.default_rng([seed, index])


def simulate_dataset(net: GroundTruthNetwork, n_traj: int = 160, times=DEFAULT_TIMES, noise_sigma: float = 1 / 40,
                     seed: int = 0, gamma: float = 1.0, gain: float = 4.0, hill_n: float = 2.0,
                     n_sub: int = 50) -> TrajectoryDataset:
    """Noisy trajectories from Uniform(0, 1) initial states.

    Noise ``N(0, noise_sigma^2)`` is added to every non-initial observation and
    the result clipped to [0, 1]. Each trajectory draws from its own stream
    seeded by ``(seed, index)``.
    """
    times = np.asarray(times, dtype=np.float64)
    if times[0] != 0.0:
        raise ContractError("times must start at 0")
    if n_traj < 1:
        raise ContractError("n_traj must be >= 1")
    k = net.k
    f = kinetics(net.A, gamma, gain, hill_n)
    g0 = np.stack([_traj_rng(seed, i).uniform(0.0, 1.0, k) for i in range(n_traj)])
    try:
        path = rk4_path(f, g0, times, n_sub)
    except DivergenceError as exc:
        bad = [i for i in range(n_traj) if not np.all(np.isfinite(rk4_path(f, g0[i:i + 1], times, n_sub)[-1]))]
        raise DivergenceError(f"simulation diverged for trajectory {bad[:1]}", step=exc.step) from exc
    states = np.stack(path, axis=1)  # (n, T, k)
    if noise_sigma > 0:
        for i in range(n_traj):
            # discard the initial-state draw so noise stays independent of it
            rng = _traj_rng(seed, i)
            rng.uniform(0.0, 1.0, k)
            states[i, 1:] += rng.normal(0.0, noise_sigma, (times.size - 1, k))
    excursions = int(np.count_nonzero((states < 0) | (states > 1)))
    if excursions:
        log.info("clipping %d observations outside [0, 1]", excursions)
    states = np.clip(states, 0.0, 1.0)
    return TrajectoryDataset(times, states, list(net.gene_names), split="all",
                             traj_ids=[f"t{i:04d}" for i in range(n_traj)])


def corrupt_network(A, sigma_pct: float, seed: int = 0, allow_self_loops: bool = False) -> np.ndarray:
    """Relocate ``ceil(sigma% * |E|)`` random edges to random unoccupied positions.

    Moved edges keep their value; the edge count is preserved.
    """
    if not 0.0 <= sigma_pct <= 100.0:
        raise ContractError(f"sigma_pct must lie in [0, 100], got {sigma_pct}")
    A = np.asarray(A, dtype=np.float64)
    out = A.copy()
    edges = np.flatnonzero(out)
    n_move = math.ceil(sigma_pct / 100.0 * edges.size - 1e-9)
    if n_move == 0:
        return out
    rng = np.random.default_rng(seed)
    moved = rng.choice(edges, size=n_move, replace=False)
    values = out.flat[moved].copy()
    out.flat[moved] = 0.0
    k = A.shape[0]
    free = out == 0
    if not allow_self_loops:
        np.fill_diagonal(free, False)
    free_idx = np.flatnonzero(free)
    if free_idx.size < n_move:
        raise ConfigurationError("not enough free positions to relocate edges")
    dest = rng.choice(free_idx, size=n_move, replace=False)
    out.flat[dest] = values
    return out


def build_priors(A_corrupt, sigma_pct: float = 0.0, seed: int = 0) -> PriorKnowledge:
    """P = |A| (binary); C = [|A||A|^T > 0], itself corrupted at the same level."""
    P = (np.abs(np.asarray(A_corrupt, dtype=np.float64)) > 0).astype(np.float64)
    C = ((P @ P.T) > 0).astype(np.float64)
    if sigma_pct > 0:
        C = corrupt_network(C, sigma_pct, seed=seed, allow_self_loops=True)
    return PriorKnowledge(P, C, sigma_pct)


def make_priors(net: GroundTruthNetwork, sigma_pct: float = 0.0, seed: int = 0) -> PriorKnowledge:
    """Corrupt the true network, then build P and C with an independent second corruption."""
    ss = np.random.SeedSequence([seed, 7919])
    s_net, s_c = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    return build_priors(corrupt_network(net.A, sigma_pct, s_net), sigma_pct, s_c)


def split_counts(n: int, fractions=(0.88, 0.06, 0.06)) -> tuple[int, int, int]:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ContractError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    return n - n_val - n_test, n_val, n_test


def split_dataset(ds: TrajectoryDataset, fractions=(0.88, 0.06, 0.06), seed: int = 0):
    """Disjoint trajectory-level train/val/test split."""
    n_train, n_val, _ = split_counts(len(ds), fractions)
    perm = np.random.default_rng(seed).permutation(len(ds))
    parts = (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:]))
    return tuple(ds.subset(idx, split=name) for idx, name in zip(parts, ("train", "val", "test")))
