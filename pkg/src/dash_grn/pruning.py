"""DASH pruning scores, pruning schedules, mask updates and magnitude baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .linalg import matmul, pinv_left, pinv_right

log = logging.getLogger(__name__)

MP_GRID = (0.50, 0.75, 0.83, 0.87, 0.90, 0.92, 0.95, 0.97, 0.99)


@dataclass
class PruneScores:
    """First-layer scores (omega), second-layer scores (psi) and refresh count.

    ``omega`` doubles as the recurrence state for the next refresh. At
    ``epoch == 0`` omega holds the Gaussian seed and is not a valid score.
    """

    omega: dict[str, np.ndarray]
    psi: dict[str, np.ndarray]
    epoch: int = 0

    @property
    def scores(self) -> dict[str, np.ndarray]:
        return {**self.omega, **self.psi}


@dataclass
class PruneSchedule:
    """Prune events as ``(epoch, fraction of remaining weights)`` pairs."""

    events: list[tuple[int, float]] = field(default_factory=list)
    refresh_every: int | None = None

    def __post_init__(self):
        self.events = [(int(e), float(f)) for e, f in self.events]
        epochs = [e for e, _ in self.events]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ContractError("prune epochs must be strictly increasing")
        for e, f in self.events:
            if not 0.0 < f < 1.0:
                raise ContractError(f"prune fraction must lie in (0, 1), got {f} at epoch {e}")

    @classmethod
    def periodic(cls, first_epoch: int, first_fraction: float, every: int, fraction: float, max_epochs: int):
        """E.g. 70% at epoch 3, then 10% of the remainder every 10 epochs."""
        events = [(first_epoch, first_fraction)]
        if every > 0:
            events += [(e, fraction) for e in range(first_epoch + every, max_epochs + 1, every)]
        return cls(events)

    @classmethod
    def from_config(cls, d, max_epochs: int) -> "PruneSchedule":
        if d is None:
            return cls([])
        if isinstance(d, PruneSchedule):
            return d
        if "events" in d:
            return cls([tuple(e) for e in d["events"]], d.get("refresh_every"))
        return cls.periodic(d["first_epoch"], d["first_fraction"], d.get("every", 0), d.get("fraction", 0.1), max_epochs)

    def to_config(self) -> dict:
        return {"events": [list(e) for e in self.events], "refresh_every": self.refresh_every}

    def fraction_at(self, epoch: int) -> float | None:
        for e, f in self.events:
            if e == epoch:
                return f
        return None


def normalize_weights(p) -> dict[str, np.ndarray]:
    return p.normalized_weights()


def _check_priors(p, prior_p, prior_c):
    k, r = p.k, len(p.gene_names)
    if prior_c is not None and np.shape(prior_c) != (k, k):
        raise ConfigurationError(f"C must be {k}x{k}, got {np.shape(prior_c)}")
    if prior_p is not None and np.shape(prior_p) != (r, k):
        raise ConfigurationError(f"P must be {r}x{k}, got {np.shape(prior_p)}")


def _blend(lam, normalized, prior_term):
    if lam == 0.0:
        return normalized.copy()
    if lam == 1.0:
        return np.abs(prior_term())
    return (1.0 - lam) * normalized + lam * np.abs(prior_term())


def _priors(priors):
    if priors is None:
        return None, None
    return np.abs(np.asarray(priors.P, dtype=np.float64)), np.abs(np.asarray(priors.C, dtype=np.float64))


def dash_scores(p, prev: PruneScores | None, priors, lambda1: float, lambda2: float, epoch: int,
                rng: np.random.Generator | None = None) -> PruneScores:
    """One refresh of the DASH score recurrence for a two-layer model.

    At ``epoch == 0`` the first-layer scores are seeded from a standard
    Gaussian. Afterwards, per branch::

        omega = (1 - l1) |W~| + l1 |pinv_left(omega_prev^T) C|
        psi   = (1 - l2) |U~| + l2 |P pinv_right(omega)|
    """
    for lam in (lambda1, lambda2):
        if not 0.0 <= lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    prior_p, prior_c = _priors(priors)
    if (lambda1 > 0 or lambda2 > 0) and priors is None:
        raise ConfigurationError("priors are required when lambda > 0")
    _check_priors(p, prior_p, prior_c)
    normed = p.normalized_weights()

    omega = {}
    for first, _ in p.branches:
        if epoch == 0:
            rng = np.random.default_rng() if rng is None else rng
            omega[first] = rng.standard_normal(normed[first].shape)
        else:
            if prev is None:
                raise ContractError("previous scores are required for epoch > 0")
            prev_omega = prev.omega[first]
            omega[first] = _blend(lambda1, normed[first], lambda: matmul(pinv_left(prev_omega.T), prior_c))
    psi = {}
    for first, second in p.branches:
        om = omega[first]
        psi[second] = _blend(lambda2, normed[second], lambda: matmul(prior_p, pinv_right(om)))
    return PruneScores(omega, psi, epoch)


def _gaussian_seed(p, rng):
    rng = np.random.default_rng() if rng is None else rng
    return {first: rng.standard_normal(getattr(p, first).shape) for first, _ in p.branches}


def magnitude_scores(p, prev=None, priors=None, epoch: int = 1, rng=None) -> PruneScores:
    """Iterative magnitude pruning: scores are the normalized weights."""
    normed = p.normalized_weights()
    if epoch == 0:
        return PruneScores(_gaussian_seed(p, rng), {s: normed[s] for _, s in p.branches}, 0)
    return PruneScores({f: normed[f] for f, _ in p.branches}, {s: normed[s] for _, s in p.branches}, epoch)


def bioprune_scores(p, prev, priors, epoch: int, rng=None) -> PruneScores:
    """Prior-only scores; weights enter only through the shapes."""
    if priors is None:
        raise ConfigurationError("BioPrune requires priors")
    prior_p, prior_c = _priors(priors)
    _check_priors(p, prior_p, prior_c)
    if epoch == 0:
        omega = _gaussian_seed(p, rng)
    else:
        if prev is None:
            raise ContractError("previous scores are required for epoch > 0")
        omega = {f: np.abs(matmul(pinv_left(prev.omega[f].T), prior_c)) for f, _ in p.branches}
    psi = {s: np.abs(matmul(prior_p, pinv_right(omega[f]))) for f, s in p.branches}
    return PruneScores(omega, psi, epoch)


def _normalize_abs(w):
    a = np.abs(np.asarray(w, dtype=np.float64))
    s = a.sum()
    return a / s if s > 0 else np.full(a.shape, 1.0 / a.size)


def _chain(mats, n_cols):
    """Product ``mats[-1] @ ... @ mats[0]``; identity of size n_cols when empty."""
    out = np.eye(n_cols)
    for m in mats:
        out = matmul(m, out)
    return out


def dash_scores_general(weights, prev, prior_p, lambdas) -> list[np.ndarray]:
    """DASH scores for an L-layer chain ``W_L ... W_1`` against an output x input prior.

    Layers are refreshed top-down with all other layers' scores held fixed;
    layers below ``l`` use ``prev`` and layers above use the fresh values.
    """
    weights = [np.asarray(w, dtype=np.float64) for w in weights]
    L = len(weights)
    if L < 2:
        raise ConfigurationError("need at least two layers")
    if len(lambdas) != L or len(prev) != L:
        raise ConfigurationError("one lambda and one previous score matrix per layer")
    for lo, hi in zip(weights, weights[1:]):
        if hi.shape[1] != lo.shape[0]:
            raise ConfigurationError(f"incompatible chain shapes {lo.shape} -> {hi.shape}")
    for w, s in zip(weights, prev):
        if np.shape(s) != w.shape:
            raise ConfigurationError(f"score shape {np.shape(s)} does not match weight {w.shape}")
    prior = np.abs(np.asarray(prior_p, dtype=np.float64))
    n_in, n_out = weights[0].shape[1], weights[-1].shape[0]
    if prior.shape != (n_out, n_in):
        raise ConfigurationError(f"P must be {n_out}x{n_in}, got {prior.shape}")

    scores = [np.asarray(s, dtype=np.float64) for s in prev]
    for l in range(L - 1, -1, -1):
        below = scores[:l]
        above = scores[l + 1:]

        def prior_term(below=below, above=above, l=l):
            term = prior
            if above:
                term = matmul(pinv_left(_chain(above, weights[l].shape[0])), term)
            if below:
                term = matmul(term, pinv_right(_chain(below, n_in)))
            return term

        scores[l] = _blend(lambdas[l], _normalize_abs(weights[l]), prior_term)
    return scores


def prune_count(n_unmasked: int, fraction: float) -> int:
    return int(math.floor(fraction * n_unmasked + 1e-9))


def apply_prune(p, scores: dict[str, np.ndarray], fraction: float) -> dict[str, np.ndarray]:
    """New masks: per matrix, mask the lowest-scoring ``fraction`` of unmasked entries.

    Ties go to the lower row-major index. Masks never regain ones.
    """
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"fraction must lie in (0, 1), got {fraction}")
    new_masks = {}
    for name in p.weight_names:
        mask = p.masks[name].copy()
        flat = mask.ravel()
        alive = np.flatnonzero(flat > 0)
        if alive.size == 0:
            log.warning("no unmasked entries left in %s; prune skipped", name)
            new_masks[name] = mask
            continue
        score = np.asarray(scores[name], dtype=np.float64).ravel()[alive]
        if not np.all(np.isfinite(score)):
            raise ContractError(f"non-finite pruning scores for {name}")
        n = prune_count(alive.size, fraction)
        order = np.argsort(score, kind="stable")
        flat[alive[order[:n]]] = 0.0
        new_masks[name] = flat.reshape(mask.shape)
    return new_masks


def magnitude_masks(p, fraction: float) -> dict[str, np.ndarray]:
    """Masks pruning the lowest-normalized-magnitude ``fraction`` of each matrix."""
    return apply_prune(p, p.normalized_weights(), fraction)


def one_se_select(grid, val_mse) -> tuple[int, np.ndarray, np.ndarray]:
    """Index of the sparsest grid point within one standard error of the best mean.

    ``val_mse`` has shape ``(repeats, len(grid))``. Returns ``(index, mean, se)``.
    """
    grid = list(grid)
    if not grid:
        raise ContractError("grid must be non-empty")
    v = np.atleast_2d(np.asarray(val_mse, dtype=np.float64))
    if v.shape[1] != len(grid):
        raise ContractError("val_mse must have one column per grid value")
    mean = v.mean(axis=0)
    se = v.std(axis=0, ddof=1) / np.sqrt(v.shape[0]) if v.shape[0] > 1 else np.zeros(len(grid))
    best = int(np.argmin(mean))
    ok = [i for i in range(len(grid)) if mean[i] <= mean[best] + se[best]]
    return max(ok, key=lambda i: (grid[i], i)), mean, se


@dataclass
class PosthocResult:
    selected: float
    index: int
    val_mse: np.ndarray  # (repeats, grid)
    mean: np.ndarray
    se: np.ndarray
    model: object  # fine-tuned model at the selected p (best repeat)


def posthoc_magnitude_prune(models, datasets, config, grid=MP_GRID, priors=None) -> PosthocResult:
    """Post-hoc magnitude pruning + fine-tuning with 1-SE selection over ``grid``.

    ``models`` holds one trained dense model per repeat. Each is pruned at every
    grid value and fine-tuned with frozen masks using ``config`` (its schedule
    is ignored).
    """
    from dataclasses import replace

    from .training import train

    grid = list(grid)
    if not grid:
        raise ContractError("grid must be non-empty")
    models = list(models)
    if not models:
        raise ContractError("at least one trained model required")
    ft_config = replace(config, schedule=PruneSchedule([]), lambda1=0.0, lambda2=0.0)
    val = np.zeros((len(models), len(grid)))
    tuned = [[None] * len(grid) for _ in models]
    for r, dense in enumerate(models):
        for j, frac in enumerate(grid):
            pruned = dense.copy()
            pruned.masks = magnitude_masks(dense, frac)
            result = train(pruned, datasets, priors, replace(ft_config, seed=ft_config.seed + r))
            val[r, j] = result.best_val
            tuned[r][j] = result.model
    idx, mean, se = one_se_select(grid, val)
    best_r = int(np.argmin(val[:, idx]))
    return PosthocResult(grid[idx], idx, val, mean, se, tuned[best_r][idx])
