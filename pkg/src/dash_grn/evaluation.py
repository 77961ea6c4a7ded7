"""GRN extraction, structural metrics and influence / pathway analyses."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError
from .odeint import integrate
from .training import model_sparsity

log = logging.getLogger(__name__)


@dataclass
class DynamicsMatrix:
    """Row-normalized contribution of gene j (column) to the rate of gene i (row)."""

    D: np.ndarray
    gene_names: list[str]

    def edges(self, threshold: float = 0.0):
        """``(source, target, weight)`` for every entry with ``|weight| > threshold``."""
        rows, cols = np.nonzero(np.abs(self.D) > threshold)
        return [(self.gene_names[j], self.gene_names[i], float(self.D[i, j])) for i, j in zip(rows, cols)]


@dataclass
class PathwayScore:
    name: str
    score: float
    null_mean: float
    null_var: float
    p_value: float
    z: float
    n_genes: int
    degenerate: bool = False
    bonferroni: bool = False  # p below alpha / number of scored pathways


def extract_grn(p) -> DynamicsMatrix:
    """D = [U_sigma | U_pi] [W_sigma; W_pi], rows scaled by upsilon then abs-normalized.

    Rows whose normalizer is zero (e.g. steady-state genes) stay all-zero.
    """
    if p.kind == "phoenix":
        D = p.effective("u_sigma") @ p.effective("w_sigma") + p.effective("u_pi") @ p.effective("w_pi")
        D = p.upsilon[:, None] * D
    else:
        D = p.effective("w2") @ p.effective("w1")
    denom = np.abs(D).sum(axis=1, keepdims=True)
    out = np.divide(D, denom, out=np.zeros_like(D), where=denom > 0)
    return DynamicsMatrix(out, list(p.gene_names))


def _support(x, threshold=0.0):
    return np.abs(np.asarray(x, dtype=np.float64)) > threshold


def confusion(pred, ref, threshold: float = 0.0) -> dict[str, int]:
    pred = _support(pred, threshold)
    ref = _support(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    off = ~np.eye(ref.shape[0], ref.shape[1], dtype=bool)
    return {
        "tp": int(np.sum(pred & ref & off)),
        "fp": int(np.sum(pred & ~ref & off)),
        "fn": int(np.sum(~pred & ref & off)),
        "tn": int(np.sum(~pred & ~ref & off)),
    }


def balanced_accuracy(pred, ref, threshold: float = 0.0) -> float:
    """(TPR + TNR) / 2 over off-diagonal positions, in percent."""
    if isinstance(pred, DynamicsMatrix):
        pred = pred.D
    c = confusion(pred, ref, threshold)
    pos, neg = c["tp"] + c["fn"], c["tn"] + c["fp"]
    if pos == 0 or neg == 0:
        raise ContractError("reference network needs both edges and non-edges off the diagonal")
    return 100.0 * 0.5 * (c["tp"] / pos + c["tn"] / neg)


def sparsity(p) -> float:
    """Percentage of masked weight-matrix entries."""
    return 100.0 * model_sparsity(p)


def out_degree_stats(D, threshold: float = 0.0) -> dict[str, float]:
    if isinstance(D, DynamicsMatrix):
        D = D.D
    deg = _support(D, threshold).sum(axis=0)
    return {"mean": float(deg.mean()) if deg.size else 0.0, "max": int(deg.max()) if deg.size else 0}


def gene_influence(p, times=(0.0, 2.0, 3.0, 7.0, 9.0), n_init: int = 200, delta: float = 0.25, seed: int = 0,
                   n_sub: int = 20) -> np.ndarray:
    """Mean absolute change in other genes' predictions after perturbing one initial value.

    Gene j's initial value becomes ``clip(g_j + delta, 0, 1)``; the difference is
    summed over other genes and non-initial times, divided by ``k`` and ``|T|``,
    and averaged over ``n_init`` uniform initial states.
    """
    times = np.asarray(times, dtype=np.float64)
    k = p.k
    g0 = np.random.default_rng(seed).uniform(0.0, 1.0, (n_init, k))
    base = integrate(p, g0, times, n_sub)  # (T, n, k)
    scores = np.zeros(k)
    if delta == 0:
        return scores
    for j in range(k):
        pert = g0.copy()
        pert[:, j] = np.clip(pert[:, j] + delta, 0.0, 1.0)
        moved = integrate(p, pert, times, n_sub)
        diff = np.abs(moved[1:] - base[1:])
        diff[:, :, j] = 0.0
        scores[j] = diff.sum(axis=2).mean(axis=1).sum() / (k * times.size)
    return scores


def pathway_scores(influences, gene_names, gene_sets: dict[str, list[str]], Q: int = 1000,
                   seed: int = 0, alpha: float = 0.05) -> list[PathwayScore]:
    """Permutation z-scores of summed gene influence per pathway.

    The null permutes influence scores across all genes ``Q`` times. A null
    with zero variance yields ``z = 0`` and ``degenerate = True``.
    """
    if Q < 1:
        raise ContractError("Q must be >= 1")
    influences = np.asarray(influences, dtype=np.float64)
    if influences.shape != (len(gene_names),):
        raise ShapeError("one influence score per gene required")
    index = {g: i for i, g in enumerate(gene_names)}
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(influences) for _ in range(Q)])  # (Q, n_genes)
    out = []
    for name, genes in gene_sets.items():
        idx = sorted({index[g] for g in genes if g in index})
        missing = len(set(genes)) - len(idx)
        if missing:
            log.info("pathway %s: %d genes not in the model", name, missing)
        if not idx:
            log.warning("pathway %s has no resolvable genes; skipped", name)
            continue
        ps = float(influences[idx].sum())
        null = perms[:, idx].sum(axis=1)
        mu, var = float(null.mean()), float(null.var())
        p_value = float(np.mean(null > ps))
        degenerate = var <= 1e-24 * max(1.0, mu * mu)
        z = 0.0 if degenerate else (ps - mu) / np.sqrt(var)
        out.append(PathwayScore(name, ps, mu, var, p_value, float(z), len(idx), degenerate))
    for score in out:
        score.bonferroni = score.p_value < alpha / len(out)
    return out


# -- file formats ---------------------------------------------------------------


def read_gmt(path) -> dict[str, list[str]]:
    """GMT: ``name<TAB>description<TAB>gene...`` per line."""
    sets = {}
    with Path(path).open() as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2 or not parts[0]:
                continue
            sets[parts[0]] = [g for g in parts[2:] if g]
    return sets


def write_gmt(gene_sets: dict[str, list[str]], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for name, genes in gene_sets.items():
            fh.write("\t".join([name, "na", *genes]) + "\n")
    return path


def read_edge_tsv(path, gene_names) -> np.ndarray:
    """``source<TAB>target<TAB>weight`` lines as a matrix ``M[target, source]``."""
    index = {g: i for i, g in enumerate(gene_names)}
    M = np.zeros((len(gene_names), len(gene_names)))
    unresolved = 0
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if parts[0] == "source" and len(parts) > 1 and parts[1] == "target":
                continue
            if len(parts) < 2:
                raise ContractError(f"{path}: malformed edge line {line!r}")
            src, tgt = parts[0], parts[1]
            try:
                w = float(parts[2]) if len(parts) > 2 else 1.0
            except ValueError:
                raise ContractError(f"{path}: bad weight in line {line!r}") from None
            if src not in index or tgt not in index:
                unresolved += 1
                continue
            M[index[tgt], index[src]] = w
    if unresolved:
        log.warning("%s: %d edges reference unknown genes", path, unresolved)
    return M


def write_edge_tsv(M, gene_names, path, threshold: float = 0.0) -> Path:
    path = Path(path)
    M = np.asarray(M, dtype=np.float64)
    with path.open("w") as fh:
        fh.write("source\ttarget\tweight\n")
        for j in range(M.shape[1]):
            for i in range(M.shape[0]):
                if abs(M[i, j]) > threshold:
                    fh.write(f"{gene_names[j]}\t{gene_names[i]}\t{float(M[i, j])!r}\n")
    return path


def write_pathway_csv(scores: list[PathwayScore], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "PS", "p", "z"])
        for s in scores:
            w.writerow([s.name, repr(s.score), repr(s.p_value), repr(s.z)])
    return path


def evaluate(p, reference=None, threshold: float = 0.0, test=None, n_sub: int = 20) -> dict:
    """Metrics dictionary for one trained model."""
    from .odeint import trajectory_mse

    grn = extract_grn(p)
    report = {"sparsity": sparsity(p), "out_degree": out_degree_stats(grn, threshold)}
    if reference is not None:
        report["balanced_accuracy"] = balanced_accuracy(grn.D, reference, threshold)
        report["confusion"] = confusion(grn.D, reference, threshold)
    if test is not None:
        report["test_mse"] = trajectory_mse(p, test, n_sub)
    return report
