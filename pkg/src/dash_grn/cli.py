"""Command-line harness: ``dash-grn simulate | train | evaluate | cv``.

Every command writes a ``manifest.json`` next to its outputs with the resolved
configuration, the seeds handed to each component, SHA-256 digests of inputs
and outputs, and wall-clock timings.

Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from xml.sax.saxutils import escape

import click
import numpy as np

from . import evaluation as ev
from . import model as mdl
from . import odeint
from . import pruning
from . import simulator as sim
from . import training as tr
from .errors import ConfigurationError, ContractError, DivergenceError, ShapeError

log = logging.getLogger("dash_grn")

METHODS = ("dash", "bioprune", "imp", "mp-posthoc", "pinn", "none")
SEED_PURPOSES = ("network", "trajectories", "split", "priors", "init", "train", "influence", "permutation")
PINN_DEFAULT_TAU = 0.5


class NumericalFailure(click.ClickException):
    exit_code = 1


def derive_seeds(seed: int) -> dict[str, int]:
    """One independent child seed per purpose, all derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(SEED_PURPOSES))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(SEED_PURPOSES, children)}


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")
    return path


# -- configuration ---------------------------------------------------------------


@dataclass
class SimulationConfig:
    k: int = 50
    mean_out_degree: float = 3.0
    sign_fraction: float = 0.5
    n_traj: int = 160
    times: list = field(default_factory=lambda: list(sim.DEFAULT_TIMES))
    noise_sigma: float = 1 / 40
    prior_corruption: float = 0.0
    fractions: list = field(default_factory=lambda: [0.88, 0.06, 0.06])
    gamma: float = 1.0
    gain: float = 4.0
    hill_n: float = 2.0
    n_sub: int = 50


@dataclass
class ModelConfig:
    kind: str = "phoenix"
    hidden: int | None = None
    output_scale: float = 1.0


@dataclass
class RunConfig:
    simulate: SimulationConfig = field(default_factory=SimulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)
    lambda_grid: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    folds: int | None = None
    posthoc_repeats: int = 3
    posthoc_grid: list = field(default_factory=lambda: list(pruning.MP_GRID))

    def train_config(self, **overrides) -> tr.TrainConfig:
        d = dict(self.train)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return tr.TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def _section(cls, d, name):
    d = d or {}
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in '{name}': {sorted(unknown)}")
    return cls(**d)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"{path}: unknown top-level keys {sorted(unknown)}")
    cfg = RunConfig(
        simulate=_section(SimulationConfig, raw.get("simulate"), "simulate"),
        model=_section(ModelConfig, raw.get("model"), "model"),
        train=dict(raw.get("train") or {}),
        **{k: raw[k] for k in ("lambda_grid", "folds", "posthoc_repeats", "posthoc_grid") if k in raw},
    )
    tr.TrainConfig.from_dict(cfg.train)  # validate early
    return cfg


def resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return threads
    env = os.environ.get("DASH_GRN_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigurationError(f"DASH_GRN_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigurationError("DASH_GRN_THREADS must be >= 1")
    return n


class Manifest:
    def __init__(self, command: str, config: dict, seed: int, out: Path):
        self.command = command
        self.config = config
        self.seed = seed
        self.seeds = derive_seeds(seed)
        self.out = out
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def add_input(self, path):
        self.inputs[str(path)] = sha256(path)

    def add_output(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def timed(self, name):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                manifest.timings[name] = round(time.perf_counter() - self.t, 6)

        return _Timer()

    def run_id(self) -> str:
        blob = json.dumps([self.command, self.config, self.seed, sorted(self.inputs.items())],
                          sort_keys=True, default=_json_default)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def write(self, extra: dict | None = None) -> Path:
        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        doc = {
            "run_id": self.run_id(),
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {p.name: sha256(p) for p in self.outputs},
            "timings": self.timings,
        }
        if extra:
            doc.update(extra)
        return write_json(doc, self.out / "manifest.json")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise click.FileError(str(out), hint=str(exc)) from None
    if not os.access(out, os.W_OK):
        raise click.FileError(str(out), hint="directory is not writable")
    return out


def handle_errors(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (DivergenceError, FloatingPointError) as exc:
            raise NumericalFailure(str(exc)) from None
        except (ConfigurationError, ContractError, ShapeError, OSError) as exc:
            raise click.UsageError(str(exc)) from None

    return wrapper


# -- SVG scatter -------------------------------------------------------------------


def scatter_svg(points, width: int = 480, height: int = 360) -> str:
    """Static sparsity (x) versus balanced accuracy (y) scatter, one labelled point each."""
    left, right, top, bottom = 60, 20, 20, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + pw * v / 100.0

    def sy(v):
        return top + ph * (1.0 - v / 100.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for tick in range(0, 101, 20):
        parts.append(f'<text x="{sx(tick):.1f}" y="{top + ph + 15}" text-anchor="middle">{tick}</text>')
        parts.append(f'<text x="{left - 6}" y="{sy(tick) + 4:.1f}" text-anchor="end">{tick}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">sparsity (%)</text>')
    parts.append(f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {top + ph / 2:.1f})">balanced accuracy (%)</text>')
    for label, x, y in points:
        cx, cy = sx(min(max(x, 0.0), 100.0)), sy(min(max(y, 0.0), 100.0))
        parts.append(f'<circle class="point" cx="{cx:.1f}" cy="{cy:.1f}" r="4" fill="#1f77b4"/>')
        parts.append(f'<text class="label" x="{cx + 6:.1f}" y="{cy - 6:.1f}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- data loading ------------------------------------------------------------------


def _load_data(data_dir, train_csv, val_csv):
    data_dir = Path(data_dir) if data_dir else None
    train_csv = Path(train_csv) if train_csv else (data_dir / "train.csv" if data_dir else None)
    val_csv = Path(val_csv) if val_csv else (data_dir / "val.csv" if data_dir else None)
    if train_csv is None or val_csv is None:
        raise click.UsageError("give --data DIR or both --train and --val")
    for p in (train_csv, val_csv):
        if not p.is_file():
            raise click.UsageError(f"missing data file: {p}")
    return train_csv, val_csv


def _load_priors(data_dir, prior_p, prior_c, gene_names):
    data_dir = Path(data_dir) if data_dir else None
    prior_p = Path(prior_p) if prior_p else (data_dir / "prior_P.tsv" if data_dir else None)
    prior_c = Path(prior_c) if prior_c else (data_dir / "prior_C.tsv" if data_dir else None)
    if prior_p is None or not prior_p.is_file():
        return None, []
    P = np.abs(ev.read_edge_tsv(prior_p, gene_names))
    paths = [prior_p]
    if prior_c is not None and prior_c.is_file():
        C = np.abs(ev.read_edge_tsv(prior_c, gene_names))
        paths.append(prior_c)
    else:
        C = ((P @ P.T) > 0).astype(np.float64)
    return sim.PriorKnowledge(P, C), paths


def _method_overrides(method, lambda1, lambda2, tau):
    """TrainConfig overrides implied by ``--method``."""
    if method == "dash":
        return dict(method="dash", lambda1=lambda1, lambda2=lambda2, tau=tau)
    if method == "bioprune":
        return dict(method="bioprune", tau=tau)
    if method == "imp":
        return dict(method="imp", tau=tau)
    if method == "pinn":
        return dict(method="dash", lambda1=0.0, lambda2=0.0, tau=PINN_DEFAULT_TAU if tau is None else tau,
                    schedule={"events": []})
    # "none" and the dense phase of "mp-posthoc"
    return dict(method="dash", lambda1=0.0, lambda2=0.0, tau=tau, schedule={"events": []})


# -- commands ----------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
@click.version_option(package_name="artifact")
def main(verbose):
    """Prior-guided pruning of neural-ODE gene regulatory models."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="JSON run configuration.")
seed_option = click.option("--seed", type=int, default=0, show_default=True, help="Root seed for the run.")
out_option = click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
                          help="Output directory (created if needed).")
threads_option = click.option("--threads", type=click.IntRange(min=1), default=None,
                              help="Worker processes (default: $DASH_GRN_THREADS or 1).")


@main.command()
@config_option
@seed_option
@out_option
@click.option("--k", type=int, help="Number of genes.")
@click.option("--n-traj", type=int, help="Number of trajectories.")
@click.option("--noise", type=float, help="Observation noise standard deviation.")
@click.option("--prior-corruption", type=float, help="Percentage of prior edges relocated.")
@handle_errors
def simulate(config_path, seed, out_dir, k, n_traj, noise, prior_corruption):
    """Generate a ground-truth network, noisy trajectories and priors."""
    cfg = load_config(config_path)
    overrides = {"k": k, "n_traj": n_traj, "noise_sigma": noise, "prior_corruption": prior_corruption}
    sc = replace(cfg.simulate, **{key: v for key, v in overrides.items() if v is not None})
    out = _out_dir(out_dir)
    manifest = Manifest("simulate", asdict(sc), seed, out)
    if config_path:
        manifest.add_input(config_path)
    seeds = manifest.seeds
    with manifest.timed("network"):
        net = sim.generate_network(sc.k, sc.mean_out_degree, sc.sign_fraction, seed=seeds["network"])
    with manifest.timed("trajectories"):
        ds = sim.simulate_dataset(net, sc.n_traj, sc.times, sc.noise_sigma, seed=seeds["trajectories"],
                                  gamma=sc.gamma, gain=sc.gain, hill_n=sc.hill_n, n_sub=sc.n_sub)
    parts = sim.split_dataset(ds, tuple(sc.fractions), seed=seeds["split"])
    priors = sim.make_priors(net, sc.prior_corruption, seed=seeds["priors"])
    with manifest.timed("write"):
        for part in parts:
            manifest.add_output(odeint.write_trajectories_csv(part, out / f"{part.split}.csv"))
        manifest.add_output(ev.write_edge_tsv(net.A, net.gene_names, out / "network.tsv"))
        manifest.add_output(ev.write_edge_tsv(priors.P, net.gene_names, out / "prior_P.tsv"))
        manifest.add_output(ev.write_edge_tsv(priors.C, net.gene_names, out / "prior_C.tsv"))
    manifest.write({"split": {p.split: len(p) for p in parts}, "n_edges": net.n_edges})
    click.echo(f"wrote {len(ds)} trajectories ({', '.join(f'{p.split}={len(p)}' for p in parts)}) to {out}")


@main.command()
@config_option
@seed_option
@out_option
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              help="Directory with train.csv, val.csv and optional prior_P.tsv / prior_C.tsv.")
@click.option("--train", "train_csv", type=click.Path(exists=True, dir_okay=False), help="Training CSV.")
@click.option("--val", "val_csv", type=click.Path(exists=True, dir_okay=False), help="Validation CSV.")
@click.option("--prior-p", type=click.Path(exists=True, dir_okay=False), help="Input-output prior TSV.")
@click.option("--prior-c", type=click.Path(exists=True, dir_okay=False), help="Input-input prior TSV.")
@click.option("--method", type=click.Choice(METHODS), default="dash", show_default=True)
@click.option("--lambda1", type=click.FloatRange(0, 1), default=None, help="First-layer prior weight.")
@click.option("--lambda2", type=click.FloatRange(0, 1), default=None, help="Second-layer prior weight.")
@click.option("--tau", type=click.FloatRange(0, 1), default=None, help="Data-loss weight (1 disables prior loss).")
@threads_option
@handle_errors
def train(config_path, seed, out_dir, data_dir, train_csv, val_csv, prior_p, prior_c, method, lambda1, lambda2,
          tau, threads):
    """Train (and prune) one model; writes checkpoint.json and history.csv."""
    cfg = load_config(config_path)
    resolve_threads(threads)
    out = _out_dir(out_dir)
    train_csv, val_csv = _load_data(data_dir, train_csv, val_csv)
    train_ds = odeint.read_trajectories_csv(train_csv, "train")
    val_ds = odeint.read_trajectories_csv(val_csv, "val")
    if train_ds.gene_names != val_ds.gene_names:
        raise ContractError("train and validation files list different genes")
    priors, prior_paths = _load_priors(data_dir, prior_p, prior_c, train_ds.gene_names)

    seeds = derive_seeds(seed)
    tc = cfg.train_config(seed=seeds["train"], **_method_overrides(method, lambda1, lambda2, tau))
    manifest = Manifest("train", {"run": cfg.to_dict(), "method": method, "train": tc.to_dict()}, seed, out)
    for p in ([config_path] if config_path else []) + [train_csv, val_csv] + prior_paths:
        manifest.add_input(p)

    m0 = mdl.init_model(cfg.model.kind, train_ds.k, cfg.model.hidden, seed=seeds["init"],
                        gene_names=train_ds.gene_names,
                        **({"output_scale": cfg.model.output_scale} if cfg.model.kind == "phoenix" else {}))
    with manifest.timed("train"):
        result = tr.train(m0, (train_ds, val_ds), priors, tc)
    extra = {}
    if method == "mp-posthoc" and not result.diverged:
        with manifest.timed("posthoc"):
            dense = [result.model]
            for r in range(1, cfg.posthoc_repeats):
                dense.append(tr.train(m0, (train_ds, val_ds), priors, replace(tc, seed=tc.seed + r)).model)
            ph = pruning.posthoc_magnitude_prune(dense, (train_ds, val_ds), tc, cfg.posthoc_grid)
        result = replace(result, model=ph.model, best_val=float(ph.mean[ph.index]))
        extra["posthoc"] = {"grid": list(cfg.posthoc_grid), "selected": ph.selected,
                            "mean_val_mse": ph.mean, "se": ph.se}

    meta = {"method": method, "seed": seed, "best_epoch": result.best_epoch, "best_val_mse": result.best_val,
            "stop_reason": result.stop_reason, "sparsity": ev.sparsity(result.model)}
    manifest.add_output(mdl.save_checkpoint(result.model, out / "checkpoint.json", meta))
    manifest.add_output(result.history.write_csv(out / "history.csv"))
    manifest.write({"result": meta, **extra})
    if result.diverged:
        raise NumericalFailure(f"training diverged after {len(result.history)} epochs; best snapshot saved")
    click.echo(f"{method}: best val MSE {result.best_val:.4g} at epoch {result.best_epoch}, "
               f"sparsity {meta['sparsity']:.1f}% -> {out / 'checkpoint.json'}")


@main.command()
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@out_option
@seed_option
@click.option("--reference", type=click.Path(exists=True, dir_okay=False),
              help="Reference network TSV (source, target, weight).")
@click.option("--test", "test_csv", type=click.Path(exists=True, dir_okay=False), help="Test trajectories CSV.")
@click.option("--genesets", type=click.Path(exists=True, dir_okay=False), help="Gene sets in GMT format.")
@click.option("--threshold", type=float, default=0.0, show_default=True, help="|D~| above which an edge counts.")
@click.option("--permutations", type=int, default=1000, show_default=True, help="Pathway null size Q.")
@click.option("--n-init", type=int, default=200, show_default=True, help="Initial states for gene influence.")
@click.option("--delta", type=float, default=0.25, show_default=True, help="Influence perturbation size.")
@handle_errors
def evaluate(checkpoints, out_dir, seed, reference, test_csv, genesets, threshold, permutations, n_init, delta):
    """Score checkpoints: metrics.json, GRN TSVs, pathway CSVs and scatter.svg."""
    out = _out_dir(out_dir)
    manifest = Manifest("evaluate", {"threshold": threshold, "permutations": permutations, "n_init": n_init,
                                     "delta": delta}, seed, out)
    for p in list(checkpoints) + [x for x in (reference, test_csv, genesets) if x]:
        manifest.add_input(p)
    test = odeint.read_trajectories_csv(test_csv, "test") if test_csv else None
    sets = ev.read_gmt(genesets) if genesets else None
    reports, points, used = [], [], set()
    for path in checkpoints:
        p, meta = mdl.load_checkpoint(path)
        ref = ev.read_edge_tsv(reference, p.gene_names) if reference else None
        label = str(meta.get("method") or Path(path).stem)
        stem = label
        i = 2
        while stem in used:
            stem, i = f"{label}-{i}", i + 1
        used.add(stem)
        with manifest.timed(f"evaluate:{stem}"):
            report = ev.evaluate(p, ref, threshold, test)
        report.update({"label": stem, "checkpoint": str(path), "method": meta.get("method")})
        grn = ev.extract_grn(p)
        manifest.add_output(ev.write_edge_tsv(grn.D, grn.gene_names, out / f"{stem}.grn.tsv", threshold))
        if sets is not None:
            with manifest.timed(f"pathways:{stem}"):
                infl = ev.gene_influence(p, test.times if test is not None else sim.DEFAULT_TIMES, n_init, delta,
                                         seed=manifest.seeds["influence"])
                scores = ev.pathway_scores(infl, p.gene_names, sets, permutations, seed=manifest.seeds["permutation"])
            manifest.add_output(ev.write_pathway_csv(scores, out / f"{stem}.pathways.csv"))
            report["pathways"] = [asdict(s) for s in scores]
        reports.append(report)
        if "balanced_accuracy" in report:
            points.append((stem, report["sparsity"], report["balanced_accuracy"]))
    manifest.add_output(write_json({"models": reports}, out / "metrics.json"))
    if points:
        svg = out / "scatter.svg"
        svg.write_text(scatter_svg(points))
        manifest.add_output(svg)
    manifest.write()
    for r in reports:
        ba = r.get("balanced_accuracy")
        click.echo(f"{r['label']}: sparsity {r['sparsity']:.1f}%" + ("" if ba is None else f", BA {ba:.1f}%")
                   + ("" if "test_mse" not in r else f", test MSE {r['test_mse']:.4g}"))


@main.command()
@config_option
@seed_option
@out_option
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory with train.csv, val.csv, prior_P.tsv and prior_C.tsv.")
@click.option("--grid", type=str, default=None,
              help="Comma-separated lambda values; the grid is their Cartesian square.")
@click.option("--folds", type=int, default=None, help="K-fold CV over pooled train+val (default: fixed split).")
@threads_option
@handle_errors
def cv(config_path, seed, out_dir, data_dir, grid, folds, threads):
    """Cross-validate (lambda1, lambda2) for DASH and report the best cell."""
    cfg = load_config(config_path)
    n_threads = resolve_threads(threads)
    out = _out_dir(out_dir)
    train_csv, val_csv = _load_data(data_dir, None, None)
    train_ds = odeint.read_trajectories_csv(train_csv, "train")
    val_ds = odeint.read_trajectories_csv(val_csv, "val")
    priors, prior_paths = _load_priors(data_dir, None, None, train_ds.gene_names)
    if priors is None:
        raise ConfigurationError(f"{Path(data_dir) / 'prior_P.tsv'}: prior file required for cross-validation")
    values = cfg.lambda_grid if grid is None else [float(v) for v in grid.split(",") if v.strip()]
    cells = [(a, b) for a in values for b in values]
    seeds = derive_seeds(seed)
    tc = cfg.train_config(seed=seeds["train"], method="dash")
    manifest = Manifest("cv", {"run": cfg.to_dict(), "grid": values, "folds": folds or cfg.folds}, seed, out)
    for p in ([config_path] if config_path else []) + [train_csv, val_csv] + prior_paths:
        manifest.add_input(p)
    m0 = mdl.init_model(cfg.model.kind, train_ds.k, cfg.model.hidden, seed=seeds["init"],
                        gene_names=train_ds.gene_names,
                        **({"output_scale": cfg.model.output_scale} if cfg.model.kind == "phoenix" else {}))
    with manifest.timed("cv"):
        res = tr.cross_validate_lambda(cells, m0, (train_ds, val_ds), priors, tc, folds or cfg.folds, n_threads)
    report = {"grid": values, "table": res.table, "best": {"lambda1": res.best[0], "lambda2": res.best[1]}}
    manifest.add_output(write_json(report, out / "cv.json"))
    manifest.write()
    click.echo(f"best lambda1={res.best[0]:g} lambda2={res.best[1]:g} over {len(cells)} cells")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
