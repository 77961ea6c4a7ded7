"""Dynamics models NN(g): the PHOENIX architecture and a plain two-layer MLP.

Both models take a batch of expression states ``g`` with shape ``(n, k)`` (or a
single state of shape ``(k,)``) and return the estimated time derivative with
the same shape. Weight matrices carry binary masks; a masked weight reads as
exactly zero in every forward pass.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, ClassVar

import numpy as np

from . import autograd as ag
from .errors import ContractError, ShapeError

hill_sigma = ag.hill_sigma
hill_pi = ag.hill_pi


def default_hidden_width(k: int) -> int:
    return max(10, round(k / 9))


@dataclass
class _Params:
    """Common behaviour for mask-carrying parameter sets."""

    gene_names: list[str]
    masks: dict[str, np.ndarray]
    seed: int | None

    kind: ClassVar[str]
    param_names: ClassVar[tuple[str, ...]]
    weight_names: ClassVar[tuple[str, ...]]
    # (first-layer weight, second-layer weight) per parallel branch
    branches: ClassVar[tuple[tuple[str, str], ...]]

    @property
    def k(self) -> int:
        return len(self.gene_names)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def effective(self, name: str) -> np.ndarray:
        """Parameter with its mask applied (masked entries exactly 0)."""
        w = getattr(self, name)
        if name in self.masks:
            return np.where(self.masks[name] > 0, w, 0.0)
        return w

    def replace(self, **arrays) -> "_Params":
        new = self.copy()
        for name, a in arrays.items():
            if name not in self.param_names:
                raise KeyError(name)
            a = np.array(a, dtype=np.float64)
            if a.shape != getattr(self, name).shape:
                raise ShapeError(f"{name}: expected shape {getattr(self, name).shape}, got {a.shape}")
            setattr(new, name, a)
        return new

    def copy(self):
        return copy.deepcopy(self)

    def rhs(self, arrays=None) -> Callable:
        """Return ``f(g)``; ``arrays`` may override parameters with tape nodes."""
        raise NotImplementedError

    def velocity(self, g):
        return _apply_rhs(self.rhs(), g)

    def normalized_weights(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _check(self):
        for name in self.weight_names:
            mask = self.masks.setdefault(name, np.ones_like(getattr(self, name)))
            if mask.shape != getattr(self, name).shape:
                raise ShapeError(f"mask for {name} has shape {mask.shape}, expected {getattr(self, name).shape}")
            if not np.all((mask == 0) | (mask == 1)):
                raise ContractError(f"mask for {name} must be binary")
            self.masks[name] = mask.astype(np.float64)


def _apply_rhs(f, g):
    if isinstance(g, ag.Node):
        return f(g)
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        return f(g[None, :])[0]
    return f(g)


def _masked(arrays, masks, name):
    return ag.mul(arrays[name], masks[name])


@dataclass
class PhoenixParams(_Params):
    w_sigma: np.ndarray = field(default=None)
    b_sigma: np.ndarray = field(default=None)
    w_pi: np.ndarray = field(default=None)
    b_pi: np.ndarray = field(default=None)
    u_sigma: np.ndarray = field(default=None)
    u_pi: np.ndarray = field(default=None)
    upsilon: np.ndarray = field(default=None)

    kind: ClassVar[str] = "phoenix"
    param_names: ClassVar[tuple[str, ...]] = ("w_sigma", "b_sigma", "w_pi", "b_pi", "u_sigma", "u_pi", "upsilon")
    weight_names: ClassVar[tuple[str, ...]] = ("w_sigma", "w_pi", "u_sigma", "u_pi")
    branches: ClassVar[tuple[tuple[str, str], ...]] = (("w_sigma", "u_sigma"), ("w_pi", "u_pi"))

    def __post_init__(self):
        m, k = np.shape(self.w_sigma)
        r = len(self.gene_names)
        expected = {
            "w_sigma": (m, k), "b_sigma": (m,), "w_pi": (m, k), "b_pi": (m,),
            "u_sigma": (r, m), "u_pi": (r, m), "upsilon": (r,),
        }
        if k != r:
            raise ShapeError(f"PHOENIX needs k == r, got k={k}, r={r}")
        for name, shape in expected.items():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {a.shape}")
            setattr(self, name, a)
        self._check()

    @property
    def m(self) -> int:
        return self.w_sigma.shape[0]

    def rhs(self, arrays=None, fused: bool = True):
        arrays = self.arrays() if arrays is None else {**self.arrays(), **arrays}
        masks = self.masks
        ws_t = ag.transpose(_masked(arrays, masks, "w_sigma"))
        wp_t = ag.transpose(_masked(arrays, masks, "w_pi"))
        us_t = ag.transpose(_masked(arrays, masks, "u_sigma"))
        up_t = ag.transpose(_masked(arrays, masks, "u_pi"))
        b_sigma, b_pi = arrays["b_sigma"], arrays["b_pi"]
        mult = ag.relu(arrays["upsilon"])
        operands = (ws_t, b_sigma, wp_t, b_pi, us_t, up_t, mult)
        if fused:
            return lambda g: _phoenix_node(g, *operands)

        def f(g):
            c_sigma = ag.matmul(hill_sigma(g), ws_t) + b_sigma
            c_pi = ag.exp(ag.matmul(hill_pi(g), wp_t) + b_pi)
            c_union = ag.matmul(c_sigma, us_t) + ag.matmul(c_pi, up_t)
            return (c_union - g) * mult

        return f

    def normalized_weights(self) -> dict[str, np.ndarray]:
        """Non-negative, sum-to-one versions of the four weight matrices.

        W_sigma uses |w|; W_pi uses exp(w) since it acts in log space; the
        second-layer matrices are scaled row-wise by ReLU(upsilon) first.
        Masked entries score 0 and are excluded from the normalizing sum.
        """
        gain = np.maximum(self.upsilon, 0.0)[:, None]
        raw = {
            "w_sigma": np.abs(self.effective("w_sigma")),
            "w_pi": np.where(self.masks["w_pi"] > 0, np.exp(self.w_pi), 0.0),
            "u_sigma": np.abs(self.effective("u_sigma") * gain),
            "u_pi": np.abs(self.effective("u_pi") * gain),
        }
        return {name: _sum_normalize(a) for name, a in raw.items()}


@dataclass
class MlpParams(_Params):
    w1: np.ndarray = field(default=None)
    b1: np.ndarray = field(default=None)
    w2: np.ndarray = field(default=None)
    b2: np.ndarray = field(default=None)

    kind: ClassVar[str] = "mlp"
    param_names: ClassVar[tuple[str, ...]] = ("w1", "b1", "w2", "b2")
    weight_names: ClassVar[tuple[str, ...]] = ("w1", "w2")
    branches: ClassVar[tuple[tuple[str, str], ...]] = (("w1", "w2"),)

    def __post_init__(self):
        m, k = np.shape(self.w1)
        r = len(self.gene_names)
        expected = {"w1": (m, k), "b1": (m,), "w2": (r, m), "b2": (r,)}
        for name, shape in expected.items():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {a.shape}")
            setattr(self, name, a)
        self._check()

    @property
    def m(self) -> int:
        return self.w1.shape[0]

    def rhs(self, arrays=None):
        arrays = self.arrays() if arrays is None else {**self.arrays(), **arrays}
        w1_t = ag.transpose(_masked(arrays, self.masks, "w1"))
        w2_t = ag.transpose(_masked(arrays, self.masks, "w2"))
        b1, b2 = arrays["b1"], arrays["b2"]

        def f(g):
            hidden = ag.elu(ag.matmul(g, w1_t) + b1)
            return ag.matmul(hidden, w2_t) + b2 - g

        return f

    def normalized_weights(self) -> dict[str, np.ndarray]:
        return {name: _sum_normalize(np.abs(self.effective(name))) for name in self.weight_names}


def _phoenix_node(g, ws_t, b_sigma, wp_t, b_pi, us_t, up_t, mult):
    """PHOENIX right-hand side as a single tape primitive.

    Same arithmetic as the elementwise composition in ``PhoenixParams.rhs``
    with a hand-written vector-Jacobian product; cuts tape length ~10x.
    """
    args = (g, ws_t, b_sigma, wp_t, b_pi, us_t, up_t, mult)
    vals = [ag.value(a) for a in args]
    gv, wsv, bsv, wpv, bpv, usv, upv, mv = vals
    hs = ag._hill_sigma(gv)
    hp = np.log1p(hs)
    c_sigma = hs @ wsv + bsv
    c_pi = np.exp(hp @ wpv + bpv)
    bracket = c_sigma @ usv + c_pi @ upv - gv
    out = bracket * mv
    tape = ag._tape(*args)
    if tape is None:
        return out
    need = [isinstance(a, ag.Node) for a in args]

    def vjp(grad_out):
        d_br = grad_out * mv
        d_mult = (grad_out * bracket).sum(axis=0) if need[7] else None
        d_cs = d_br @ usv.T
        d_zp = (d_br @ upv.T) * c_pi
        d_g = None
        if need[0]:
            d_g = (d_cs @ wsv.T) * ag._d_hill_sigma(gv) + (d_zp @ wpv.T) * ag._d_hill_pi(gv) - d_br
        return (
            d_g,
            hs.T @ d_cs if need[1] else None,
            d_cs.sum(axis=0) if need[2] else None,
            hp.T @ d_zp if need[3] else None,
            d_zp.sum(axis=0) if need[4] else None,
            c_sigma.T @ d_br if need[5] else None,
            c_pi.T @ d_br if need[6] else None,
            d_mult,
        )

    return tape.record(out, tuple(a if n else None for a, n in zip(args, need)), vjp, "phoenix_rhs")


def _sum_normalize(a: np.ndarray) -> np.ndarray:
    total = a.sum()
    if total <= 0.0 or not np.isfinite(total):
        return np.full(a.shape, 1.0 / a.size)
    return a / total


def phoenix_velocity(p: PhoenixParams, g):
    """ReLU(upsilon) * (U_sigma c_sigma + U_pi c_pi - g)."""
    return p.velocity(g)


def mlp_velocity(p: MlpParams, g):
    """ELU-hidden MLP(g) - g."""
    return p.velocity(g)


def _gene_names(k, gene_names):
    if gene_names is None:
        return [f"g{i + 1}" for i in range(k)]
    if len(gene_names) != k:
        raise ShapeError(f"expected {k} gene names, got {len(gene_names)}")
    return list(gene_names)


def init_phoenix(k: int, m: int | None = None, seed: int = 0, gene_names=None,
                 output_scale: float = 1.0) -> PhoenixParams:
    """Weights ~ N(0, 1/fan_in), biases 0, upsilon 1.

    ``output_scale`` shrinks the output-layer draws; small values start the
    model near pure decay ``-g``.
    """
    m = default_hidden_width(k) if m is None else m
    rng = np.random.default_rng(seed)
    return PhoenixParams(
        gene_names=_gene_names(k, gene_names), masks={}, seed=seed,
        w_sigma=rng.normal(0.0, 1.0 / np.sqrt(k), (m, k)),
        b_sigma=np.zeros(m),
        w_pi=rng.normal(0.0, 1.0 / np.sqrt(k), (m, k)),
        b_pi=np.zeros(m),
        u_sigma=rng.normal(0.0, output_scale / np.sqrt(m), (k, m)),
        u_pi=rng.normal(0.0, output_scale / np.sqrt(m), (k, m)),
        upsilon=np.ones(k),
    )


def init_mlp(k: int, m: int | None = None, seed: int = 0, gene_names=None) -> MlpParams:
    m = default_hidden_width(k) if m is None else m
    rng = np.random.default_rng(seed)
    return MlpParams(
        gene_names=_gene_names(k, gene_names), masks={}, seed=seed,
        w1=rng.normal(0.0, 1.0 / np.sqrt(k), (m, k)),
        b1=np.zeros(m),
        w2=rng.normal(0.0, 1.0 / np.sqrt(m), (k, m)),
        b2=np.zeros(k),
    )


MODEL_KINDS = {"phoenix": PhoenixParams, "mlp": MlpParams}


def init_model(kind: str, k: int, m: int | None = None, seed: int = 0, gene_names=None, **options):
    if kind == "phoenix":
        return init_phoenix(k, m, seed, gene_names, **options)
    if kind == "mlp":
        return init_mlp(k, m, seed, gene_names)
    raise ContractError(f"unknown model kind {kind!r}")


# -- checkpoints ---------------------------------------------------------------


def _encode(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _decode(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def to_checkpoint(p, metadata: dict | None = None) -> dict:
    return {
        "kind": p.kind,
        "gene_names": list(p.gene_names),
        "m": p.m,
        "seed": p.seed,
        "params": {name: _encode(a) for name, a in p.arrays().items()},
        "masks": {name: _encode(p.masks[name]) for name in p.weight_names},
        "metadata": metadata or {},
    }


def from_checkpoint(d: dict):
    try:
        cls = MODEL_KINDS[d["kind"]]
    except KeyError:
        raise ContractError(f"unknown model kind {d.get('kind')!r}") from None
    arrays = {name: _decode(v) for name, v in d["params"].items()}
    masks = {name: _decode(v) for name, v in d.get("masks", {}).items()}
    return cls(gene_names=list(d["gene_names"]), masks=masks, seed=d.get("seed"), **arrays)


def save_checkpoint(p, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_checkpoint(p, metadata), sort_keys=True, indent=1) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(params, metadata)``."""
    d = json.loads(Path(path).read_text())
    return from_checkpoint(d), d.get("metadata", {})
