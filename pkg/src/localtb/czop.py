"""Calderón–Zygmund kernels and their dense midpoint discretization.

The operator acts on cell arrays of shape ``(2^L,)*n``; entry ``M[i, j]`` is
the kernel evaluated at the centres of cells ``i`` and ``j`` with the
diagonal set to zero, and ``(Tf)_i = sum_j M[i, j] f_j |cell|``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dyfun import DyadicFunction, _vals
from .errors import ConfigError, DimensionError, ValidationError
from .grid import Cube

__all__ = [
    "Kernel",
    "KernelConstants",
    "DiscretizedOperator",
    "WitnessPair",
    "hilbert_kernel",
    "riesz_kernel",
    "bump_kernel",
    "zero_kernel",
    "validate_kernel",
    "assemble",
    "apply",
    "testing_constant",
    "estimate_opnorm",
    "witness_pair",
    "hardy_check",
    "cell_centres",
]


@dataclass(frozen=True)
class Kernel:
    """Kernel ``K(x, y)`` evaluated on arrays of points with trailing axis n.

    ``eta`` is the declared Hölder exponent; ``C_size``/``C_smooth`` are the
    declared constants (checked empirically by :func:`validate_kernel`).
    """

    name: str
    n: int
    evaluator: Callable
    eta: float
    C_size: float
    C_smooth: float
    antisymmetric: bool = False
    params: dict = field(default_factory=dict)

    def __call__(self, x, y) -> np.ndarray:
        return self.evaluator(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))

    def spec(self) -> dict:
        return {"name": self.name, "n": self.n, "eta": self.eta, **self.params}


def hilbert_kernel(c: float = 1.0) -> Kernel:
    """``K(x, y) = c / (x - y)`` in one dimension."""

    def ev(x, y):
        return c / (x[..., 0] - y[..., 0])

    return Kernel("hilbert", 1, ev, 1.0, abs(c), 4 * abs(c), antisymmetric=True, params={"c": c})


def riesz_kernel(n: int = 2, component: int = 0, c: float = 1.0) -> Kernel:
    """``K(x, y) = c (x_i - y_i) / |x - y|^{n+1}``."""
    if not 0 <= component < n:
        raise ConfigError(f"component {component} out of range for n={n}")

    def ev(x, y):
        d = x - y
        r = np.sqrt(np.sum(d * d, axis=-1))
        return c * d[..., component] / r ** (n + 1)

    return Kernel(
        f"riesz{component}", n, ev, 1.0, abs(c), 4 * (n + 1) * abs(c), antisymmetric=True,
        params={"c": c, "component": component},
    )


def bump_kernel(n: int = 1, width: float = 0.5, c: float = 1.0) -> Kernel:
    """``K(x, y) = c psi(|x - y| / width) / |x - y|^n`` with psi a smooth bump, psi(0) = 1."""
    if width <= 0:
        raise ConfigError("bump width must be positive")

    def ev(x, y):
        d = x - y
        r = np.sqrt(np.sum(d * d, axis=-1))
        t = r / width
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            psi = np.where(t < 1, np.exp(1.0 - 1.0 / np.clip(1.0 - t * t, 1e-300, None)), 0.0)
            return c * psi / r**n

    return Kernel("bump", n, ev, 1.0, abs(c), float("nan"), params={"c": c, "width": width})


def zero_kernel(n: int = 1) -> Kernel:
    def ev(x, y):
        return np.zeros(np.broadcast_shapes(x.shape, y.shape)[:-1])

    return Kernel("zero", n, ev, 1.0, 0.0, 0.0, antisymmetric=True)


@dataclass(frozen=True)
class KernelConstants:
    C_size: float
    C_smooth: float
    samples: int
    eta: float


def validate_kernel(k: Kernel, samples: int = 10_000, seed: int = 0) -> KernelConstants:
    """Smallest constants consistent with the size and smoothness bounds on a random sample.

    Points are drawn uniformly in the unit cube; the perturbation ``x'`` is
    drawn with ``|x - x'| < |x - y| / 2``.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(9,))))
    n = k.n
    x = rng.random((samples, n))
    y = rng.random((samples, n))
    r = np.linalg.norm(x - y, axis=-1)
    keep = r > 1e-9
    x, y, r = x[keep], y[keep], r[keep]
    size = np.abs(k(x, y)) * r**n
    u = rng.normal(size=x.shape)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    h = r * 0.5 * rng.random(r.shape) * (1 - 1e-9)
    xp = x + u * h[:, None]
    diff = np.abs(k(x, y) - k(xp, y)) + np.abs(k(y, x) - k(y, xp))
    ok = h > 0
    smooth = diff[ok] * r[ok] ** (n + k.eta) / h[ok] ** k.eta
    return KernelConstants(
        float(size.max()) if size.size else 0.0,
        float(smooth.max()) if smooth.size else 0.0,
        int(keep.sum()),
        k.eta,
    )


def cell_centres(n: int, L: int) -> np.ndarray:
    """Centres of all finest cells in C order, shape ``(2^{nL}, n)``."""
    N = 1 << L
    axes = [(np.arange(N) + 0.5) / N] * n
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


class DiscretizedOperator:
    """Dense cell-to-cell matrix with zero diagonal.

    Matrices are kept read-only so that a single instance can be shared
    between threads.
    """

    def __init__(self, matrix: np.ndarray, n: int, L: int, name: str = "custom", spec: dict | None = None):
        N = 1 << L
        size = N**n
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (size, size):
            raise DimensionError(f"matrix shape {matrix.shape} does not match n={n}, L={L}")
        if not np.all(np.isfinite(matrix)):
            raise ValidationError("operator matrix has non-finite entries")
        matrix.setflags(write=False)
        self.matrix = matrix
        self.n = n
        self.L = L
        self.name = name
        self.spec = dict(spec or {"name": name})

    @classmethod
    def from_matrix(cls, matrix, n: int, L: int, name: str = "custom") -> "DiscretizedOperator":
        return cls(matrix, n, L, name)

    @property
    def cell_volume(self) -> float:
        return 2.0 ** (-self.n * self.L)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.matrix)

    def transpose(self) -> "DiscretizedOperator":
        spec = dict(self.spec, adjoint=not self.spec.get("adjoint", False))
        return DiscretizedOperator(self.matrix.T.copy(), self.n, self.L, self.name + "*", spec)

    adjoint = transpose

    def __call__(self, f) -> DyadicFunction:
        return apply(self, f)

    def apply_values(self, v: np.ndarray) -> np.ndarray:
        """Apply to a raw cell array, or to a stack of them along a leading axis."""
        N = 1 << self.L
        shape = (N,) * self.n
        if v.shape == shape:
            return (self.matrix @ v.ravel()).reshape(shape) * self.cell_volume
        if v.shape[1:] == shape:
            flat = v.reshape(v.shape[0], -1)
            return (flat @ self.matrix.T).reshape(v.shape) * self.cell_volume
        raise DimensionError(f"array of shape {v.shape} does not match n={self.n}, L={self.L}")

    def bilinear(self, f, g) -> float:
        """``<T f, g>``."""
        return float(np.sum(self.apply_values(_vals(f)) * _vals(g)) * self.cell_volume)

    def save(self, path) -> None:
        """Binary little-endian matrix plus JSON header."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.matrix.astype("<f8").tofile(path.with_suffix(".bin"))
        header = {"kernel": self.spec, "name": self.name, "n": self.n, "L": self.L, "dtype": "<f8"}
        path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "DiscretizedOperator":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        n, L = header["n"], header["L"]
        size = (1 << L) ** n
        m = np.fromfile(path.with_suffix(".bin"), dtype=header["dtype"]).reshape(size, size)
        return cls(m, n, L, header["name"], header["kernel"])


def _cache_key(k: Kernel, L: int) -> str:
    parts = [k.name, f"n{k.n}", f"L{L}"] + [f"{a}{k.params[a]}" for a in sorted(k.params)]
    return "_".join(str(p) for p in parts).replace(".", "p").replace("-", "m")


def assemble(k: Kernel, L: int, cache_dir=None) -> DiscretizedOperator:
    """Midpoint-rule matrix of ``k`` at resolution L, zero on the diagonal.

    With ``cache_dir`` set, a matrix previously written for the same kernel
    spec and resolution is reused.
    """
    if k.n == 1 and L > 12 or k.n == 2 and L > 6 or k.n > 2 and k.n * L > 12:
        raise ConfigError(f"dense assembly refused at n={k.n}, L={L}")
    if cache_dir is not None:
        path = Path(cache_dir) / _cache_key(k, L)
        if path.with_suffix(".json").exists():
            op = DiscretizedOperator.load(path)
            if op.spec == k.spec():
                return op
    x = cell_centres(k.n, L)
    size = x.shape[0]
    M = np.empty((size, size))
    rows = max(1, 2**22 // size)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(0, size, rows):
            b = min(size, a + rows)
            M[a:b] = k(x[a:b, None, :], x[None, :, :])
    np.fill_diagonal(M, 0.0)
    op = DiscretizedOperator(M, k.n, L, k.name, k.spec())
    if cache_dir is not None:
        op.save(path)
    return op


def apply(op: DiscretizedOperator, f) -> DyadicFunction:
    v = _vals(f)
    if v.ndim != op.n or v.shape[0] != 1 << op.L:
        raise DimensionError(f"function of shape {v.shape} does not match operator n={op.n}, L={op.L}")
    return DyadicFunction(op.apply_values(v))


def testing_constant(op: DiscretizedOperator, sys, p_dual: float | None = None, adjoint: bool = False,
                     max_level: int | None = None) -> float:
    """Empirical ``T_loc = max_Q <|T b_Q|^{p'}>_Q^{1/p'}`` over the system's cubes.

    Averages are taken over ``Q`` intersected with the domain.  The adjoint
    variant applies the transposed matrix.
    """
    g = sys.grid
    if (g.n, g.L) != (op.n, op.L):
        raise DimensionError("system and operator resolutions differ")
    q = sys.p_dual if p_dual is None else float(p_dual)
    M = op.matrix.T if adjoint else op.matrix
    vol = op.cell_volume
    top = g.params.top_level
    max_level = g.L if max_level is None else max_level
    best = 0.0
    for k in range(top, max_level + 1):
        cubes = g.cubes(k)
        B = np.stack([sys.values(Q).ravel() for Q in cubes], axis=1)
        TB = (M @ B) * vol
        for col, Q in enumerate(cubes):
            sl = Q.slices()
            vals = np.abs(TB[:, col].reshape(sys.values(Q).shape)[sl])
            best = max(best, float(np.mean(vals**q)) ** (1 / q))
    return best


def estimate_opnorm(op: DiscretizedOperator, trials: int = 8, seed: int = 0, tol: float = 1e-13,
                    max_iter: int = 5000) -> float:
    """Largest singular value of ``M |cell|`` by block power iteration on ``M^T M``.

    ``trials`` random start vectors form the block; the block keeps the
    iteration fast when the top singular values are clustered (antisymmetric
    kernels have them in pairs).
    """
    M = op.matrix
    size = M.shape[0]
    if op.is_zero:
        return 0.0
    k = max(1, min(trials, size))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(17,))))
    V, _ = np.linalg.qr(rng.normal(size=(size, k)))
    prev = 0.0
    for _ in range(max_iter):
        W = M.T @ (M @ V)
        V, R = np.linalg.qr(W)
        # Rayleigh–Ritz on the block for the current top eigenvalue of M^T M
        H = (M @ V).T @ (M @ V)
        lam = float(np.linalg.eigvalsh(H)[-1])
        if abs(lam - prev) <= tol * lam:
            break
        prev = lam
    return float(np.sqrt(lam)) * op.cell_volume


@dataclass(frozen=True)
class WitnessPair:
    f1: DyadicFunction
    f2: DyadicFunction
    pairing: float


def witness_pair(op: DiscretizedOperator, Q0: Cube) -> WitnessPair:
    """``f1 = 1_{Q0}``, ``f2 = sign(T f1) 1_{Q0}`` with sign(0) = +1."""
    f1 = DyadicFunction.indicator(Q0)
    if (f1.n, f1.L) != (op.n, op.L):
        raise DimensionError("cube and operator resolutions differ")
    tf = op.apply_values(f1.values)
    f2 = DyadicFunction(np.where(tf >= 0, 1.0, -1.0) * f1.values)
    return WitnessPair(f1, f2, op.bilinear(f1, f2))


def hardy_check(Q: Cube, kappa: float, p: float, g1, g2) -> float:
    """``∬ |g1(y) g2(x)| / |x - y|^n dy dx`` over ``||g1||_p ||g2||_{p'}``.

    ``g1`` must vanish off ``Q`` and ``g2`` off ``kappa Q \\ Q``; cells are
    located by their centres.
    """
    if kappa <= 1:
        raise ConfigError("kappa must exceed 1")
    v1, v2 = np.asarray(_vals(g1), float), np.asarray(_vals(g2), float)
    n, L = Q.n, Q.L
    N = 1 << L
    vol = 2.0 ** (-n * L)
    x = cell_centres(n, L) * N
    centre = np.array(Q.corner, float) + Q.side_units / 2
    rad = np.max(np.abs(x - centre), axis=-1)
    in_q = (rad < Q.side_units / 2).reshape(v1.shape)
    in_ring = ((rad < kappa * Q.side_units / 2).reshape(v1.shape)) & ~in_q
    if np.any(v1[~in_q]) or np.any(v2[~in_ring]):
        raise ValidationError(f"hardy_check supports violate Q={Q.id}, kappa={kappa}")
    pd = p / (p - 1)
    n1 = (np.sum(np.abs(v1) ** p) * vol) ** (1 / p)
    n2 = (np.sum(np.abs(v2) ** pd) * vol) ** (1 / pd)
    if n1 == 0 or n2 == 0:
        raise ValidationError("hardy_check needs nonzero g1 and g2")
    a = np.abs(v1).ravel()
    b = np.abs(v2).ravel()
    ia, ib = np.nonzero(a)[0], np.nonzero(b)[0]
    xs = x / N
    d = np.sqrt(np.sum((xs[ib, None, :] - xs[None, ia, :]) ** 2, axis=-1))
    lhs = float(b[ib] @ (d ** (-n)) @ a[ia]) * vol * vol
    return lhs / (n1 * n2)
