"""Functions that are constant on the standard finest cells of ``[0,1)^n``.

Cubes of a shifted grid are unions of standard finest cells (clipped to the
domain), so averages over grid cubes are exact cell means and no common
refinement is needed.  Level-wide operations work on *block arrays*: one
entry per level cube meeting the domain, laid out in index order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .grid import Cube, DyadicGrid, GridParams, bad_mask, grid_rng, new_random_grid

__all__ = [
    "DyadicFunction",
    "ProjectionReport",
    "avg",
    "lq_norm",
    "block_sums",
    "block_counts",
    "block_averages",
    "expand_blocks",
    "block_sample",
    "level_averages",
    "level_difference",
    "martingale_diff",
    "reconstruct",
    "project_bad",
    "project_good",
    "martingale_transform",
    "maximal",
    "maximal_bruteforce",
    "bmo_norm",
    "test_bad_projection_decay",
]


class DyadicFunction:
    """Real values on the ``2**(L n)`` finest cells; immutable."""

    __slots__ = ("values", "L", "n")

    def __init__(self, values, L: int | None = None):
        v = np.array(values, dtype=np.float64)
        if v.ndim == 0:
            raise DimensionError("values must be an array over cells")
        N = v.shape[0]
        if any(s != N for s in v.shape) or N & (N - 1):
            raise DimensionError(f"cell array must be (2**L,)*n, got shape {v.shape}")
        lev = N.bit_length() - 1
        if L is not None and L != lev:
            raise DimensionError(f"array has resolution {lev}, expected {L}")
        if not np.all(np.isfinite(v)):
            raise ValueError("function values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "L", lev)
        object.__setattr__(self, "n", v.ndim)

    def __setattr__(self, key, value):
        raise AttributeError("DyadicFunction is immutable")

    def __repr__(self):
        return f"DyadicFunction(n={self.n}, L={self.L})"

    # construction helpers
    @classmethod
    def zeros(cls, n: int, L: int) -> "DyadicFunction":
        return cls(np.zeros((1 << L,) * n))

    @classmethod
    def constant(cls, c: float, n: int, L: int) -> "DyadicFunction":
        return cls(np.full((1 << L,) * n, float(c)))

    @classmethod
    def indicator(cls, Q: Cube) -> "DyadicFunction":
        v = np.zeros((1 << Q.L,) * Q.n)
        v[Q.slices()] = 1.0
        return cls(v)

    @property
    def N(self) -> int:
        return 1 << self.L

    @property
    def cell_volume(self) -> float:
        return 2.0 ** (-self.L * self.n)

    def _other(self, g):
        if isinstance(g, DyadicFunction):
            if g.values.shape != self.values.shape:
                raise DimensionError("functions live on different meshes")
            return g.values
        return g

    def __add__(self, g):
        return DyadicFunction(self.values + self._other(g))

    __radd__ = __add__

    def __sub__(self, g):
        return DyadicFunction(self.values - self._other(g))

    def __rsub__(self, g):
        return DyadicFunction(self._other(g) - self.values)

    def __mul__(self, g):
        return DyadicFunction(self.values * self._other(g))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return DyadicFunction(self.values / c)

    def __neg__(self):
        return DyadicFunction(-self.values)

    def __abs__(self):
        return DyadicFunction(np.abs(self.values))

    def restrict(self, Q: Cube) -> "DyadicFunction":
        v = np.zeros_like(self.values)
        v[Q.slices()] = self.values[Q.slices()]
        return DyadicFunction(v)

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def inner(self, g) -> float:
        return float(np.sum(self.values * self._other(g)) * self.cell_volume)

    # serialization: flat binary64 row-major plus a JSON sidecar
    def save(self, path) -> None:
        path = Path(path)
        self.values.astype("<f8").tofile(path.with_suffix(".bin"))
        meta = {"n": self.n, "L": self.L, "domain": f"[0,1)^{self.n}"}
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DyadicFunction":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        n, L = int(meta["n"]), int(meta["L"])
        flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        if flat.size != 1 << (n * L):
            raise DimensionError(f"{path}: expected {1 << (n * L)} values, found {flat.size}")
        return cls(flat.reshape((1 << L,) * n))


def _vals(f):
    return f.values if isinstance(f, DyadicFunction) else np.asarray(f, dtype=np.float64)


def avg(f, Q: Cube) -> float:
    """Mean of ``f`` over ``Q ∩ [0,1)^n``."""
    v = _vals(f)
    if Q.n != v.ndim:
        raise DimensionError("cube and function dimension differ")
    if not Q.intersects_domain():
        raise ValueError(f"cube {Q.id} does not meet the domain")
    return float(v[Q.slices()].mean())


def lq_norm(f, q: float) -> float:
    """Exact L^q norm of a cell function (sum over cells times cell volume)."""
    v = _vals(f)
    vol = 2.0 ** (-(v.shape[0].bit_length() - 1) * v.ndim)
    if np.isinf(q):
        return float(np.abs(v).max())
    return float((np.sum(np.abs(v) ** q) * vol) ** (1.0 / q))


# --------------------------------------------------------------------------
# level-wide block operations


def block_sums(v: np.ndarray, grid: DyadicGrid, level: int) -> np.ndarray:
    out = v
    for a, (starts, _) in enumerate(grid.axis_blocks(level)):
        out = np.add.reduceat(out, starts, axis=a)
    return out


def block_counts(grid: DyadicGrid, level: int) -> np.ndarray:
    key = ("counts", level)
    if key not in grid._cache:
        c = np.ones(())
        for _, lengths in grid.axis_blocks(level):
            c = np.multiply.outer(c, lengths.astype(np.float64))
        grid._cache[key] = c
    return grid._cache[key]


def block_averages(f, grid: DyadicGrid, level: int) -> np.ndarray:
    return block_sums(_vals(f), grid, level) / block_counts(grid, level)


def expand_blocks(blocks: np.ndarray, grid: DyadicGrid, level: int) -> np.ndarray:
    out = blocks
    for a, (_, lengths) in enumerate(grid.axis_blocks(level)):
        out = np.repeat(out, lengths, axis=a)
    return out


def block_sample(v: np.ndarray, grid: DyadicGrid, level: int) -> np.ndarray:
    """Value of a cell array at the first cell of each level block (for blockwise-constant arrays)."""
    return v[np.ix_(*[starts for starts, _ in grid.axis_blocks(level)])]


def level_averages(f, grid: DyadicGrid, level: int) -> np.ndarray:
    """Cell array whose value at x is the average over the level cube containing x."""
    return expand_blocks(block_averages(f, grid, level), grid, level)


def level_difference(f, grid: DyadicGrid, level: int) -> np.ndarray:
    """Sum over all level cubes Q of D_Q f, as a cell array."""
    return level_averages(f, grid, level + 1) - level_averages(f, grid, level)


def _child_pieces(Q: Cube):
    """Slices of the children of Q that meet the domain (children halve Q)."""
    h = Q.side_units // 2
    N = 1 << Q.L
    out = []
    for e in itertools.product((0, 1), repeat=Q.n):
        sl = []
        for c, d in zip(Q.corner, e):
            lo, hi = max(c + d * h, 0), min(c + (d + 1) * h, N)
            if lo >= hi:
                break
            sl.append(slice(lo, hi))
        else:
            out.append(tuple(sl))
    return out


def martingale_diff(f, Q: Cube) -> DyadicFunction:
    """D_Q f = sum over children Q' of (<f>_Q' - <f>_Q) 1_Q'."""
    if Q.level >= Q.L:
        raise ValueError("finest-level cube has no martingale difference")
    v = _vals(f)
    out = np.zeros_like(v)
    mq = avg(v, Q)
    for sl in _child_pieces(Q):
        out[sl] = v[sl].mean() - mq
    return DyadicFunction(out)


def reconstruct(f, grid: DyadicGrid) -> np.ndarray:
    """Top-level averages plus every martingale difference, as a cell array."""
    top = grid.params.top_level
    out = level_averages(f, grid, top)
    for k in range(top, grid.L):
        out = out + level_difference(f, grid, k)
    return out


def _projection(f, grid_j, grid_k, params, want_bad: bool) -> np.ndarray:
    v = _vals(f)
    out = np.zeros_like(v)
    prev = level_averages(v, grid_j, params.top_level)
    for k in range(params.top_level, grid_j.L):
        nxt = level_averages(v, grid_j, k + 1)
        d = nxt - prev
        prev = nxt
        if not np.any(d):
            continue
        mask = bad_mask(grid_j, k, grid_k, params)
        if not want_bad:
            mask = ~mask
        out += d * expand_blocks(mask.astype(np.float64), grid_j, k)
    return out


def project_bad(f, grid_j: DyadicGrid, grid_k: DyadicGrid, params: GridParams) -> DyadicFunction:
    """Sum of D_Q f over the cubes Q of ``grid_j`` that are bad against ``grid_k``."""
    return DyadicFunction(_projection(f, grid_j, grid_k, params, True))


def project_good(f, grid_j: DyadicGrid, grid_k: DyadicGrid, params: GridParams) -> DyadicFunction:
    return DyadicFunction(_projection(f, grid_j, grid_k, params, False))


def martingale_transform(f, grid: DyadicGrid, signs: dict) -> DyadicFunction:
    """sum_Q eps_Q D_Q f with ``signs[level]`` a block array of coefficients."""
    v = _vals(f)
    out = np.zeros_like(v)
    for k in range(grid.params.top_level, grid.L):
        if k in signs:
            out += level_difference(v, grid, k) * expand_blocks(np.asarray(signs[k], float), grid, k)
    return DyadicFunction(out)


# --------------------------------------------------------------------------
# maximal function and BMO


def _neighbour_max(blocks: np.ndarray) -> np.ndarray:
    """Max over the 3**n translates (by one side length) of each block; outside = 0."""
    padded = np.pad(blocks, 1)
    out = np.zeros_like(blocks)
    n = blocks.ndim
    for u in itertools.product((0, 1, 2), repeat=n):
        sl = tuple(slice(d, d + s) for d, s in zip(u, blocks.shape))
        np.maximum(out, padded[sl], out=out)
    return out


def maximal(f, grid: DyadicGrid | None = None) -> DyadicFunction:
    """Dyadic surrogate of the Hardy-Littlewood maximal function.

    At each level the supremum of |average| runs over the cube containing x
    and its 3**n - 1 neighbours of the same size (cubes clipped to the domain).
    """
    v = _vals(f)
    out = np.zeros_like(v)
    if grid is None:
        L, n = v.shape[0].bit_length() - 1, v.ndim
        for k in range(L + 1):
            m = 1 << (L - k)
            blocks = np.abs(v.reshape(sum(((1 << k, m) for _ in range(n)), ())).mean(axis=tuple(range(1, 2 * n, 2))))
            nb = _neighbour_max(blocks)
            for a in range(n):
                nb = np.repeat(nb, m, axis=a)
            np.maximum(out, nb, out=out)
        return DyadicFunction(out)
    for k in grid.levels:
        blocks = np.abs(block_averages(v, grid, k))
        np.maximum(out, expand_blocks(_neighbour_max(blocks), grid, k), out=out)
    return DyadicFunction(out)


def maximal_bruteforce(f, grid: DyadicGrid) -> DyadicFunction:
    """Cell-by-cell evaluation of :func:`maximal` through explicit cube averages."""
    v = _vals(f)
    out = np.zeros_like(v)
    for x in itertools.product(range(v.shape[0]), repeat=v.ndim):
        best = 0.0
        for k in grid.levels:
            Q = grid.cube_containing(k, x)
            for u in itertools.product((-1, 0, 1), repeat=v.ndim):
                R = grid.cube(k, tuple(i + d for i, d in zip(Q.index, u)))
                if R.intersects_domain():
                    best = max(best, abs(avg(v, R)))
        out[x] = best
    return DyadicFunction(out)


def bmo_norm(f, grid: DyadicGrid) -> float:
    """max over cubes Q of the grid of <|f - <f>_Q|>_Q."""
    v = _vals(f)
    best = 0.0
    for k in grid.levels:
        osc = np.abs(v - level_averages(v, grid, k))
        best = max(best, float(block_averages(osc, grid, k).max()))
    return best


# --------------------------------------------------------------------------
# bad projection decay harness


@dataclass(frozen=True)
class ProjectionReport:
    q: float
    level: int
    r: int
    input_norm: float
    samples: np.ndarray
    mean: float
    ci95: float
    trials: int


def test_bad_projection_decay(q: float, level: int, params: GridParams, trials: int, seed: int = 0) -> ProjectionReport:
    """Monte Carlo ratio ||P_bad phi||_q^q / ||phi||_q^q over resampled second grids.

    ``phi`` is a random combination of martingale differences of the given
    level in the first grid, built before any second grid is drawn.
    """
    if not q > 1:
        raise ConfigError("q must exceed 1")
    if trials < 2:
        raise ConfigError("need at least two trials")
    if not params.top_level <= level < params.L:
        raise ConfigError("level must allow martingale differences")
    grid_j = new_random_grid(params, 1, seed)
    g = grid_rng(seed, 1, 1 << 20).standard_normal((params.N,) * params.n)
    phi = level_difference(g, grid_j, level)
    base = lq_norm(phi, q) ** q
    samples = np.empty(trials)
    for t in range(trials):
        grid_k = new_random_grid(params, 2, seed, trial=t + 1)
        samples[t] = lq_norm(project_bad(phi, grid_j, grid_k, params), q) ** q / base
    mean = float(samples.mean())
    ci = float(1.96 * samples.std(ddof=1) / np.sqrt(trials))
    return ProjectionReport(q, level, params.r, base ** (1 / q), samples, mean, ci, trials)


test_bad_projection_decay.__test__ = False
