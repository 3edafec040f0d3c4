"""Systems of p-accretive functions {b_Q} indexed by the cubes of one grid."""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dyfun import DyadicFunction, block_averages, expand_blocks
from .errors import ConfigError, ValidationError
from .grid import Cube, DyadicGrid

__all__ = [
    "AccretiveSystem",
    "SystemReport",
    "trivial_system",
    "oscillatory_system",
    "system_from_function",
    "load_system",
    "save_system",
    "validate_system",
    "stopping_lower_bound",
]


class AccretiveSystem:
    """Lazily generated, memoised family Q -> b_Q.

    ``generator(Q)`` returns a cell array supported on ``Q``.  Finest cells
    always get ``b_Q = 1_Q`` (the only function constant on the cell with
    the right mean).
    """

    def __init__(self, grid: DyadicGrid, p: float, A: float, generator: Callable, name: str = "custom"):
        if not p > 1:
            raise ConfigError(f"p must exceed 1, got {p}")
        if not A >= 1:
            raise ConfigError(f"A must be at least 1, got {A}")
        self.grid = grid
        self.p = float(p)
        self.A = float(A)
        self.name = name
        self._generator = generator
        self._memo: dict = {}
        self._lock = threading.Lock()

    @property
    def p_dual(self) -> float:
        return self.p / (self.p - 1)

    def _check_cube(self, Q: Cube):
        if Q.grid_id != self.grid.grid_id or Q.L != self.grid.L:
            raise ValueError(f"cube {Q.id} does not belong to this system's grid")

    def values(self, Q: Cube) -> np.ndarray:
        self._check_cube(Q)
        key = (Q.level, Q.index)
        v = self._memo.get(key)
        if v is not None:
            return v
        with self._lock:
            v = self._memo.get(key)
            if v is None:
                if Q.level == self.grid.L:
                    v = DyadicFunction.indicator(Q).values
                else:
                    v = np.array(self._generator(Q), dtype=np.float64)
                    v.setflags(write=False)
                self._memo[key] = v
        return v

    def b(self, Q: Cube) -> DyadicFunction:
        return DyadicFunction(self.values(Q))


def trivial_system(grid: DyadicGrid, p: float = 2.0) -> AccretiveSystem:
    """b_Q = 1_Q."""
    return AccretiveSystem(grid, p, 1.0, lambda Q: DyadicFunction.indicator(Q).values, "trivial")


def _pattern(Q: Cube, depth: int, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero pattern on Q, constant on the descendants ``depth`` levels down.

    Descendants get balanced random signs; when Q is clipped by the domain
    the pieces have unequal sizes, so the pattern is re-centred and scaled
    back into [-1, 1].
    """
    N = 1 << Q.L
    h = np.zeros((N,) * Q.n)
    m = Q.side_units >> depth
    pieces = []
    ranges = []
    for c in Q.corner:
        ranges.append([(max(c + i * m, 0), min(c + (i + 1) * m, N)) for i in range(1 << depth)])
    for combo in itertools.product(*ranges):
        if all(lo < hi for lo, hi in combo):
            pieces.append(tuple(slice(lo, hi) for lo, hi in combo))
    total = 1 << (depth * Q.n)
    signs = np.array([1.0] * (total // 2) + [-1.0] * (total - total // 2))
    rng.shuffle(signs)
    for s, sl in zip(signs, pieces):
        h[sl] = s
    clipped = any(lo != c or hi != c + Q.side_units for (lo, hi), c in zip(Q.clip(), Q.corner))
    if clipped:
        sl = Q.slices()
        region = h[sl]
        region -= region.mean()
        mx = np.abs(region).max()
        if mx > 0:
            region /= mx
        h[sl] = region
    return h


def oscillatory_system(grid: DyadicGrid, p: float, A: float, amplitude: float, seed: int = 0, depth: int = 2) -> AccretiveSystem:
    """b_Q = 1_Q (1 + a h_Q) with h_Q a balanced random sign pattern."""
    if not 0 <= amplitude < 1:
        raise ConfigError(f"amplitude must lie in [0, 1), got {amplitude}")
    if depth < 1:
        raise ConfigError("pattern depth must be at least 1")
    if A < 1 + amplitude:
        raise ConfigError(f"A={A} is below the guaranteed bound 1 + a = {1 + amplitude}")

    def gen(Q: Cube):
        d = min(depth, grid.L - Q.level)
        ss = np.random.SeedSequence(int(seed), spawn_key=(grid.grid_id, 101, Q.level) + tuple(i + 2 for i in Q.index))
        rng = np.random.Generator(np.random.Philox(ss))
        ind = DyadicFunction.indicator(Q).values
        if amplitude == 0:
            return ind
        return ind * (1.0 + amplitude * _pattern(Q, d, rng))

    return AccretiveSystem(grid, p, A, gen, f"oscillatory(a={amplitude},depth={depth})")


def system_from_function(grid: DyadicGrid, p: float, A: float, fn: Callable, name="custom") -> AccretiveSystem:
    return AccretiveSystem(grid, p, A, fn, name)


def save_system(sys: AccretiveSystem, directory, cubes) -> None:
    """Write b_Q for the given cubes plus ``manifest.json`` {p, A}."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for Q in cubes:
        sys.b(Q).save(d / Q.id)
    (d / "manifest.json").write_text(json.dumps({"p": sys.p, "A": sys.A}, sort_keys=True))


def load_system(directory, grid: DyadicGrid) -> AccretiveSystem:
    """Ingest an externally supplied system; cubes without a file raise KeyError."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())

    def gen(Q: Cube):
        path = d / Q.id
        if not path.with_suffix(".bin").exists():
            raise KeyError(f"no function supplied for cube {Q.id}")
        f = DyadicFunction.load(path)
        if f.L != grid.L or f.n != grid.n:
            raise ConfigError(f"{Q.id}: resolution/dimension mismatch")
        return f.values

    return AccretiveSystem(grid, manifest["p"], manifest["A"], gen, f"external:{d.name}")


@dataclass(frozen=True)
class SystemReport:
    passed: bool
    cubes_checked: int
    worst_support: float
    worst_mean_rel: float
    worst_norm_ratio: float
    mean_norm_slack: float
    failure: str | None = None


def validate_system(sys: AccretiveSystem, max_level: int | None = None, raise_on_fail: bool = True) -> SystemReport:
    """Check support, mean and L^p bound of every b_Q with level < max_level.

    Returns worst-case values: support leak (max |b_Q| off Q), relative mean
    error, and max ``||b_Q||_p / (A |Q|^{1/p})``.
    """
    g = sys.grid
    max_level = g.L - 1 if max_level is None else max_level
    worst_sup = worst_mean = worst_ratio = 0.0
    slack = []
    count = 0
    vol = 2.0 ** (-g.L * g.n)
    failure = None
    for k in range(g.params.top_level, max_level + 1):
        for Q in g.cubes(k):
            v = sys.values(Q)
            sl = Q.slices()
            inside = v[sl]
            cells = inside.size
            outside = np.ones(v.shape, dtype=bool)
            outside[sl] = False
            off = float(np.abs(v[outside]).max()) if outside.any() else 0.0
            mean_rel = abs(inside.sum() / cells - 1.0)
            norm = (np.sum(np.abs(inside) ** sys.p) * vol) ** (1 / sys.p)
            bound = sys.A * (cells * vol) ** (1 / sys.p)
            ratio = norm / bound
            count += 1
            worst_sup = max(worst_sup, off)
            worst_mean = max(worst_mean, mean_rel)
            worst_ratio = max(worst_ratio, ratio)
            slack.append(1 - ratio)
            if failure is None:
                if off > 0:
                    failure = ValidationError(f"b_Q not supported on {Q.id}", Q.id, off, 0.0)
                elif mean_rel > 1e-12:
                    failure = ValidationError(
                        f"mean condition fails on {Q.id}: <b_Q>_Q = {inside.mean():.15g}", Q.id, inside.mean(), 1.0
                    )
                elif ratio > 1 + 1e-12:
                    failure = ValidationError(
                        f"L^p bound fails on {Q.id}: ||b_Q||_p = {norm:.6g} > {bound:.6g}", Q.id, norm, bound
                    )
    if failure is not None and raise_on_fail:
        raise failure
    return SystemReport(
        failure is None, count, float(worst_sup), float(worst_mean), float(worst_ratio), float(np.mean(slack)) if slack else 0.0,
        None if failure is None else str(failure),
    )


def stopping_lower_bound(sys: AccretiveSystem, S: Cube) -> tuple:
    """(|S \\ E_S|, (2A)^{-p'} |S|) where E_S is the union of descendants with <b_S> < 1/2."""
    g = sys.grid
    v = sys.values(S)
    sl = S.slices()
    covered = np.zeros(v.shape, dtype=bool)
    for k in range(S.level + 1, g.L + 1):
        low = expand_blocks(block_averages(v, g, k) < 0.5, g, k)
        covered |= low
    vol = 2.0 ** (-g.L * g.n)
    remaining = float((~covered[sl]).sum() * vol)
    measure = float(np.prod([hi - lo for lo, hi in S.clip()]) * vol)
    return remaining, (2 * sys.A) ** (-sys.p_dual) * measure
