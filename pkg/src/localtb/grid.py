"""Random shifted dyadic grids on the unit cube with exact integer geometry.

All coordinates are stored as integers in units of the finest cell side
``2**-L``.  Shifts are only drawn for levels ``top_level+1 .. L``, so every
cube corner is an integer multiple of ``2**-L`` and every shifted cube is a
union of standard finest cells (possibly sticking out of ``[0, 1)^n``).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "GridParams",
    "Cube",
    "DyadicGrid",
    "GoodnessVerdict",
    "PiBadEstimate",
    "grid_rng",
    "new_random_grid",
    "standard_grid",
    "grid_from_omega",
    "dist_to_boundary",
    "classify_goodness",
    "classify_goodness_bruteforce",
    "bad_mask",
    "bad_mask_bruteforce",
    "badness_threshold",
    "estimate_pi_bad",
    "pi_bad_level_check",
]


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(x).limit_denominator(10**6)


@dataclass(frozen=True)
class GridParams:
    """Parameters shared by a pair of random grids.

    ``epsilon`` defaults to ``eta / (2 (eta + n))`` and is kept as an exact
    fraction so that goodness comparisons are exact.
    """

    n: int
    L: int
    top_level: int = 0
    eta: float = 1.0
    r: int = 4
    epsilon: Fraction | None = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"dimension n must be a positive integer, got {self.n}")
        if int(self.L) != self.L or self.L < 1:
            raise ConfigError(f"resolution L must be a positive integer, got {self.L}")
        if int(self.top_level) != self.top_level or self.top_level < 0:
            raise ConfigError(f"top_level must be >= 0, got {self.top_level}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if int(self.r) != self.r or self.r < 1:
            raise ConfigError(f"r must be a positive integer, got {self.r}")
        eta = _as_fraction(self.eta)
        eps = eta / (2 * (eta + self.n)) if self.epsilon is None else _as_fraction(self.epsilon)
        if not (0 < eps <= Fraction(1, 2)):
            raise ConfigError(f"epsilon must lie in (0, 1/2], got {eps}")
        object.__setattr__(self, "epsilon", eps)
        if self.L <= self.top_level + self.r:
            raise ConfigError(
                f"need L > top_level + r (L={self.L}, top_level={self.top_level}, r={self.r})"
            )
        if self.r * eps < 3:
            warnings.warn(
                f"r={self.r} is below 3/epsilon={float(3 / eps):.3g}; goodness estimates "
                "are outside the asymptotic regime",
                stacklevel=3,
            )

    @property
    def N(self) -> int:
        """Number of finest cells per axis."""
        return 1 << self.L

    def with_(self, **kw) -> "GridParams":
        if "eta" in kw and "epsilon" not in kw:
            kw["epsilon"] = None
        return replace(self, **kw)


@dataclass(frozen=True)
class Cube:
    """A cube of a (possibly shifted) grid.

    ``corner`` is the lower corner in units of ``2**-L``; the side is
    ``2**(L - level)`` units.
    """

    grid_id: int
    level: int
    index: tuple
    corner: tuple
    L: int

    @property
    def n(self) -> int:
        return len(self.corner)

    @property
    def side_units(self) -> int:
        return 1 << (self.L - self.level)

    @property
    def side(self) -> Fraction:
        return Fraction(1, 1 << self.level)

    @property
    def lower(self) -> tuple:
        return tuple(Fraction(c, 1 << self.L) for c in self.corner)

    @property
    def id(self) -> str:
        return "_".join([f"g{self.grid_id}", f"k{self.level}"] + [str(i) for i in self.index])

    def clip(self):
        """Per-axis half-open cell ranges of ``Q ∩ [0,1)^n``."""
        N = 1 << self.L
        m = self.side_units
        return tuple((max(c, 0), min(c + m, N)) for c in self.corner)

    def intersects_domain(self) -> bool:
        return all(lo < hi for lo, hi in self.clip())

    def slices(self):
        return tuple(slice(lo, hi) for lo, hi in self.clip())

    def volume_in_domain(self) -> Fraction:
        cells = 1
        for lo, hi in self.clip():
            cells *= max(hi - lo, 0)
        return Fraction(cells, 1 << (self.L * self.n))

    def contains(self, other: "Cube") -> bool:
        m, mo = self.side_units, other.side_units
        return all(c <= oc and oc + mo <= c + m for c, oc in zip(self.corner, other.corner))

    def disjoint(self, other: "Cube") -> bool:
        m, mo = self.side_units, other.side_units
        return any(oc + mo <= c or oc >= c + m for c, oc in zip(self.corner, other.corner))


def grid_rng(seed: int, grid_id: int, trial: int = 0) -> np.random.Generator:
    """Independent counter-based stream for (master seed, grid, trial)."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=(int(grid_id), int(trial)))
    return np.random.Generator(np.random.Philox(ss))


def _draw_omega(params: GridParams, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=(params.L - params.top_level, params.n), dtype=np.int64)


def _offsets(params: GridParams, omega: np.ndarray) -> np.ndarray:
    """``offsets[k] = sum_{j>k} 2**(L-j) omega_j`` for k = 0..L (units of 2**-L)."""
    L, top = params.L, params.top_level
    off = np.zeros((L + 1, params.n), dtype=np.int64)
    for k in range(L - 1, -1, -1):
        j = k + 1
        w = omega[j - top - 1] if j > top else 0
        off[k] = off[k + 1] + (1 << (L - j)) * w
    return off


@dataclass(frozen=True, eq=False)
class DyadicGrid:
    """A shifted dyadic lattice; immutable after construction."""

    params: GridParams
    grid_id: int
    omega: np.ndarray
    offsets: np.ndarray = field(repr=False)

    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.omega.setflags(write=False)
        self.offsets.setflags(write=False)

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def L(self) -> int:
        return self.params.L

    @property
    def levels(self) -> range:
        return range(self.params.top_level, self.params.L + 1)

    def side_units(self, level: int) -> int:
        return 1 << (self.L - level)

    def index_range(self, level: int):
        """Per-axis inclusive index ranges of level cubes meeting the domain."""
        m = self.side_units(level)
        N = self.params.N
        o = self.offsets[level]
        return tuple(((0 - int(o[a])) // m, (N - 1 - int(o[a])) // m) for a in range(self.n))

    def counts(self, level: int) -> tuple:
        return tuple(hi - lo + 1 for lo, hi in self.index_range(level))

    def cube(self, level: int, index) -> Cube:
        index = tuple(int(i) for i in np.atleast_1d(index))
        if len(index) != self.n:
            raise DimensionError(f"index has {len(index)} entries, grid has n={self.n}")
        m = self.side_units(level)
        corner = tuple(int(self.offsets[level][a]) + m * index[a] for a in range(self.n))
        return Cube(self.grid_id, int(level), index, corner, self.L)

    def cube_containing(self, level: int, point_units) -> Cube:
        m = self.side_units(level)
        o = self.offsets[level]
        idx = tuple((int(p) - int(o[a])) // m for a, p in enumerate(point_units))
        return self.cube(level, idx)

    def cubes(self, level: int) -> list:
        """Cubes of the given level meeting ``[0,1)^n`` in row-major index order."""
        ranges = [range(lo, hi + 1) for lo, hi in self.index_range(level)]
        return [self.cube(level, idx) for idx in itertools.product(*ranges)]

    def all_cubes(self, max_level: int | None = None) -> list:
        top = self.params.top_level
        max_level = self.L if max_level is None else max_level
        return [Q for k in range(top, max_level + 1) for Q in self.cubes(k)]

    def local_index(self, cube: Cube) -> tuple:
        """Position of the cube inside the per-level block array."""
        return tuple(i - lo for i, (lo, _) in zip(cube.index, self.index_range(cube.level)))

    def cube_from_local(self, level: int, local) -> Cube:
        lo = [a for a, _ in self.index_range(level)]
        return self.cube(level, tuple(int(i) + l for i, l in zip(local, lo)))

    def parent(self, cube: Cube) -> Cube:
        if cube.level <= self.params.top_level:
            raise ValueError("top-level cubes have no parent inside the grid")
        w = self.omega[cube.level - self.params.top_level - 1]
        return self.cube(cube.level - 1, tuple((i - int(w[a])) // 2 for a, i in enumerate(cube.index)))

    def children(self, cube: Cube, in_domain: bool = False) -> list:
        if cube.level >= self.L:
            raise ValueError("finest-level cubes have no children")
        w = self.omega[cube.level + 1 - self.params.top_level - 1]
        base = [2 * i + int(w[a]) for a, i in enumerate(cube.index)]
        out = []
        for e in itertools.product((0, 1), repeat=self.n):
            ch = self.cube(cube.level + 1, tuple(b + d for b, d in zip(base, e)))
            if not in_domain or ch.intersects_domain():
                out.append(ch)
        return out

    def ancestor(self, cube: Cube, level: int) -> Cube:
        return self.cube_containing(level, cube.corner)

    def axis_blocks(self, level: int):
        """Per axis: (starts, lengths) of the level-cube pieces along the cell axis."""
        key = ("axis_blocks", level)
        if key in self._cache:
            return self._cache[key]
        m = self.side_units(level)
        N = self.params.N
        out = []
        for a in range(self.n):
            o = int(self.offsets[level][a])
            first = o % m
            starts = [0] + list(range(first if first > 0 else m, N, m))
            starts = np.array(sorted(set(starts)), dtype=np.int64)
            lengths = np.diff(np.append(starts, N))
            out.append((starts, lengths))
        self._cache[key] = out
        return out


def grid_from_omega(params: GridParams, grid_id: int, omega) -> DyadicGrid:
    omega = np.array(omega, dtype=np.int64).reshape(params.L - params.top_level, params.n)
    if np.any((omega != 0) & (omega != 1)):
        raise ConfigError("shift components must be 0 or 1")
    return DyadicGrid(params, int(grid_id), omega, _offsets(params, omega))


def standard_grid(params: GridParams, grid_id: int = 1) -> DyadicGrid:
    """The unshifted grid (all shifts zero)."""
    return grid_from_omega(params, grid_id, np.zeros((params.L - params.top_level, params.n)))


def new_random_grid(params: GridParams, grid_id: int, seed: int, trial: int = 0) -> DyadicGrid:
    if grid_id not in (1, 2):
        raise ConfigError(f"grid_id must be 1 or 2, got {grid_id}")
    omega = _draw_omega(params, grid_rng(seed, grid_id, trial))
    return DyadicGrid(params, grid_id, omega, _offsets(params, omega))


# --------------------------------------------------------------------------
# geometry


def _dist_units(qc, qs, pc, ps) -> int:
    """Sup-norm distance from closed cube Q to the boundary of P, integer units."""
    inside = all(p <= q and q + qs <= p + ps for q, p in zip(qc, pc))
    if inside:
        return min(min(q - p, p + ps - q - qs) for q, p in zip(qc, pc))
    gaps = [max(0, p - (q + qs), q - (p + ps)) for q, p in zip(qc, pc)]
    separated = any(q + qs <= p or q >= p + ps for q, p in zip(qc, pc))
    return max(gaps) if separated else 0


def dist_to_boundary(Q: Cube, P: Cube) -> Fraction:
    """Exact ``inf_{x in closure(Q)} dist_sup(x, boundary P)``."""
    if Q.n != P.n:
        raise DimensionError(f"dimension mismatch: {Q.n} vs {P.n}")
    if Q.L != P.L:
        raise DimensionError(f"resolution mismatch: {Q.L} vs {P.L}")
    d = _dist_units(Q.corner, Q.side_units, P.corner, P.side_units)
    return Fraction(d, 1 << Q.L)


@lru_cache(maxsize=None)
def badness_threshold(L: int, level_q: int, level_p: int, epsilon: Fraction) -> int:
    """Largest integer distance d (units 2**-L) with d*2**-L <= lQ**eps * lP**(1-eps).

    With eps = a/b this is ``d**b <= 2**(b(L-kP) - a(kQ-kP))``, solved with
    integer arithmetic only.
    """
    a, b = epsilon.numerator, epsilon.denominator
    E = b * (L - level_p) - a * (level_q - level_p)
    if E < 0:
        return 0
    target = 1 << E
    d = int(round(2.0 ** (E / b)))
    while d**b > target:
        d -= 1
    while (d + 1) ** b <= target:
        d += 1
    return d


@dataclass(frozen=True)
class GoodnessVerdict:
    cube: Cube
    good: bool
    witness: Cube | None
    metadata: dict

    @property
    def verdict(self) -> str:
        return "Good" if self.good else "Bad"


def _cap_metadata(params: GridParams) -> dict:
    return {
        "cap_level": params.top_level,
        "cap_side": str(Fraction(1, 1 << params.top_level)),
        "r": params.r,
        "epsilon": str(params.epsilon),
    }


def _lattice_dist(corner, side_q, offset, side_p) -> int:
    """Distance from cube [corner, corner+side_q] to the nearest lattice hyperplane."""
    best = None
    for c, o in zip(corner, offset):
        rlo = (c - int(o)) % side_p
        d = max(0, min(rlo, side_p - rlo - side_q))
        best = d if best is None else min(best, d)
    return best


def classify_goodness(Q: Cube, other: DyadicGrid, params: GridParams) -> GoodnessVerdict:
    """Good/bad verdict for ``Q`` against every large cube of the other grid.

    For a fixed level of ``P`` the smallest distance from ``Q`` to a boundary
    is the distance to the level's hyperplane lattice, which is attained by the
    cube containing a point of ``Q``; that cube is returned as witness.
    """
    if Q.grid_id == other.grid_id:
        raise ValueError("goodness is measured against the other grid")
    if Q.n != other.n or Q.L != other.L:
        raise DimensionError("cube and grid have different dimension or resolution")
    meta = _cap_metadata(params)
    for kp in range(params.top_level, Q.level - params.r + 1):
        mp = other.side_units(kp)
        d = _lattice_dist(Q.corner, Q.side_units, other.offsets[kp], mp)
        if d <= badness_threshold(params.L, Q.level, kp, params.epsilon):
            point = tuple(max(c, 0) for c in Q.corner)
            return GoodnessVerdict(Q, False, other.cube_containing(kp, point), meta)
    return GoodnessVerdict(Q, True, None, meta)


def classify_goodness_bruteforce(Q: Cube, other: DyadicGrid, params: GridParams) -> GoodnessVerdict:
    """Reference verdict scanning every enumerable cube of the other grid with Fractions."""
    meta = _cap_metadata(params)
    a, b = params.epsilon.numerator, params.epsilon.denominator
    lq = Q.side
    for P in other.all_cubes():
        if P.side < (1 << params.r) * lq:
            continue
        dist = dist_to_boundary(Q, P)
        if dist**b <= lq**a * P.side ** (b - a):
            return GoodnessVerdict(Q, False, P, meta)
    return GoodnessVerdict(Q, True, None, meta)


def _axis_corners(grid: DyadicGrid, level: int, axis: int) -> np.ndarray:
    lo, hi = grid.index_range(level)[axis]
    return int(grid.offsets[level][axis]) + grid.side_units(level) * np.arange(lo, hi + 1, dtype=np.int64)


def _combine_min(per_axis):
    out = per_axis[0]
    for arr in per_axis[1:]:
        out = np.minimum.outer(out, arr)
    return out


def bad_mask(grid_j: DyadicGrid, level: int, grid_k: DyadicGrid, params: GridParams) -> np.ndarray:
    """Boolean array (shape ``grid_j.counts(level)``) marking bad cubes of a level."""
    shape = grid_j.counts(level)
    bad = np.zeros(shape, dtype=bool)
    mq = grid_j.side_units(level)
    corners = [_axis_corners(grid_j, level, a) for a in range(grid_j.n)]
    for kp in range(params.top_level, level - params.r + 1):
        mp = grid_k.side_units(kp)
        per_axis = []
        for a in range(grid_j.n):
            rlo = (corners[a] - int(grid_k.offsets[kp][a])) % mp
            per_axis.append(np.maximum(0, np.minimum(rlo, mp - rlo - mq)))
        dist = _combine_min(per_axis).reshape(shape)
        bad |= dist <= badness_threshold(params.L, level, kp, params.epsilon)
    return bad


def bad_mask_bruteforce(grid_j: DyadicGrid, level: int, grid_k: DyadicGrid, params: GridParams) -> np.ndarray:
    """Exhaustive reference for :func:`bad_mask`.

    Evaluates the general box-to-boundary distance for every (Q, P) pair of
    the relevant levels, with the inequality compared as ``d**b`` against a
    power of two (object arithmetic, no rounding).
    """
    a, b = params.epsilon.numerator, params.epsilon.denominator
    L = params.L
    Qs = grid_j.cubes(level)
    bad = np.zeros(len(Qs), dtype=bool)
    qc = np.array([Q.corner for Q in Qs], dtype=np.int64)
    mq = grid_j.side_units(level)
    for kp in grid_k.levels:
        if kp > level - params.r:
            break
        Ps = grid_k.cubes(kp)
        pc = np.array([P.corner for P in Ps], dtype=np.int64)
        mp = grid_k.side_units(kp)
        q = qc[:, None, :]
        p = pc[None, :, :]
        inside = np.all((p <= q) & (q + mq <= p + mp), axis=2)
        d_in = np.min(np.minimum(q - p, p + mp - q - mq), axis=2)
        gaps = np.maximum(0, np.maximum(p - (q + mq), q - (p + mp)))
        sep = np.any((q + mq <= p) | (q >= p + mp), axis=2)
        d_out = np.where(sep, np.max(gaps, axis=2), 0)
        dist = np.where(inside, d_in, d_out)
        e = b * L - a * level - (b - a) * kp
        rhs = Fraction(2) ** e
        dmin = dist.min(axis=1)
        bad |= np.array([int(d) ** b <= rhs for d in dmin], dtype=bool)
    return bad.reshape(grid_j.counts(level))


# --------------------------------------------------------------------------
# Monte Carlo estimate of the badness probability


@dataclass(frozen=True)
class PiBadEstimate:
    estimate: float
    ci95: float
    level: int
    r: int
    trials: int
    seed: int

    @property
    def stderr(self) -> float:
        return self.ci95 / 1.96


def _batch_offsets(params: GridParams, seed: int, grid_id: int, trials: int, start: int = 0) -> np.ndarray:
    """Offsets of ``trials`` independent grids, shape (trials, L+1, n)."""
    L, top = params.L, params.top_level
    om = np.stack(
        [_draw_omega(params, grid_rng(seed, grid_id, start + t)) for t in range(trials)]
    )
    off = np.zeros((trials, L + 1, params.n), dtype=np.int64)
    for k in range(L - 1, -1, -1):
        j = k + 1
        w = om[:, j - top - 1, :] if j > top else 0
        off[:, k] = off[:, k + 1] + (1 << (L - j)) * w
    return off


def _bad_indicator(corner, level, offs, params) -> np.ndarray:
    mq = 1 << (params.L - level)
    bad = np.zeros(offs.shape[0], dtype=bool)
    corner = np.asarray(corner, dtype=np.int64)
    for kp in range(params.top_level, level - params.r + 1):
        mp = 1 << (params.L - kp)
        rlo = (corner[None, :] - offs[:, kp, :]) % mp
        d = np.maximum(0, np.minimum(rlo, mp - rlo - mq)).min(axis=1)
        bad |= d <= badness_threshold(params.L, level, kp, params.epsilon)
    return bad


def _fixed_cube(params: GridParams, level: int) -> Cube:
    g = standard_grid(params, 1)
    return g.cube(level, (max((1 << level) // 2 - 1, 0),) * params.n)


def estimate_pi_bad(level: int, params: GridParams, trials: int, seed: int = 0) -> PiBadEstimate:
    """Monte Carlo probability that a fixed cube of ``level`` is bad.

    The cube sits in the unshifted first grid; only the second grid is
    resampled, one independent stream per trial.
    """
    if trials < 100:
        raise ConfigError(f"trials must be >= 100, got {trials}")
    if not params.top_level <= level <= params.L:
        raise ConfigError(f"level {level} outside [{params.top_level}, {params.L}]")
    Q = _fixed_cube(params, level)
    offs = _batch_offsets(params, seed, 2, trials)
    bad = _bad_indicator(Q.corner, level, offs, params)
    p = float(bad.mean())
    ci = 1.96 * np.sqrt(max(p * (1 - p), 0.0) / trials)
    return PiBadEstimate(p, float(ci), level, params.r, trials, int(seed))


def pi_bad_level_check(levels, params: GridParams, trials: int, seed: int = 0) -> dict:
    """Estimates at several levels (independent streams) and a joint CI check."""
    ests = [estimate_pi_bad(k, params, trials, seed + i) for i, k in enumerate(levels)]
    ok = True
    for e1, e2 in itertools.combinations(ests, 2):
        joint = 1.96 * np.hypot(e1.stderr, e2.stderr)
        ok &= abs(e1.estimate - e2.estimate) <= max(joint, 1e-15)
    return {"estimates": ests, "consistent": bool(ok)}
