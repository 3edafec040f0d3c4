"""Corona construction: selection of f_j, stopping tree, perturbation and truncation.

Everything is computed levelwise on cell arrays.  Collections of cubes are
stored as per-level boolean block arrays (``level -> ndarray`` over the
grid's blocks), stopping cubes as a list whose positions serve as ids.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accretive import AccretiveSystem
from .czop import DiscretizedOperator, estimate_opnorm, testing_constant
from .dyfun import (
    DyadicFunction,
    _vals,
    block_averages,
    block_sample,
    expand_blocks,
    level_averages,
    level_difference,
    lq_norm,
    maximal,
)
from .errors import ConfigError, ConsistencyError
from .grid import Cube, DyadicGrid, GridParams, bad_mask
from .twisted import TwistedContext, block_sums_bool, twisted_fields

__all__ = [
    "CoronaParams",
    "SelectedF",
    "StoppingTree",
    "TypeSets",
    "CoronaData",
    "a_collection",
    "select_f",
    "build_auxiliary_tree",
    "perturb_b",
    "classify_types",
    "truncate",
    "build_corona",
    "lambda_constants",
    "lambda_sweep",
    "representation_check",
    "zero_difference_check",
    "typeA_lemma_check",
    "sparseness",
    "export_corona",
]


@dataclass(frozen=True)
class CoronaParams:
    """Stopping and truncation constants.

    ``upsilon1`` defaults to half of its admissible cap ``4^{-1-n}`` and
    ``TB_proxy=None`` means "use the operator-norm estimate".
    """

    n: int = 1
    p1: float = 2.0
    p2: float = 2.0
    delta: float = 0.1
    tau: float = 0.95
    Lambda: float = 4.0
    upsilon1: float | None = None
    TB_proxy: float | None = None

    def __post_init__(self):
        if not (self.p1 > 1 and self.p2 > 1 and np.isfinite(self.p1) and np.isfinite(self.p2)):
            raise ConfigError(f"p1, p2 must lie in (1, inf), got {self.p1}, {self.p2}")
        if 1 / self.p1 + 1 / self.p2 > 1 + 1e-12:
            raise ConfigError(f"1/p1 + 1/p2 = {1 / self.p1 + 1 / self.p2:.6g} exceeds 1")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.Lambda > 1:
            raise ConfigError(f"Lambda must exceed 1, got {self.Lambda}")
        cap = 4.0 ** (-1 - self.n)
        if self.upsilon1 is None:
            object.__setattr__(self, "upsilon1", cap / 2)
        if not 0 < self.upsilon1 < cap:
            raise ConfigError(f"upsilon1 must lie in (0, 4^(-1-n)) = (0, {cap:.6g}), got {self.upsilon1}")
        if self.TB_proxy is not None and self.TB_proxy < 0:
            raise ConfigError("TB_proxy must be non-negative")

    def exponents(self, j: int) -> tuple:
        """``(p_j, p_k')`` for the grid index j and the other index k."""
        pj, pk = (self.p1, self.p2) if j == 1 else (self.p2, self.p1)
        return pj, pk / (pk - 1)


def _slice_mask(Q: Cube, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[Q.slices()] = True
    return m


def _block_min(v: np.ndarray, grid: DyadicGrid, level: int) -> np.ndarray:
    out = v
    for a, (starts, _) in enumerate(grid.axis_blocks(level)):
        out = np.minimum.reduceat(out, starts, axis=a)
    return out


def _first_true(mask: np.ndarray):
    return tuple(int(a[0]) for a in np.nonzero(mask))


def _cubes_of(grid: DyadicGrid, level: int, mask: np.ndarray) -> list:
    return [grid.cube_from_local(level, loc) for loc in zip(*np.nonzero(mask))]


def standard_q0(grid: DyadicGrid) -> Cube:
    """``[0, 2^{-top})^n``, the reference cube of the construction."""
    top = grid.params.top_level
    return Cube(0, top, (0,) * grid.n, (0,) * grid.n, grid.L)


# ---------------------------------------------------------------- selection of f_j


def a_collection(grid: DyadicGrid, Q0: Cube | None = None) -> tuple:
    """``(A_*, inA)``: top-level cubes meeting Q0 and block masks of their descendants."""
    Q0 = standard_q0(grid) if Q0 is None else Q0
    top = grid.params.top_level
    if Q0.level != top:
        raise ConfigError("Q0 must sit at the top level of the grid")
    shape = (grid.params.N,) * grid.n
    q0cells = _slice_mask(Q0, shape).astype(float)
    hit = block_averages(q0cells, grid, top) > 0
    a_star = _cubes_of(grid, top, hit)
    cells = expand_blocks(hit, grid, top)
    inA = {k: block_sample(cells, grid, k) for k in range(top, grid.L + 1)}
    return a_star, inA


@dataclass
class SelectedF:
    f: DyadicFunction
    f_tilde: DyadicFunction
    diff_norm: float
    a_star: list
    inA: dict
    good: dict


def good_masks(grid_j: DyadicGrid, grid_k: DyadicGrid, params: GridParams) -> dict:
    return {k: ~bad_mask(grid_j, k, grid_k, params) for k in range(params.top_level, grid_j.L)}


def select_f(grid_j: DyadicGrid, grid_k: DyadicGrid, f_tilde, params: GridParams, Q0: Cube | None = None,
             good: dict | None = None) -> SelectedF:
    """Top averages of ``f_tilde`` on A_* plus its differences on the good cubes of A."""
    v = _vals(f_tilde)
    a_star, inA = a_collection(grid_j, Q0)
    good = good_masks(grid_j, grid_k, params) if good is None else good
    top = params.top_level
    out = level_averages(v, grid_j, top) * expand_blocks(inA[top], grid_j, top)
    for k in range(top, grid_j.L):
        w = expand_blocks(good[k] & inA[k], grid_j, k)
        if np.any(w):
            out = out + w * level_difference(v, grid_j, k)
    f = DyadicFunction(out)
    return SelectedF(f, DyadicFunction(v), lq_norm(v - out, 2), a_star, inA, good)


# ---------------------------------------------------------------- stopping tree


CRITERIA = ("mean", "maximal", "operator", "inf")


@dataclass
class StoppingTree:
    """Auxiliary stopping cubes.

    ``parent[i]`` is the id of the stopping parent of ``stops[i]`` (-1 for
    the roots), ``criteria[i]`` the criteria that selected it, and
    ``terminal`` the ids of stopping cubes at the finest level.
    """

    grid: DyadicGrid
    stops: list
    parent: list
    criteria: list
    terminal: set
    Tb: dict
    thresholds: dict
    warnings: list = field(default_factory=list)

    def children_ids(self, i: int) -> list:
        return [c for c, p in enumerate(self.parent) if p == i]

    def __len__(self):
        return len(self.stops)


def build_auxiliary_tree(sys: AccretiveSystem, op_j: DiscretizedOperator, cparams: CoronaParams, j: int,
                         a_star: list, T_loc: float | None = None) -> StoppingTree:
    """Grow the stopping tree from A_* by selecting maximal failing descendants.

    A descendant Q of S stops when ``<b_S>_Q < 1/2``, or
    ``<|M b_S|^{p_j}>_Q > A^{p_j}/delta``, or
    ``<|T^j b_S|^{p_k'}>_Q > T_loc^{p_k'}/delta``, or
    ``min_Q M(|b_S|^{p_j}) > A^{p_j}/delta``.
    """
    g = sys.grid
    pj, pkd = cparams.exponents(j)
    if abs(sys.p - pj) > 1e-12:
        raise ConfigError(f"system exponent {sys.p} differs from p_{j} = {pj}")
    if T_loc is None:
        T_loc = testing_constant(op_j, sys, p_dual=pkd)
    thr_b = sys.A**pj / cparams.delta
    thr_c = T_loc**pkd / cparams.delta
    shape = (g.params.N,) * g.n
    stops = list(a_star)
    parent = [-1] * len(stops)
    criteria = [("root",)] * len(stops)
    terminal = set()
    Tb: dict = {}
    queue = list(range(len(stops)))
    head = 0
    while head < len(queue):
        i = queue[head]
        head += 1
        S = stops[i]
        if S.level >= g.L:
            terminal.add(i)
            continue
        b = sys.values(S)
        tb = op_j.apply_values(b)
        Tb[i] = tb
        Mb = maximal(np.abs(b), g).values ** pj
        Mbp = maximal(np.abs(b) ** pj, g).values
        Tp = np.abs(tb) ** pkd
        free = _slice_mask(S, shape)
        for k in range(S.level + 1, g.L + 1):
            cand = block_sample(free, g, k)
            if not np.any(cand):
                break
            fails = {
                "mean": block_averages(b, g, k) < 0.5,
                "maximal": block_averages(Mb, g, k) > thr_b,
                "operator": block_averages(Tp, g, k) > thr_c,
                "inf": _block_min(Mbp, g, k) > thr_b,
            }
            fired = cand & (fails["mean"] | fails["maximal"] | fails["operator"] | fails["inf"])
            if not np.any(fired):
                continue
            for loc in zip(*np.nonzero(fired)):
                Q = g.cube_from_local(k, loc)
                stops.append(Q)
                parent.append(i)
                criteria.append(tuple(c for c in CRITERIA if fails[c][loc]))
                queue.append(len(stops) - 1)
            free &= ~expand_blocks(fired, g, k)
    msgs = []
    if any(stops[i].level == g.L for i in range(len(stops))):
        terminal = {i for i, S in enumerate(stops) if S.level == g.L}
        msgs.append(f"{len(terminal)} stopping cubes reached the finest level {g.L}; kept as terminal cubes")
        warnings.warn(msgs[-1], RuntimeWarning, stacklevel=2)
    return StoppingTree(g, stops, parent, criteria, terminal, Tb,
                        {"maximal": thr_b, "operator": thr_c, "T_loc": T_loc, "mean": 0.5}, msgs)


def sparseness(tree: StoppingTree) -> np.ndarray:
    """``sum_{S' in ch(S)} |S'| / |S|`` for every stopping cube."""
    vol = np.array([float(S.volume_in_domain()) for S in tree.stops])
    child = np.zeros(len(tree.stops))
    for c, p in enumerate(tree.parent):
        if p >= 0:
            child[p] += vol[c]
    return child / vol


# ---------------------------------------------------------------- perturbation


def perturb_b(tree: StoppingTree, sys: AccretiveSystem, grid_k: DyadicGrid, params: GridParams,
              good: dict | None = None, ctx: TwistedContext | None = None) -> tuple:
    """``(beta, beta_tilde)`` lists indexed like ``tree.stops``.

    ``beta_tilde_S`` sums the classical differences of ``b_S`` over the bad
    cubes whose stopping parent is S; ``beta_S = b_S - beta_tilde_S``.
    """
    g = tree.grid
    good = good_masks(g, grid_k, params) if good is None else good
    if ctx is None:
        ctx = TwistedContext(g, tree.stops, [sys.values(S) for S in tree.stops], sys.p)
    beta, tilde = [], []
    for i, S in enumerate(tree.stops):
        b = sys.values(S)
        t = np.zeros_like(b)
        for k in range(S.level, g.L):
            m = (~good[k]) & (ctx.owner_blocks(k) == i)
            if np.any(m):
                t += expand_blocks(m, g, k) * level_difference(b, g, k)
        tilde.append(t)
        beta.append(b - t)
    return beta, tilde


# ---------------------------------------------------------------- types and truncation


@dataclass
class TypeSets:
    """Per-level type masks and the maximal cubes of each type and of their union."""

    typeA: dict
    typeB: dict
    typeC: dict
    maximal: dict
    B: list


def _maximal_cubes(grid: DyadicGrid, masks: dict) -> list:
    shape = (grid.params.N,) * grid.n
    covered = np.zeros(shape, dtype=bool)
    out = []
    for k in sorted(masks):
        m = masks[k] & ~block_sample(covered, grid, k)
        out.extend(_cubes_of(grid, k, m))
        covered |= expand_blocks(masks[k], grid, k)
    return out


def classify_types(grid: DyadicGrid, tree: StoppingTree, tilde: list, f, inA: dict, good: dict,
                   op_j: DiscretizedOperator, cparams: CoronaParams, j: int, TB_proxy: float,
                   ctx: TwistedContext) -> TypeSets:
    """Type A, B and C cubes among the cubes of A below the finest level.

    A zero quantity never triggers Type A, so that a vanishing operator or a
    vanishing perturbation leaves every cube untyped.
    """
    pj, pkd = cparams.exponents(j)
    u = cparams.upsilon1
    thr_m = u**pj
    thr_t = (u * TB_proxy) ** pkd
    mt = [maximal(np.abs(t), grid).values ** pj if np.any(t) else np.zeros_like(t) for t in tilde]
    tt = [np.abs(op_j.apply_values(t)) ** pkd if np.any(t) else np.zeros_like(t) for t in tilde]
    ctx_m = ctx.with_funcs(mt)
    ctx_t = ctx.with_funcs(tt)

    def trig(val, thr):
        return (val >= thr) & (val > 0)

    flag = np.array([
        bool(trig(mt[i][S.slices()].mean(), thr_m) or trig(tt[i][S.slices()].mean(), thr_t))
        for i, S in enumerate(tree.stops)
    ])
    shape = (grid.params.N,) * grid.n
    flagged_cells = {}
    for k in range(grid.params.top_level, grid.L + 1):
        c = np.zeros(shape, dtype=bool)
        for i, S in enumerate(tree.stops):
            if flag[i] and S.level == k:
                c[S.slices()] = True
        flagged_cells[k] = c
    typeA, typeB, typeC = {}, {}, {}
    for k in range(grid.params.top_level, grid.L):
        own = ctx.owner_blocks(k)
        has_owner = own >= 0
        a = trig(block_averages(ctx_m.B[k], grid, k), thr_m) | trig(block_averages(ctx_t.B[k], grid, k), thr_t)
        a = (a & has_owner) | block_sums_bool(flagged_cells[k + 1], grid, k)
        a &= inA[k]
        child_stop = block_sums_bool(ctx.new_stop[k + 1], grid, k)
        b = ~a & child_stop & ~good[k] & inA[k]
        c = ~a & ~b & (block_averages(np.abs(_vals(f)), grid, k) > cparams.Lambda) & inA[k]
        typeA[k], typeB[k], typeC[k] = a, b, c
    maxi = {
        "A": _maximal_cubes(grid, typeA),
        "B": _maximal_cubes(grid, typeB),
        "C": _maximal_cubes(grid, typeC),
    }
    union = {k: typeA[k] | typeB[k] | typeC[k] for k in typeA}
    return TypeSets(typeA, typeB, typeC, maxi, _maximal_cubes(grid, union))


def _b_cover(grid: DyadicGrid, Bcubes: list) -> tuple:
    """Per-level masks: blocks contained in a B cube, and strictly contained in one."""
    shape = (grid.params.N,) * grid.n
    by_level: dict = {}
    for Q in Bcubes:
        by_level.setdefault(Q.level, []).append(Q)
    covered = np.zeros(shape, dtype=bool)
    within, strictly = {}, {}
    for k in range(grid.params.top_level, grid.L + 1):
        strictly[k] = block_sample(covered, grid, k)
        for Q in by_level.get(k, ()):
            covered[Q.slices()] = True
        within[k] = block_sample(covered, grid, k)
    return within, strictly


# ---------------------------------------------------------------- corona data


@dataclass
class CoronaData:
    """Finished corona for one grid.  Treat as read-only once built."""

    j: int
    grid: DyadicGrid
    other: DyadicGrid
    gparams: GridParams
    cparams: CoronaParams
    sys: AccretiveSystem
    op_j: DiscretizedOperator
    selected: SelectedF
    tree: StoppingTree
    beta: list
    beta_tilde: list
    types: TypeSets
    inB: dict
    strictB: dict
    G: dict
    R: dict
    kept: np.ndarray
    ctx: TwistedContext
    ctx_b: TwistedContext
    fields: object
    fields_b: object
    T_loc: float
    TB_proxy: float
    warnings: list = field(default_factory=list)

    @property
    def f(self) -> DyadicFunction:
        return self.selected.f

    @property
    def p_j(self) -> float:
        return self.cparams.exponents(self.j)[0]

    @property
    def p_k_dual(self) -> float:
        return self.cparams.exponents(self.j)[1]

    @property
    def a_star(self) -> list:
        return self.selected.a_star

    @property
    def B(self) -> list:
        return self.types.B

    @property
    def stops(self) -> list:
        """Truncated stopping family."""
        return [S for i, S in enumerate(self.tree.stops) if self.kept[i]]

    def stop_ids(self) -> list:
        return [i for i in range(len(self.tree.stops)) if self.kept[i]]

    def measure_B(self) -> float:
        return float(sum(Q.volume_in_domain() for Q in self.types.B))

    def good_cubes(self) -> list:
        return [Q for k in sorted(self.G) for Q in _cubes_of(self.grid, k, self.G[k])]

    def stop_depths(self) -> dict:
        """Depth of every kept stopping cube in the truncated tree (roots have depth 0)."""
        depth = {}
        for i in range(len(self.tree.stops)):
            if not self.kept[i]:
                continue
            d, p = 0, self.tree.parent[i]
            while p >= 0:
                d += 1
                p = self.tree.parent[p]
            depth[i] = d
        return depth


def truncate(grid: DyadicGrid, tree: StoppingTree, types: TypeSets, inA: dict, good: dict) -> tuple:
    """``(inB, strictB, G, R, kept)``; checks that stopping parents coincide on R and its children."""
    inB, strictB = _b_cover(grid, types.B)
    G = {k: good[k] & inA[k] & ~inB[k] for k in good}
    R = {k: inA[k] & ~inB[k] for k in inA}
    kept = np.array([not strictB[S.level][grid.local_index(S)] for S in tree.stops], dtype=bool)
    # parent coincidence: the truncated family selects the same stopping parent
    stops_t = [S for i, S in enumerate(tree.stops) if kept[i]]
    ids_t = np.array([i for i in range(len(tree.stops)) if kept[i]])
    full = TwistedContext(grid, tree.stops, [_zero(grid)] * len(tree.stops))
    trunc = TwistedContext(grid, stops_t, [_zero(grid)] * len(stops_t))
    for k in range(grid.params.top_level, grid.L + 1):
        mapped = np.where(trunc.owner[k] >= 0, ids_t[np.maximum(trunc.owner[k], 0)] if len(ids_t) else -1, -1)
        cells = expand_blocks(R[k], grid, k)
        if k > grid.params.top_level:
            cells = cells | expand_blocks(R[k - 1], grid, k - 1)
        bad = cells & (mapped != full.owner[k])
        if np.any(bad):
            Q = grid.cube_containing(k, _first_true(bad))
            raise ConsistencyError(f"stopping parents of {Q.id} differ after truncation")
    return inB, strictB, G, R, kept


def _zero(grid: DyadicGrid) -> np.ndarray:
    return np.zeros((grid.params.N,) * grid.n)


def build_corona(j: int, grid_j: DyadicGrid, grid_k: DyadicGrid, sys: AccretiveSystem, op: DiscretizedOperator,
                 f_tilde, gparams: GridParams, cparams: CoronaParams, T_loc: float | None = None,
                 TB_proxy: float | None = None) -> CoronaData:
    """Run every stage for grid j against grid k.

    ``op`` is the operator T; grid 2 uses its transpose.  ``T_loc`` and
    ``TB_proxy`` default to the empirical testing constant and the
    operator-norm estimate.
    """
    if sys.grid is not grid_j:
        raise ConfigError("accretive system must live on grid_j")
    if cparams.n != grid_j.n:
        raise ConfigError("corona parameters were set up for another dimension")
    op_j = op if j == 1 else op.transpose()
    pj, pkd = cparams.exponents(j)
    if T_loc is None:
        T_loc = testing_constant(op_j, sys, p_dual=pkd)
    if TB_proxy is None:
        TB_proxy = cparams.TB_proxy if cparams.TB_proxy is not None else estimate_opnorm(op)
    good = good_masks(grid_j, grid_k, gparams)
    sel = select_f(grid_j, grid_k, f_tilde, gparams, good=good)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        tree = build_auxiliary_tree(sys, op_j, cparams, j, sel.a_star, T_loc)
    msgs = [str(w.message) for w in caught]
    ctx_plain = TwistedContext(grid_j, tree.stops, [sys.values(S) for S in tree.stops], pj)
    beta, tilde = perturb_b(tree, sys, grid_k, gparams, good, ctx_plain)
    types = classify_types(grid_j, tree, tilde, sel.f, sel.inA, good, op_j, cparams, j, TB_proxy, ctx_plain)
    inB, strictB, G, R, kept = truncate(grid_j, tree, types, sel.inA, good)
    members = {k: R[k] for k in range(grid_j.params.top_level, grid_j.L)}
    ctx = TwistedContext(grid_j, tree.stops, beta, pj, members, name=f"beta{j}")
    ctx_b = TwistedContext(grid_j, tree.stops, [sys.values(S) for S in tree.stops], pj, members, name=f"b{j}")
    fields = twisted_fields(ctx, sel.f)
    fields_b = twisted_fields(ctx_b, sel.f)
    for m in msgs:
        warnings.warn(m, RuntimeWarning, stacklevel=2)
    return CoronaData(j, grid_j, grid_k, gparams, cparams, sys, op_j, sel, tree, beta, tilde, types, inB,
                      strictB, G, R, kept, ctx, ctx_b, fields, fields_b, float(T_loc), float(TB_proxy), msgs)


# ---------------------------------------------------------------- checks


def lambda_constants(corona: CoronaData, Q: Cube, Qc: Cube, S: Cube) -> float:
    """Sum of half-twisted differences over G cubes ``P ⊇ Q`` with stopping parent S, read on Qc.

    Raises :class:`ConsistencyError` when the sum is not constant on Qc.
    """
    g = corona.grid
    if Q.level not in corona.G or not corona.G[Q.level][g.local_index(Q)]:
        raise ConfigError(f"{Q.id} is not in G")
    sid = corona.ctx.stop_id(S)
    if sid is None or not corona.kept[sid]:
        raise ConfigError(f"{S.id} is not a stopping cube")
    parent = corona.ctx.stopping_parent(Q)
    if not S.contains(parent):
        raise ConfigError(f"stopping parent of {Q.id} is not inside {S.id}")
    total = np.zeros((g.params.N,) * g.n)
    sl = Qc.slices()
    for k in range(S.level, Q.level + 1):
        P = g.ancestor(Q, k)
        if corona.G[k][g.local_index(P)] and corona.ctx.owner_blocks(k)[g.local_index(P)] == sid:
            total[sl] += corona.fields.half[k][sl]
    vals = total[sl]
    if np.ptp(vals) > 1e-10 * max(1.0, float(np.abs(vals).max())):
        raise ConsistencyError(f"lambda sum is not constant on {Qc.id}")
    return float(vals.flat[0])


@dataclass(frozen=True)
class LambdaSweep:
    max_abs: float
    ratio_to_Lambda: float
    count: int


def lambda_sweep(corona: CoronaData) -> LambdaSweep:
    """Largest ``|lambda_{Q'}|`` over every eligible (Q, Q', S)."""
    g = corona.grid
    best, count = 0.0, 0
    for i in corona.stop_ids():
        S = corona.tree.stops[i]
        inS = _slice_mask(S, (g.params.N,) * g.n)
        acc = np.zeros(inS.shape)
        for k in range(S.level, g.L):
            m = corona.G[k] & (corona.ctx.owner_blocks(k) == i)
            if np.any(m):
                acc = acc + expand_blocks(m, g, k) * corona.fields.half[k]
            # every G cube of level k inside S reads the current partial sum on its children
            eligible = expand_blocks(corona.G[k], g, k) & inS
            if np.any(eligible):
                count += int(np.count_nonzero(corona.G[k] & block_sample(inS, g, k)))
                best = max(best, float(np.abs(acc[eligible]).max()))
    return LambdaSweep(best, best / corona.cparams.Lambda, count)


@dataclass(frozen=True)
class RepresentationReport:
    max_abs: float
    rel_l2: float
    rel_lp: float
    phi_norm_p: float
    measure_B: float
    phi_constant: float


def representation_check(corona: CoronaData) -> RepresentationReport:
    """Rebuild f_j from its top terms, the twisted differences over G and the residual phi."""
    g = corona.grid
    f = corona.f.values
    top = g.params.top_level
    rhs = np.zeros_like(f)
    Bset = {(Q.level, Q.index) for Q in corona.types.B}
    for Q in corona.a_star:
        if (Q.level, Q.index) in Bset:
            continue
        i = corona.ctx.stop_id(Q)
        sl = Q.slices()
        rhs[sl] += f[sl].mean() * corona.beta[i][sl]
    for k in range(top, g.L):
        if np.any(corona.G[k]):
            rhs += expand_blocks(corona.G[k], g, k) * corona.fields.delta[k]
    phi = np.zeros_like(f)
    astar = {(Q.level, Q.index) for Q in corona.a_star}
    for Q in corona.types.B:
        sl = Q.slices()
        if (Q.level, Q.index) in astar:
            phi[sl] += f[sl]
        else:
            phi[sl] += f[sl] - corona.fields.ratio[Q.level][sl] * corona.ctx.B[Q.level][sl]
    rhs += phi
    res = rhs - f
    pj = corona.p_j
    nf2 = lq_norm(f, 2)
    nfp = lq_norm(f, pj)
    mb = corona.measure_B()
    phin = lq_norm(phi, pj)
    return RepresentationReport(
        float(np.abs(res).max()),
        lq_norm(res, 2) / nf2 if nf2 > 0 else lq_norm(res, 2),
        lq_norm(res, pj) / nfp if nfp > 0 else lq_norm(res, pj),
        phin,
        mb,
        phin**pj / (corona.cparams.Lambda**pj * mb) if mb > 0 else 0.0,
    )


@dataclass(frozen=True)
class ZeroDifferenceReport:
    qualifying: int
    max_delta: float
    max_half: float
    violations: int


def zero_difference_check(corona: CoronaData, tol: float = 1e-12) -> ZeroDifferenceReport:
    """Bad cubes of A without stopping children and with nonzero ``<beta_S>_Q`` must have zero differences.

    Differences are taken with the untruncated stopping family as parent selector.
    """
    g = corona.grid
    ctx = TwistedContext(g, corona.tree.stops, corona.beta, corona.p_j, members={})
    fl = twisted_fields(ctx, corona.f, check=False)
    inA = corona.selected.inA
    q = viol = 0
    md = mh = 0.0
    for k in range(g.params.top_level, g.L):
        child_stop = block_sums_bool(ctx.new_stop[k + 1], g, k)
        nz = np.abs(ctx.beta_avg_blocks(k)) >= 1e-14
        m = ~corona.selected.good[k] & inA[k] & ~child_stop & nz & (ctx.owner_blocks(k) >= 0)
        if not np.any(m):
            continue
        q += int(np.count_nonzero(m))
        d = np.abs(fl.delta[k])
        h = np.abs(fl.half[k])
        bd = _block_max(d, g, k)[m]
        bh = _block_max(h, g, k)[m]
        md = max(md, float(bd.max()))
        mh = max(mh, float(bh.max()))
        viol += int(np.count_nonzero((bd > tol) | (bh > tol)))
    return ZeroDifferenceReport(q, md, mh, viol)


def _block_max(v: np.ndarray, grid: DyadicGrid, level: int) -> np.ndarray:
    out = v
    for a, (starts, _) in enumerate(grid.axis_blocks(level)):
        out = np.maximum.reduceat(out, starts, axis=a)
    return out


@dataclass(frozen=True)
class TypeAReport:
    stops_checked: int
    mean_err: float
    norm_const: float
    min_avg: float
    C_maximal: float
    C_operator: float


def typeA_lemma_check(corona: CoronaData) -> TypeAReport:
    """Measured constants for the perturbed stopping data on every kept stopping cube.

    ``min_avg`` is the least ``<beta_S>_Q`` over R cubes and their children
    with stopping parent S.  ``C_maximal`` and ``C_operator`` are the largest
    ratios of the local maximal and operator averages to
    ``A^{p_j}/delta`` and ``T_loc^{p_k'}/delta + (upsilon1 TB)^{p_k'}``.
    """
    g = corona.grid
    pj, pkd = corona.p_j, corona.p_k_dual
    A = corona.sys.A
    cp = corona.cparams
    ids = corona.stop_ids()
    mean_err = norm_const = 0.0
    for i in ids:
        S = corona.tree.stops[i]
        sl = S.slices()
        mean_err = max(mean_err, abs(float(corona.beta[i][sl].mean()) - 1.0))
        norm_const = max(norm_const, float(np.mean(np.abs(corona.beta[i][sl]) ** pj)) / A**pj)
    mb = [maximal(np.abs(b), g).values ** pj for b in corona.beta]
    tb = []
    for i, b in enumerate(corona.beta):
        base = corona.tree.Tb.get(i)
        if base is None:
            base = corona.op_j.apply_values(corona.sys.values(corona.tree.stops[i]))
        t = corona.beta_tilde[i]
        tb.append(np.abs(base - corona.op_j.apply_values(t) if np.any(t) else base) ** pkd)
    cm = corona.ctx.with_funcs(mb)
    ct = corona.ctx.with_funcs(tb)
    bound_m = A**pj / cp.delta
    bound_t = corona.T_loc**pkd / cp.delta + (cp.upsilon1 * corona.TB_proxy) ** pkd
    min_avg = np.inf
    Cm = Ct = 0.0
    for k in range(g.params.top_level, g.L + 1):
        m = corona.R[k].copy()
        if k > g.params.top_level:
            m |= block_sample(expand_blocks(corona.R[k - 1], g, k - 1), g, k)
        m &= corona.ctx.owner_blocks(k) >= 0
        if not np.any(m):
            continue
        min_avg = min(min_avg, float(corona.ctx.beta_avg_blocks(k)[m].min()))
        Cm = max(Cm, float(block_averages(cm.B[k], g, k)[m].max()) / bound_m)
        if bound_t > 0:
            Ct = max(Ct, float(block_averages(ct.B[k], g, k)[m].max()) / bound_t)
    return TypeAReport(len(ids), mean_err, norm_const, float(min_avg), Cm, Ct)


# ---------------------------------------------------------------- export


def export_corona(corona: CoronaData, directory, with_functions: bool = False) -> Path:
    """Write ``corona.json`` (tree, criteria, types, truncation) and optionally the beta functions."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    t = corona.tree
    Bids = {Q.id for Q in corona.types.B}
    kinds = {a: {Q.id for Q in corona.types.maximal[a]} for a in "ABC"}
    doc = {
        "schema": 1,
        "grid": corona.grid.grid_id,
        "L": corona.grid.L,
        "n": corona.grid.n,
        "stops": [
            {
                "id": S.id,
                "level": S.level,
                "parent": t.stops[t.parent[i]].id if t.parent[i] >= 0 else None,
                "criteria": list(t.criteria[i]),
                "terminal": i in t.terminal,
                "kept": bool(corona.kept[i]),
            }
            for i, S in enumerate(t.stops)
        ],
        "B": [{"id": Q.id, "types": [a for a in "ABC" if Q.id in kinds[a]]} for Q in corona.types.B],
        "maximal": {a: sorted(kinds[a]) for a in "ABC"},
        "measure_B": corona.measure_B(),
        "good_count": int(sum(int(np.count_nonzero(m)) for m in corona.G.values())),
        "T_loc": corona.T_loc,
        "TB_proxy": corona.TB_proxy,
        "warnings": corona.warnings,
        "B_ids": sorted(Bids),
    }
    path = d / "corona.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    if with_functions:
        for i, S in enumerate(t.stops):
            if corona.kept[i]:
                DyadicFunction(corona.beta[i]).save(d / f"beta_{S.id}")
    return path
