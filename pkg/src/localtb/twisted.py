"""Twisted and half-twisted martingale differences and their inequality harnesses.

A :class:`TwistedContext` is a family of stopping cubes in one grid, each
carrying a function (``b_S`` or ``beta_S``).  The stopping parent of a cube
is the smallest stopping cube containing it.  All differences of a level are
computed at once as cell arrays:

* ``ratio_k(x) = <f>_Q / <beta_{pi Q}>_Q`` for the level-k cube Q containing x,
* ``delta_k = ratio_{k+1} B_{k+1} - ratio_k B_k`` where ``B_k(x) = beta_{pi Q}(x)``,
* ``half_k = [pi Q' = pi Q] ratio_{k+1} - ratio_k``,
* ``dplain_k = [pi Q' = pi Q] (ratio_{k+1} - ratio_k)``.

Restricted to a cube Q of level k these are the twisted, half-twisted and
plain-twisted differences of Q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dyfun import (
    DyadicFunction,
    _vals,
    avg,
    block_averages,
    block_sample,
    expand_blocks,
    lq_norm,
)
from .errors import ConfigError, ConsistencyError, ValidationError
from .grid import Cube, DyadicGrid

__all__ = [
    "TwistedContext",
    "TwistedFields",
    "TransformReport",
    "PerturbationReport",
    "twisted_fields",
    "twisted_diff",
    "half_twisted_diff",
    "plain_twisted_diff",
    "box_majorant",
    "box_field",
    "admissible_context",
    "check_admissible",
    "universal_transform_test",
    "twisted_transform_test",
    "generation_norms",
    "perturbation_test",
    "control_check",
    "closeness",
    "sign_patterns",
]

_TINY = 1e-14


class TwistedContext:
    """Stopping cubes with attached functions, on one grid.

    Parameters
    ----------
    grid : DyadicGrid
    stops : list of Cube
        Nested family; the id of a stopping cube is its position in this list.
    funcs : list of ndarray
        Cell arrays, ``funcs[i]`` supported on ``stops[i]``.
    p : float
        Integrability exponent attached to the functions.
    members : {"all", "root"} or dict
        Managed collection.  ``"all"``: every cube with a stopping parent;
        ``"root"``: cubes whose stopping parent is ``stops[0]`` (the
        collection of an admissible family); or explicit block masks per level.
    """

    def __init__(self, grid: DyadicGrid, stops, funcs, p: float = 2.0, members="all", name: str = ""):
        if len(stops) != len(funcs):
            raise ConfigError("stops and funcs differ in length")
        for S in stops:
            if S.grid_id != grid.grid_id or S.L != grid.L:
                raise ConfigError(f"stopping cube {S.id} is not in grid {grid.grid_id}")
        self.grid = grid
        self.stops = list(stops)
        self.funcs = [np.asarray(_vals(b), dtype=np.float64) for b in funcs]
        self.p = float(p)
        self.name = name
        self.top = min((S.level for S in stops), default=grid.params.top_level)
        self._id = {(S.level, S.index): i for i, S in enumerate(self.stops)}
        shape = (grid.params.N,) * grid.n
        by_level: dict = {}
        for i, S in enumerate(self.stops):
            by_level.setdefault(S.level, []).append(i)
        self.owner: dict = {}
        self.B: dict = {}
        self.new_stop: dict = {}
        own = np.full(shape, -1, dtype=np.int64)
        Bk = np.zeros(shape)
        for k in range(self.top, grid.L + 1):
            own = own.copy()
            Bk = Bk.copy()
            fresh = np.zeros(shape, dtype=bool)
            for i in by_level.get(k, ()):
                sl = self.stops[i].slices()
                own[sl] = i
                Bk[sl] = self.funcs[i][sl]
                fresh[sl] = True
            self.owner[k] = own
            self.B[k] = Bk
            self.new_stop[k] = fresh
        self._owner_blocks: dict = {}
        self._bavg: dict = {}
        if isinstance(members, str):
            if members not in ("all", "root"):
                raise ConfigError(f"unknown members spec {members!r}")
            self.members = {}
            for k in range(self.top, grid.L):
                ob = self.owner_blocks(k)
                self.members[k] = ob >= 0 if members == "all" else ob == 0
        else:
            self.members = {k: np.asarray(v, dtype=bool) for k, v in members.items()}

    # ---------------------------------------------------------------- lookups
    def owner_blocks(self, level: int) -> np.ndarray:
        """Stopping-parent id of every level block (-1 when there is none)."""
        if level not in self._owner_blocks:
            self._owner_blocks[level] = block_sample(self.owner[level], self.grid, level)
        return self._owner_blocks[level]

    def beta_avg_blocks(self, level: int) -> np.ndarray:
        """``<beta_{pi Q}>_Q`` for every level block."""
        if level not in self._bavg:
            self._bavg[level] = block_averages(self.B[level], self.grid, level)
        return self._bavg[level]

    def stop_id(self, Q: Cube):
        return self._id.get((Q.level, Q.index))

    def is_stop(self, Q: Cube) -> bool:
        return (Q.level, Q.index) in self._id

    def stopping_parent(self, Q: Cube) -> Cube | None:
        if Q.level < self.top:
            return None
        i = int(self.owner[Q.level][tuple(sl.start for sl in Q.slices())])
        return None if i < 0 else self.stops[i]

    def function_of(self, S: Cube) -> np.ndarray:
        return self.funcs[self._id[(S.level, S.index)]]

    def stop_children(self, S: Cube) -> list:
        """Maximal stopping cubes strictly inside S."""
        i = self._id[(S.level, S.index)]
        out = []
        for j, T in enumerate(self.stops):
            if T.level > S.level and S.contains(T):
                par = self.stopping_parent(self.grid.parent(T))
                if par is not None and self._id[(par.level, par.index)] == i:
                    out.append(T)
        return out

    def member(self, Q: Cube) -> bool:
        m = self.members.get(Q.level)
        return m is not None and bool(m[self.grid.local_index(Q)])

    def with_funcs(self, funcs, name: str = "") -> "TwistedContext":
        """Same stopping cubes and managed collection, different functions."""
        return TwistedContext(self.grid, self.stops, funcs, self.p, self.members, name or self.name)


@dataclass
class TwistedFields:
    """Per-level cell arrays of ratio, twisted, half-twisted and plain differences."""

    ratio: dict
    delta: dict
    half: dict
    plain: dict
    same: dict
    chi: dict
    top: int
    L: int

    def levels(self):
        return range(self.top, self.L)


def _bad_denominator(ctx: TwistedContext, level: int, mask_blocks: np.ndarray, bavg: np.ndarray):
    bad = mask_blocks & (np.abs(bavg) < _TINY)
    if np.any(bad):
        loc = tuple(int(a[0]) for a in np.nonzero(bad))
        Q = ctx.grid.cube_from_local(level, loc)
        raise ConsistencyError(f"vanishing denominator <beta>_Q on {Q.id}")


def twisted_fields(ctx: TwistedContext, f, check: bool = True) -> TwistedFields:
    """Twisted, half-twisted and plain-twisted differences of ``f`` at every level.

    With ``check`` a vanishing denominator on a managed cube or on a child of
    one raises :class:`ConsistencyError` naming that cube.
    """
    g = ctx.grid
    v = _vals(f)
    ratio = {}
    for k in range(ctx.top, g.L + 1):
        own = ctx.owner_blocks(k)
        bavg = ctx.beta_avg_blocks(k)
        favg = block_averages(v, g, k)
        if check:
            need = np.zeros(own.shape, dtype=bool)
            if k in ctx.members:
                need |= ctx.members[k]
            if k - 1 in ctx.members:
                need |= block_sample(expand_blocks(ctx.members[k - 1], g, k - 1), g, k)
            _bad_denominator(ctx, k, need & (own >= 0), bavg)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where((own >= 0) & (np.abs(bavg) >= _TINY), favg / np.where(bavg == 0, 1, bavg), 0.0)
        ratio[k] = expand_blocks(r, g, k)
    delta, half, plain, same, chi = {}, {}, {}, {}, {}
    for k in range(ctx.top, g.L):
        s = (ctx.owner[k + 1] == ctx.owner[k]) & (ctx.owner[k] >= 0)
        same[k] = s
        delta[k] = ratio[k + 1] * ctx.B[k + 1] - ratio[k] * ctx.B[k]
        half[k] = np.where(s, ratio[k + 1], 0.0) - ratio[k]
        plain[k] = np.where(s, ratio[k + 1] - ratio[k], 0.0)
        fresh = block_sums_bool(ctx.new_stop[k + 1], g, k)
        chi[k] = expand_blocks(fresh.astype(np.float64), g, k)
    return TwistedFields(ratio, delta, half, plain, same, chi, ctx.top, g.L)


def block_sums_bool(mask: np.ndarray, grid: DyadicGrid, level: int) -> np.ndarray:
    """True on level blocks containing at least one True cell."""
    return block_averages(mask.astype(np.float64), grid, level) > 0


# ---------------------------------------------------------------- per-cube forms


def _ratio(ctx: TwistedContext, f, Q: Cube) -> tuple:
    S = ctx.stopping_parent(Q)
    if S is None:
        raise ConsistencyError(f"cube {Q.id} has no stopping parent")
    b = ctx.function_of(S)
    den = avg(b, Q)
    if abs(den) < _TINY:
        raise ConsistencyError(f"vanishing denominator <beta>_Q on {Q.id}")
    return avg(f, Q) / den, S, b


def twisted_diff(ctx: TwistedContext, f, Q: Cube) -> DyadicFunction:
    """Twisted difference of ``f`` on ``Q``, evaluated child by child."""
    v = _vals(f)
    out = np.zeros_like(v)
    rq, _, bq = _ratio(ctx, v, Q)
    for ch in ctx.grid.children(Q, in_domain=True):
        rc, _, bc = _ratio(ctx, v, ch)
        sl = ch.slices()
        out[sl] = rc * bc[sl] - rq * bq[sl]
    return DyadicFunction(out)


def half_twisted_diff(ctx: TwistedContext, f, Q: Cube) -> DyadicFunction:
    """Half-twisted difference: children with another stopping parent are left out."""
    v = _vals(f)
    rq, S, _ = _ratio(ctx, v, Q)
    out = -rq * DyadicFunction.indicator(Q).values
    for ch in ctx.grid.children(Q, in_domain=True):
        if ctx.stopping_parent(ch) == S:
            rc, _, _ = _ratio(ctx, v, ch)
            out[ch.slices()] += rc
    return DyadicFunction(out)


def plain_twisted_diff(ctx: TwistedContext, f, Q: Cube) -> DyadicFunction:
    """Sum over non-terminal children of ``(ratio_{Q'} - ratio_Q) 1_{Q'}``."""
    v = _vals(f)
    rq, S, _ = _ratio(ctx, v, Q)
    out = np.zeros_like(v)
    for ch in ctx.grid.children(Q, in_domain=True):
        if ctx.stopping_parent(ch) == S:
            rc, _, _ = _ratio(ctx, v, ch)
            out[ch.slices()] = rc - rq
    return DyadicFunction(out)


def box_majorant(ctx: TwistedContext, f, P: Cube) -> DyadicFunction:
    """``|half-twisted difference| + 1_P`` when a child of P is a stopping cube."""
    out = np.abs(half_twisted_diff(ctx, f, P).values)
    if any(ctx.is_stop(ch) for ch in ctx.grid.children(P, in_domain=True)):
        out = out + DyadicFunction.indicator(P).values
    return DyadicFunction(out)


def box_field(fields: TwistedFields, level: int) -> np.ndarray:
    return np.abs(fields.half[level]) + fields.chi[level]


# ---------------------------------------------------------------- admissible families


def admissible_context(grid: DyadicGrid, S0: Cube, b, terminals=(), terminal_funcs=(), p: float = 2.0,
                       name: str = "") -> TwistedContext:
    """Family ``b`` on S0 with terminal cubes T carrying ``b_T``; manages cubes of S0 outside all T."""
    return TwistedContext(grid, [S0, *terminals], [b, *terminal_funcs], p, members="root", name=name)


@dataclass(frozen=True)
class AdmissibleReport:
    min_mean: float
    sigma_inv_Bp: float
    terminal_B: float
    terminal_mean_err: float


def check_admissible(ctx: TwistedContext, raise_on_fail: bool = True) -> AdmissibleReport:
    """Measure the admissibility constants of a ``members="root"`` context.

    The lower bound ``|<b>_Q| >= 1/4`` on managed cubes is enforced; the
    ``L^p`` constants are returned for the record.
    """
    g = ctx.grid
    b = ctx.funcs[0]
    min_mean = np.inf
    worst_p = 0.0
    for k, m in ctx.members.items():
        if not np.any(m):
            continue
        means = np.abs(block_averages(b, g, k))[m]
        pw = block_averages(np.abs(b) ** ctx.p, g, k)[m]
        if means.min() < 0.25 - 1e-12 and raise_on_fail:
            loc = tuple(int(a[0]) for a in np.nonzero(m & (np.abs(block_averages(b, g, k)) < 0.25 - 1e-12)))
            raise ValidationError(f"|<b>_Q| < 1/4 on {g.cube_from_local(k, loc).id}")
        min_mean = min(min_mean, float(means.min()))
        worst_p = max(worst_p, float(pw.max()))
    tb, terr = 0.0, 0.0
    for T, bt in zip(ctx.stops[1:], ctx.funcs[1:]):
        sl = T.slices()
        terr = max(terr, abs(float(bt[sl].mean()) - 1.0))
        tb = max(tb, float(np.mean(np.abs(bt[sl]) ** ctx.p)) ** (1 / ctx.p))
    return AdmissibleReport(float(min_mean), worst_p, tb, terr)


# ---------------------------------------------------------------- transform harnesses


def sign_patterns(ctx_or_grid, trials: int, seed: int = 0, levels=None):
    """Rademacher block patterns followed by the all-ones and alternating patterns.

    Yields dicts ``level -> block array`` with entries in {-1, +1}.
    """
    g = ctx_or_grid.grid if isinstance(ctx_or_grid, TwistedContext) else ctx_or_grid
    levels = range(g.params.top_level, g.L) if levels is None else levels
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(31,))))
    for _ in range(trials):
        yield {k: rng.choice((-1.0, 1.0), size=g.counts(k)) for k in levels}
    yield {k: np.ones(g.counts(k)) for k in levels}
    yield {k: np.full(g.counts(k), (-1.0) ** k) for k in levels}


def _transform(fields_dict: dict, members: dict, eps: dict, grid: DyadicGrid) -> np.ndarray:
    out = None
    for k, d in fields_dict.items():
        if k not in members or k not in eps:
            continue
        w = expand_blocks(np.where(members[k], eps[k], 0.0), grid, k)
        out = d * w if out is None else out + d * w
    return out


@dataclass(frozen=True)
class TransformReport:
    q: float
    half: float
    plain: float
    delta: float | None
    patterns: int
    input_norm: float


def universal_transform_test(ctx: TwistedContext, f, q: float, trials: int = 50, seed: int = 0) -> TransformReport:
    """Largest ``||sum eps_Q X_Q f||_q / ||f||_q`` over sign patterns.

    ``X`` runs over the half-twisted and plain-twisted differences, and over
    the twisted difference when ``q`` equals the context exponent.
    """
    v = _vals(f)
    norm = lq_norm(v, q)
    fields = twisted_fields(ctx, v)
    g = ctx.grid
    best = {"half": 0.0, "plain": 0.0, "delta": 0.0}
    count = 0
    for eps in sign_patterns(ctx, trials, seed, ctx.members.keys()):
        count += 1
        if norm == 0:
            continue
        for key, fd in (("half", fields.half), ("plain", fields.plain), ("delta", fields.delta)):
            if key == "delta" and abs(q - ctx.p) > 1e-12:
                continue
            t = _transform(fd, ctx.members, eps, g)
            if t is not None:
                best[key] = max(best[key], lq_norm(t, q) / norm)
    return TransformReport(
        q, best["half"], best["plain"], best["delta"] if abs(q - ctx.p) <= 1e-12 else None, count, norm
    )


def _good_in(corona, Q: Cube | None) -> dict:
    """Block masks of G cubes contained in Q (all G cubes when Q is None)."""
    g = corona.grid
    out = {}
    for k, m in corona.G.items():
        if Q is None:
            out[k] = m
            continue
        if k < Q.level:
            out[k] = np.zeros_like(m)
            continue
        cells = np.zeros((g.params.N,) * g.n, dtype=bool)
        cells[Q.slices()] = True
        inside = block_averages(cells.astype(float), g, k) == 1.0
        out[k] = m & inside
    return out


def twisted_transform_test(corona, Q: Cube | None = None, coeffs: dict | None = None, p: float | None = None,
                           variant: str = "beta") -> float:
    """``||sum_{P in G, P in Q} eps_P Delta_P f_j||_p / |Q|^{1/p}``.

    ``variant="b"`` replaces the perturbed functions by the original ones.
    ``coeffs`` maps level to block arrays with entries in [-1, 1]; default 1.
    """
    g = corona.grid
    p = corona.p_j if p is None else p
    fields = corona.fields if variant == "beta" else corona.fields_b
    masks = _good_in(corona, Q)
    eps = coeffs or {k: np.ones(g.counts(k)) for k in masks}
    for k, e in eps.items():
        if np.any(np.abs(e) > 1 + 1e-12):
            raise ConfigError("coefficients must satisfy |eps| <= 1")
    t = _transform(fields.delta, masks, eps, g)
    if t is None:
        return 0.0
    vol = float(Q.volume_in_domain()) if Q is not None else 1.0
    return lq_norm(t, p) / vol ** (1 / p)


def generation_norms(corona, coeffs: dict | None = None, p: float | None = None) -> list:
    """``(depth, ||phi_k||_p^p, measure of generation-k stopping cubes)`` per stopping depth.

    ``phi_k`` collects the G-cube terms whose stopping parent sits at depth k
    of the truncated stopping tree.
    """
    g = corona.grid
    p = corona.p_j if p is None else p
    depth = corona.stop_depths()
    out = []
    for d in sorted(set(depth.values())):
        ids = np.array([i for i, dd in depth.items() if dd == d])
        masks = {}
        for k, m in corona.G.items():
            own = corona.ctx.owner_blocks(k)
            masks[k] = m & np.isin(own, ids)
        eps = coeffs or {k: np.ones(g.counts(k)) for k in masks}
        t = _transform(corona.fields.delta, masks, eps, g)
        meas = sum(float(corona.ctx.stops[i].volume_in_domain()) for i in ids)
        out.append((d, 0.0 if t is None else lq_norm(t, p) ** p, meas))
    return out


# ---------------------------------------------------------------- perturbation


@dataclass(frozen=True)
class PerturbationReport:
    upsilon: float
    closeness: float
    lam_cap: float
    lhs_full: float
    lhs_half: float
    rhs: float
    ratio_full: float
    ratio_half: float
    control_ok: bool
    control_worst: float


def closeness(ctx_b: TwistedContext, ctx_beta: TwistedContext) -> tuple:
    """Smallest upsilon with ``<|b - beta|^p>_Q <= upsilon^p`` on managed and terminal cubes."""
    g = ctx_b.grid
    p = ctx_b.p
    worst, where = 0.0, None
    for k, m in ctx_b.members.items():
        if not np.any(m):
            continue
        d = block_averages(np.abs(ctx_b.B[k] - ctx_beta.B[k]) ** p, g, k)
        d = np.where(m, d, 0.0)
        i = np.unravel_index(np.argmax(d), d.shape)
        if d[i] > worst:
            worst, where = float(d[i]), g.cube_from_local(k, i).id
    for T, bt, qt in zip(ctx_b.stops[1:], ctx_b.funcs[1:], ctx_beta.funcs[1:]):
        sl = T.slices()
        d = float(np.mean(np.abs(bt[sl] - qt[sl]) ** p))
        if d > worst:
            worst, where = d, T.id
    return worst ** (1 / p), where


def control_check(ctx_b: TwistedContext, ctx_beta: TwistedContext, upsilon: float, kmax: int = 20) -> tuple:
    """Check the geometric control of ``beta_{k,Q} = (<b - beta>_Q / <beta>_Q)^k`` for k <= kmax.

    Returns ``(ok, worst)`` with ``worst`` the largest ratio of measured
    value to its bound over all managed Q, non-terminal children Q' and k.
    """
    g = ctx_b.grid
    worst = 0.0
    tail = 2 * (4 * upsilon) ** (kmax + 1) / (1 - 4 * upsilon)
    for k, m in ctx_b.members.items():
        if not np.any(m) or k + 1 > g.L:
            continue
        t = {}
        for lev in (k, k + 1):
            num = block_averages(ctx_b.B[lev] - ctx_beta.B[lev], g, lev)
            den = ctx_beta.beta_avg_blocks(lev)
            with np.errstate(divide="ignore", invalid="ignore"):
                t[lev] = expand_blocks(np.where(den != 0, num / np.where(den == 0, 1, den), 0.0), g, lev)
        cells = expand_blocks(m, g, k) & (ctx_beta.owner[k + 1] == ctx_beta.owner[k])
        if not np.any(cells):
            continue
        tq, tc = t[k][cells], t[k + 1][cells]
        d1 = np.abs(tc - tq)
        for j in range(1, kmax + 1):
            a = (np.abs(tc**j) + np.abs(tq**j)) / (2 * (4 * upsilon) ** j + tail + 1e-15)
            bnd = d1 * j * (8 * upsilon) ** (j - 1)
            c = np.abs(tc**j - tq**j) / np.where(bnd + 1e-15 > 0, bnd + 1e-15, 1)
            worst = max(worst, float(a.max()), float(c.max()))
    return worst <= 1 + 1e-9, worst


def perturbation_test(ctx_b: TwistedContext, ctx_beta: TwistedContext, f, upsilon: float, lam_cap: float,
                      check_control: bool = True) -> PerturbationReport:
    """Square-function size of ``(Delta^beta - Delta^b) f`` and of the plain analogue.

    The right-hand side is ``upsilon (||f 1_{S0}||_p + lam_cap |S0|^{1/p})``.
    Preconditions (closeness, ``upsilon < 1/8``, averages of f capped by
    ``lam_cap``) raise :class:`ValidationError` naming the worst cube.
    """
    if not 0 < upsilon < 0.125:
        raise ConfigError(f"upsilon must lie in (0, 1/8), got {upsilon}")
    g = ctx_b.grid
    p = ctx_b.p
    close, where = closeness(ctx_b, ctx_beta)
    if close > upsilon * (1 + 1e-12):
        raise ValidationError(f"closeness fails on {where}: {close:.6g} > {upsilon:.6g}", where, close, upsilon)
    v = _vals(f)
    for k, m in ctx_b.members.items():
        a = np.abs(block_averages(v, g, k))[m]
        if a.size and a.max() > lam_cap * (1 + 1e-12):
            raise ValidationError(f"|<f>_Q| exceeds lam_cap at level {k}", None, float(a.max()), lam_cap)
    for T in ctx_b.stops[1:]:
        a = abs(avg(v, T))
        if a > lam_cap * (1 + 1e-12):
            raise ValidationError(f"|<f>_T| exceeds lam_cap on {T.id}", T.id, a, lam_cap)
    fb = twisted_fields(ctx_b, v)
    fq = twisted_fields(ctx_beta, v)
    sq_full = np.zeros_like(v)
    sq_half = np.zeros_like(v)
    for k, m in ctx_b.members.items():
        w = expand_blocks(m.astype(float), g, k)
        sq_full += w * (fq.delta[k] - fb.delta[k]) ** 2
        sq_half += w * (fq.plain[k] - fb.plain[k]) ** 2
    S0 = ctx_b.stops[0]
    vol0 = float(S0.volume_in_domain())
    fS = v * DyadicFunction.indicator(S0).values
    rhs = upsilon * (lq_norm(fS, p) + lam_cap * vol0 ** (1 / p))
    lhs_full = lq_norm(np.sqrt(sq_full), p)
    lhs_half = lq_norm(np.sqrt(sq_half), p)
    ok, worst = control_check(ctx_b, ctx_beta, upsilon) if check_control else (True, 0.0)
    return PerturbationReport(
        upsilon, close, lam_cap, lhs_full, lhs_half, rhs,
        lhs_full / rhs if rhs > 0 else 0.0, lhs_half / rhs if rhs > 0 else 0.0, ok, worst,
    )
