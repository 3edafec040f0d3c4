"""Pair classification and term-by-term evaluation of the double good-sum.

Every inner product ``<T X_P f1, Y_Q f2>`` is read off from dense
products ``H @ rows.T`` where ``H = (Delta_Q f2 rows) @ T * vol^2``.  The
triangular half ``lQ <= lP`` runs with the corona of the larger cube first;
the strict half ``lP < lQ`` reuses the same code with the roles of the two
coronas swapped, which also swaps T for its transpose.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corona import CoronaData
from .dyfun import expand_blocks, maximal
from .errors import ConfigError, ConsistencyError
from .grid import Cube

__all__ = [
    "FAR",
    "DIAGONAL",
    "NEARBY",
    "INSIDE",
    "CLASS_NAMES",
    "PairClass",
    "PairTable",
    "classify_pair",
    "classify_pairs",
    "TermReport",
    "half_terms",
    "Decomposition",
    "full_decomposition",
    "fit_decay",
    "fit_decay_2d",
]

FAR, DIAGONAL, NEARBY, INSIDE = 0, 1, 2, 3
CLASS_NAMES = ("far", "diagonal", "nearby", "inside")


@dataclass(frozen=True)
class PairClass:
    P: Cube
    Q: Cube
    cls: str
    s: int
    t: int | None
    child: int | None


def _far_index(gap2: np.ndarray, side: np.ndarray) -> np.ndarray:
    """Smallest t with ``dist < 2^t lP`` given squared gaps (integer units)."""
    ratio = np.sqrt(gap2) / side
    t = np.floor(np.log2(np.maximum(ratio, 1.0))).astype(np.int64) + 1
    # exact correction of the floating estimate (values stay well inside int64)
    side2 = side.astype(np.int64) ** 2
    t = t - (gap2 < side2 * 4 ** (t - 1))
    return t + (gap2 >= side2 * 4**t)


def _classify_arrays(cP, lP, kP, cQ, lQ, kQ, r):
    """Broadcast classification; inputs are (a, n)/(a,) and (b, n)/(b,) arrays.

    Returns class codes (-1 outside the triangle ``lQ <= lP``), s, t and the
    child code of P containing Q (-1 when not applicable).
    """
    c = cP[:, None, :]
    l = lP[:, None, None]
    d = cQ[None, :, :]
    m = lQ[None, :, None]
    s = (kQ[None, :] - kP[:, None]).astype(np.int64)
    meet3 = np.all((d < c + 2 * l) & (d + m > c - l), axis=2)
    in3 = np.all((d >= c - l) & (d + m <= c + 2 * l), axis=2)
    inP = np.all((d >= c) & (d + m <= c + l), axis=2)
    disjP = np.any((d + m <= c) | (d >= c + l), axis=2)
    gap = np.maximum(0, np.maximum(c - (d + m), d - (c + l)))
    gap2 = np.sum(gap.astype(np.int64) ** 2, axis=2)
    cls = np.full(s.shape, -2, dtype=np.int64)
    tri = s >= 0
    far = tri & ~meet3
    dia = tri & ~far & (s <= r)
    deep = tri & ~far & (s > r)
    cls[~tri] = -1
    cls[far] = FAR
    cls[dia] = DIAGONAL
    cls[deep & inP] = INSIDE
    cls[deep & ~inP & in3 & disjP] = NEARBY
    t = np.zeros(s.shape, dtype=np.int64)
    if np.any(far):
        t[far] = _far_index(gap2[far], np.broadcast_to(lP[:, None], s.shape)[far])
    half = l // 2
    lo_bit = (d - c) // np.maximum(half, 1)
    hi_bit = (d + m - 1 - c) // np.maximum(half, 1)
    straddle = np.any(lo_bit != hi_bit, axis=2)
    code = np.sum(np.clip(lo_bit, 0, 1) * (1 << np.arange(cP.shape[1]))[None, None, :], axis=2)
    child = np.where(cls == INSIDE, code, -1)
    if np.any((cls == INSIDE) & straddle):
        cls = np.where((cls == INSIDE) & straddle, -2, cls)
    return cls, s, t, child


def classify_pair(P: Cube, Q: Cube, r: int) -> PairClass:
    """Class of a single pair with ``lQ <= lP``; unclassifiable pairs raise ConsistencyError."""
    if Q.level < P.level:
        raise ConfigError("classify_pair expects lQ <= lP")
    cls, s, t, child = _classify_arrays(
        np.array([P.corner]), np.array([P.side_units]), np.array([P.level]),
        np.array([Q.corner]), np.array([Q.side_units]), np.array([Q.level]), r,
    )
    c = int(cls[0, 0])
    if c < 0:
        raise ConsistencyError(f"pair ({P.id}, {Q.id}) fits no collection")
    return PairClass(P, Q, CLASS_NAMES[c], int(s[0, 0]), int(t[0, 0]) if c == FAR else None,
                     int(child[0, 0]) if c == INSIDE else None)


def _good_list(corona: CoronaData) -> list:
    return corona.good_cubes()


@dataclass
class PairTable:
    """Classification of every pair (P, Q) in the triangle ``lQ <= lP`` (or ``<`` when strict)."""

    P: list
    Q: list
    cls: np.ndarray
    s: np.ndarray
    t: np.ndarray
    child: np.ndarray
    strict: bool

    def counts(self) -> dict:
        return {name: int(np.count_nonzero(self.cls == i)) for i, name in enumerate(CLASS_NAMES)}

    def eligible(self) -> int:
        return int(np.count_nonzero(self.cls >= 0))

    def pairs(self, name: str | None = None):
        want = None if name is None else CLASS_NAMES.index(name)
        for a, b in zip(*np.nonzero(self.cls >= 0)):
            c = int(self.cls[a, b])
            if want is not None and c != want:
                continue
            yield PairClass(self.P[a], self.Q[b], CLASS_NAMES[c], int(self.s[a, b]),
                            int(self.t[a, b]) if c == FAR else None,
                            int(self.child[a, b]) if c == INSIDE else None)


def classify_pairs(big: CoronaData, small: CoronaData, r: int, strict: bool = False) -> PairTable:
    """Classify ``G(big) x G(small)`` pairs with ``lQ <= lP`` (``<`` when strict).

    Raises :class:`ConsistencyError` for a pair in the triangle that fits no
    collection, which can only happen for pairs violating goodness.
    """
    Ps, Qs = _good_list(big), _good_list(small)
    n = big.grid.n
    if not Ps or not Qs:
        z = np.zeros((len(Ps), len(Qs)), dtype=np.int64)
        return PairTable(Ps, Qs, z - 1, z, z, z - 1, strict)
    cP = np.array([P.corner for P in Ps], dtype=np.int64).reshape(-1, n)
    cQ = np.array([Q.corner for Q in Qs], dtype=np.int64).reshape(-1, n)
    lP = np.array([P.side_units for P in Ps], dtype=np.int64)
    lQ = np.array([Q.side_units for Q in Qs], dtype=np.int64)
    kP = np.array([P.level for P in Ps], dtype=np.int64)
    kQ = np.array([Q.level for Q in Qs], dtype=np.int64)
    cls, s, t, child = _classify_arrays(cP, lP, kP, cQ, lQ, kQ, r)
    if strict:
        cls = np.where(s == 0, -1, cls)
    bad = cls == -2
    if np.any(bad):
        a, b = (int(x[0]) for x in np.nonzero(bad))
        raise ConsistencyError(f"pair ({Ps[a].id}, {Qs[b].id}) fits no collection")
    return PairTable(Ps, Qs, cls, s, t, child, strict)


# ---------------------------------------------------------------- term evaluation


def _rows(corona: CoronaData, cubes: list, fields_key: str) -> np.ndarray:
    """Stacked flat cell arrays of a per-level field restricted to each cube."""
    g = corona.grid
    size = g.params.N**g.n
    out = np.zeros((len(cubes), size))
    for i, P in enumerate(cubes):
        k = P.level
        if fields_key == "delta":
            fld = corona.fields.delta[k]
        elif fields_key == "delta_b":
            fld = corona.fields_b.delta[k]
        elif fields_key == "tilde":
            fld = corona.fields.half[k] * corona.ctx.B[k]
        else:
            raise ConfigError(fields_key)
        row = np.zeros(fld.shape)
        sl = P.slices()
        row[sl] = fld[sl]
        out[i] = row.ravel()
    return out


def _box_avg(corona: CoronaData, P: Cube, variant: str = "beta") -> float:
    """``<Box_P f>_P`` with ``Box_P = |half-twisted difference| + chi_P``."""
    fl = corona.fields if variant == "beta" else corona.fields_b
    sl = P.slices()
    return float(np.mean(np.abs(fl.half[P.level][sl]) + fl.chi[P.level][sl]))


def _box_int(corona: CoronaData, Q: Cube) -> float:
    sl = Q.slices()
    vol = 2.0 ** (-corona.grid.n * corona.grid.L)
    return float(np.sum(np.abs(corona.fields.half[Q.level][sl]) + corona.fields.chi[Q.level][sl]) * vol)


def _child_slices(P: Cube, code: int, N: int):
    h = P.side_units // 2
    out = []
    for a, c in enumerate(P.corner):
        e = (code >> a) & 1
        lo, hi = c + e * h, c + (e + 1) * h
        out.append(slice(max(lo, 0), max(min(hi, N), max(lo, 0))))
    return tuple(out)


def _cube_dist(P: Cube, Q: Cube) -> float:
    gap = [max(0, p - (q + Q.side_units), q - (p + P.side_units)) for p, q in zip(P.corner, Q.corner)]
    return float(np.sqrt(sum(x * x for x in gap)))


@dataclass
class TermReport:
    """Named sums of one triangular half plus per-(s, t) breakdowns and instruments."""

    half: str
    counts: dict
    totals: dict
    inside_left: float
    inside_para: float
    inside_stop: float
    inside_error: float
    nearby_left: float
    nearby_tilde: float
    diagonal_b: float
    back2b: float
    stop_s: dict
    error_s: dict
    para_s: dict
    nearby_s: dict
    far_st: dict
    far_bound_st: dict
    eps_max: float
    per_S_constant: float
    nearby_ratio: float
    far_ratio: float
    diag_ratio: float
    split_residual: float
    rows: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(sum(self.totals.values()))


def _acc(d: dict, key, val):
    d[key] = d.get(key, 0.0) + float(val)


def half_terms(big: CoronaData, small: CoronaData, strict: bool = False, name: str = "") -> tuple:
    """Evaluate every term of the triangular half with P from ``big`` and Q from ``small``.

    Returns ``(TermReport, X, table)`` with ``X[q, p] = <T Delta_P f_big, Delta_Q f_small>``
    where ``T = big.op_j``.
    """
    g = big.grid
    r = big.gparams.r
    eta = big.gparams.eta
    eps_g = float(big.gparams.epsilon)
    eta_p = (1 - eps_g) * eta
    n = g.n
    N = g.params.N
    vol = 2.0 ** (-n * g.L)
    table = classify_pairs(big, small, r, strict)
    Ps, Qs = table.P, table.Q
    nP, nQ = len(Ps), len(Qs)
    M = big.op_j.matrix
    V = _rows(small, Qs, "delta")
    H = (V @ M) * vol * vol if nQ else np.zeros((0, N**n))
    U = _rows(big, Ps, "delta")
    Ut = _rows(big, Ps, "tilde")
    Ub = _rows(big, Ps, "delta_b")
    X = H @ U.T if nP and nQ else np.zeros((nQ, nP))
    Z = H @ Ut.T if nP and nQ else np.zeros((nQ, nP))
    Xb = H @ Ub.T if nP and nQ else np.zeros((nQ, nP))
    stops = big.tree.stops
    betas = np.array([b.ravel() for b in big.beta]) if stops else np.zeros((0, N**n))
    A = H @ betas.T if nQ else np.zeros((0, len(stops)))  # A[q, S] = <T beta_S, Delta_Q>
    ctx = big.ctx
    # stop children of each P and their ratios
    stop_kids = []
    for P in Ps:
        kids = []
        for ch in g.children(P, in_domain=True):
            sid = ctx.stop_id(ch)
            if sid is not None:
                sl = ch.slices()
                kids.append((sid, float(big.fields.ratio[ch.level][sl].flat[0])))
        stop_kids.append(kids)
    left = np.zeros((nQ, nP))
    for p, kids in enumerate(stop_kids):
        for sid, ratio in kids:
            left[:, p] += ratio * A[:, sid]
    split_res = float(np.abs(X - Z - left).max()) if X.size else 0.0
    scale = float(np.abs(X).max()) if X.size else 0.0
    if split_res > 1e-9 * max(scale, 1e-300) and split_res > 1e-14:
        raise ConsistencyError(f"twisted/half-twisted split fails by {split_res:.3g} in half {name}")

    cls = table.cls.T  # (nQ, nP)
    s = table.s.T
    t = table.t.T
    child = table.child.T
    counts = table.counts()
    totals = {nm: 0.0 for nm in CLASS_NAMES}

    # far
    far = cls == FAR
    totals["far"] = float(X[far].sum())
    far_st, far_bound_st = {}, {}
    far_ratio = 0.0
    boxP = np.array([_box_avg(big, P) for P in Ps])
    boxQ = np.array([_box_int(small, Q) for Q in Qs])
    Q0 = float(sum(float(Q.volume_in_domain()) for Q in big.a_star))
    for q, p in zip(*np.nonzero(far)):
        key = (int(s[q, p]), int(t[q, p]))
        _acc(far_st, key, abs(X[q, p]))
        P, Q = Ps[p], Qs[q]
        dist = _cube_dist(P, Q) / P.side_units
        bound = 2.0 ** (-eta * key[0]) * dist ** (-n - eta) * boxP[p] * boxQ[q]
        far_ratio = max(far_ratio, _ratio(abs(X[q, p]), bound))
    for key in far_st:
        far_bound_st[key] = 2.0 ** (-eta * (key[0] + key[1])) * Q0

    # diagonal
    dia = cls == DIAGONAL
    totals["diagonal"] = float(X[dia].sum())
    diagonal_b = float(Xb[dia].sum())
    back2b = float((X - Xb)[dia].sum())
    boxPb = np.array([_box_avg(big, P, "b") for P in Ps])
    boxQavg = np.array([_box_int(small, Q) / (float(Q.volume_in_domain())) for Q in Qs])
    Tl = big.T_loc
    diag_ratio = 0.0
    for q, p in zip(*np.nonzero(dia)):
        bound = (1 + Tl) * boxPb[p] * boxQavg[q] * float(Ps[p].volume_in_domain())
        diag_ratio = max(diag_ratio, _ratio(abs(Xb[q, p]), bound))

    # inside and nearby share the half-twisted split and the maximal function of beta_S
    owner = np.array([ctx.owner_blocks(P.level)[g.local_index(P)] for P in Ps], dtype=np.int64)
    mbeta = {}

    def min_mbeta(sid, Q):
        if sid not in mbeta:
            mbeta[sid] = maximal(np.abs(big.beta[sid]), g).values
        return float(mbeta[sid][Q.slices()].min())

    near = cls == NEARBY
    nearby_left = float(left[near].sum())
    nearby_tilde = float(Z[near].sum())
    totals["nearby"] = nearby_left + nearby_tilde
    nearby_s: dict = {}
    nearby_ratio = 0.0
    absD = np.array([float(np.mean(np.abs(big.fields.half[P.level][P.slices()]))) for P in Ps])
    for q, p in zip(*np.nonzero(near)):
        _acc(nearby_s, int(s[q, p]), abs(Z[q, p]))
        bound = 2.0 ** (-eta_p * s[q, p]) * min_mbeta(int(owner[p]), Qs[q]) * absD[p] * boxQ[q]
        nearby_ratio = max(nearby_ratio, _ratio(abs(Z[q, p]), bound))

    ins = cls == INSIDE
    inside_left = float(left[ins].sum())
    para = stop = err = 0.0
    stop_Ss, error_Ss, para_s = {}, {}, {}
    eps_q: dict = {}
    per_S: dict = {}
    Bk_cache = {}
    for p in np.nonzero(ins.any(axis=0))[0]:
        P = Ps[p]
        sid = int(owner[p])
        k = P.level
        if k not in Bk_cache:
            Bk_cache[k] = ctx.B[k]
        qs = np.nonzero(ins[:, p])[0]
        half = big.fields.half[k]
        for code in np.unique(child[qs, p]):
            sl = _child_slices(P, int(code), N)
            cells = np.zeros((N,) * n, dtype=bool)
            cells[sl] = True
            if not np.any(cells):
                continue
            c = float(half[sl].flat[0])
            w = (Bk_cache[k] * cells).ravel()
            sel = qs[child[qs, p] == code]
            Y = H[sel] @ w  # <T(beta_S 1_{P_Q}), Delta_Q>
            a = A[sel, sid]
            para_v = c * a
            stop_v = c * (a - Y)
            err_v = Z[sel, p] - c * Y
            para += float(para_v.sum())
            stop += float(stop_v.sum())
            err += float(err_v.sum())
            for i, q in enumerate(sel):
                ss = int(s[q, p])
                _acc(stop_Ss, (sid, ss), stop_v[i])
                _acc(error_Ss, (sid, ss), err_v[i])
                _acc(para_s, ss, para_v[i])
                _acc(eps_q, (sid, int(q)), c)
            _acc(per_S, sid, float(Z[sel, p].sum()))
    # left-edge terms attach to the stopping cube itself
    for p, kids in enumerate(stop_kids):
        qs = np.nonzero(ins[:, p])[0]
        for sid, ratio in kids:
            _acc(per_S, sid, ratio * float(A[qs, sid].sum()))
    totals["inside"] = inside_left + para - stop + err
    # per-s magnitudes: sum over S of |B_{S,s}|
    stop_s, error_s = {}, {}
    for (sid, ss), v in stop_Ss.items():
        _acc(stop_s, ss, abs(v))
    for (sid, ss), v in error_Ss.items():
        _acc(error_s, ss, abs(v))
    direct = float(X[ins].sum())
    if abs(totals["inside"] - direct) > 1e-9 * max(float(np.abs(X[ins]).sum()), 1e-300) and abs(totals["inside"] - direct) > 1e-14:
        raise ConsistencyError(f"inside split does not reassemble: {totals['inside']} vs {direct}")
    Ttil = big.T_loc + big.cparams.upsilon1 * big.TB_proxy
    per_S_c = 0.0
    for sid, v in per_S.items():
        vs = float(stops[sid].volume_in_domain())
        per_S_c = max(per_S_c, _ratio(abs(v), Ttil * vs))
    eps_max = max((abs(v) for v in eps_q.values()), default=0.0)

    rows = []
    for ss in sorted(stop_s):
        bnd = 2.0 ** (-eta_p * ss)
        rows.append(("inside_stop", ss, "", stop_s[ss], bnd, _ratio(stop_s[ss], bnd)))
        rows.append(("inside_error", ss, "", error_s[ss], bnd, _ratio(error_s[ss], bnd)))
        rows.append(("inside_para", ss, "", para_s[ss], "", ""))
    for ss in sorted(nearby_s):
        bnd = 2.0 ** (-eta_p * ss)
        rows.append(("nearby", ss, "", nearby_s[ss], bnd, _ratio(nearby_s[ss], bnd)))
    for key in sorted(far_st):
        rows.append(("far", key[0], key[1], far_st[key], far_bound_st[key], _ratio(far_st[key], far_bound_st[key])))
    rows.append(("diagonal_back2b", "", "", back2b,
                 r * big.cparams.upsilon1 * big.TB_proxy * Q0,
                 _ratio(abs(back2b), r * big.cparams.upsilon1 * big.TB_proxy * Q0)))
    rep = TermReport(
        name, counts, totals, inside_left, para, stop, err, nearby_left, nearby_tilde, diagonal_b, back2b,
        stop_s, error_s, para_s, nearby_s, far_st, far_bound_st, float(eps_max), per_S_c,
        nearby_ratio, far_ratio, diag_ratio, split_res, [(name,) + row for row in rows],
    )
    return rep, X, table


def _ratio(num: float, den: float) -> float:
    if num == 0:
        return 0.0
    if den <= 0:
        return float("inf")
    return float(num / den)


# ---------------------------------------------------------------- full run


@dataclass
class Decomposition:
    half1: TermReport
    half2: TermReport
    pairing: float
    good_sum: float
    good_sum_error: float
    classified_total: float
    bookkeeping_residual: float

    def totals(self) -> dict:
        out = {}
        for nm in CLASS_NAMES:
            out[nm] = self.half1.totals[nm] + self.half2.totals[nm]
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("half", "term", "s", "t", "value", "bound_instrument", "ratio"))
        for row in self.half1.rows + self.half2.rows:
            w.writerow([_fmt(x) for x in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self) -> dict:
        def half(h: TermReport):
            return {
                "counts": h.counts,
                "totals": {k: _num(v) for k, v in h.totals.items()},
                "inside": {"left": _num(h.inside_left), "para": _num(h.inside_para),
                           "stop": _num(h.inside_stop), "error": _num(h.inside_error)},
                "nearby": {"left": _num(h.nearby_left), "tilde": _num(h.nearby_tilde)},
                "diagonal": {"b_version": _num(h.diagonal_b), "back2b": _num(h.back2b)},
                "instruments": {"eps_max": _num(h.eps_max), "per_S_constant": _num(h.per_S_constant),
                                "nearby_ratio": _num(h.nearby_ratio), "far_ratio": _num(h.far_ratio),
                                "diagonal_ratio": _num(h.diag_ratio)},
            }

        return {
            "pairing": _num(self.pairing),
            "good_sum": _num(self.good_sum),
            "good_sum_error": _num(self.good_sum_error),
            "classified_total": _num(self.classified_total),
            "bookkeeping_residual": _num(self.bookkeeping_residual),
            "half_lower": half(self.half1),
            "half_upper": half(self.half2),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.summary(), indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def _num(x: float) -> float:
    return float(f"{float(x):.12g}")


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.12g}"
    return x


def full_decomposition(c1: CoronaData, c2: CoronaData, tol: float = 1e-9) -> Decomposition:
    """Both triangular halves, the exact pairing and the double good-sum.

    The double good-sum is evaluated independently as ``<T g1, g2>`` with
    ``g_j`` the sum of all twisted differences over G^j.  The classified
    total must match it to ``tol`` relative to the absolute mass of the pair
    matrix; otherwise :class:`ConsistencyError` is raised.
    """
    if c1.j != 1 or c2.j != 2:
        raise ConfigError("expected the coronas of grid 1 and grid 2 in that order")
    if c1.other is not c2.grid or c2.other is not c1.grid:
        raise ConfigError("coronas were not built against each other's grids")
    if not np.array_equal(c1.op_j.matrix, c2.op_j.matrix.T):
        raise ConfigError("the second corona must carry the transposed operator")
    h1, X1, _ = half_terms(c1, c2, strict=False, name="lower")
    h2, X2, _ = half_terms(c2, c1, strict=True, name="upper")
    op = c1.op_j
    f1, f2 = c1.f.values, c2.f.values
    pairing = op.bilinear(f1, f2)
    g1 = np.zeros_like(f1)
    for k, m in c1.G.items():
        g1 += _expand(c1, m, k) * c1.fields.delta[k]
    g2 = np.zeros_like(f2)
    for k, m in c2.G.items():
        g2 += _expand(c2, m, k) * c2.fields.delta[k]
    good_sum = op.bilinear(g1, g2)
    classified = h1.total + h2.total
    mass = float(np.abs(X1).sum() + np.abs(X2).sum())
    # pairs with lP < lQ in half 1 are excluded, so the mass over both halves covers G1 x G2 once
    resid = abs(classified - good_sum) / mass if mass > 0 else abs(classified - good_sum)
    if resid > tol:
        raise ConsistencyError(f"bookkeeping identity violated: classified {classified!r} vs good-sum {good_sum!r}")
    return Decomposition(h1, h2, pairing, good_sum, abs(pairing - good_sum), classified, resid)


def _expand(corona: CoronaData, mask: np.ndarray, level: int) -> np.ndarray:
    return expand_blocks(mask, corona.grid, level)


# ---------------------------------------------------------------- decay fits


def fit_decay(values: dict, keys=None) -> tuple:
    """Least-squares slope of ``log2 |value|`` against the key; returns ``(slope, n_points)``.

    Zero values are skipped.  A negative slope means decay.
    """
    ks = sorted(values) if keys is None else [k for k in keys if k in values]
    xs = [k for k in ks if abs(values[k]) > 0]
    if len(xs) < 2:
        return float("nan"), len(xs)
    y = np.log2([abs(values[k]) for k in xs])
    slope = np.polyfit(np.asarray(xs, dtype=float), y, 1)[0]
    return float(slope), len(xs)


def fit_decay_2d(values: dict) -> tuple:
    """Joint fit ``log2 |v(s,t)| = a + alpha s + beta t``; returns ``(alpha, beta, n_points)``."""
    pts = [(s, t, abs(v)) for (s, t), v in values.items() if abs(v) > 0]
    if len(pts) < 3:
        return float("nan"), float("nan"), len(pts)
    A = np.array([[1.0, s, t] for s, t, _ in pts])
    y = np.log2([v for _, _, v in pts])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[1]), float(coef[2]), len(pts)
