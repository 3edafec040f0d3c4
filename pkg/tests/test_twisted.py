import warnings
from fractions import Fraction

import numpy as np
import pytest

from localtb.accretive import oscillatory_system, trivial_system
from localtb.corona import CoronaParams, build_corona
from localtb.dyfun import level_averages, level_difference, lq_norm
from localtb.errors import ConfigError, ConsistencyError, ValidationError
from localtb.grid import new_random_grid, standard_grid
from localtb.twisted import (
    TwistedContext,
    admissible_context,
    box_field,
    box_majorant,
    check_admissible,
    closeness,
    generation_norms,
    half_twisted_diff,
    perturbation_test,
    plain_twisted_diff,
    sign_patterns,
    twisted_diff,
    twisted_fields,
    twisted_transform_test,
    universal_transform_test,
)

from conftest import quiet_params

L = 7


@pytest.fixture(scope="module")
def grid():
    return new_random_grid(quiet_params(n=1, L=L, r=2), 1, 11)


@pytest.fixture(scope="module")
def osc_ctx(grid):
    sys = oscillatory_system(grid, 2.0, 1.5, 0.5, seed=3)
    stops = list(grid.cubes(0)) + [grid.cubes(2)[1], grid.cubes(4)[9]]
    return TwistedContext(grid, stops, [sys.values(S) for S in stops], 2.0)


def _fine_signs(S, L, seed):
    h = np.zeros(1 << L)
    v = np.random.default_rng(seed).choice((-1.0, 1.0), size=1 << L)
    h[S.slices()] = v[S.slices()]
    return h


def test_context_validation(grid):
    other = new_random_grid(grid.params, 2, 11)
    with pytest.raises(ConfigError):
        TwistedContext(grid, [other.cube(0, 0)], [np.zeros(1 << L)])
    with pytest.raises(ConfigError):
        TwistedContext(grid, grid.cubes(0), [])
    with pytest.raises(ConfigError):
        TwistedContext(grid, grid.cubes(0), [np.ones(1 << L)] * len(grid.cubes(0)), members="some")


def test_stopping_parent_is_smallest_containing_stop(osc_ctx, grid):
    inner = osc_ctx.stops[-1]
    for Q in grid.cubes(6):
        P = osc_ctx.stopping_parent(Q)
        assert P.contains(Q)
        if inner.contains(Q):
            assert P == inner
    assert osc_ctx.stop_children(osc_ctx.stops[0]) or osc_ctx.stop_children(osc_ctx.stops[1])


def test_unit_functions_give_classical_differences(grid, rng):
    stops = list(grid.cubes(0))
    ctx = TwistedContext(grid, stops, [trivial_system(grid).values(S) for S in stops])
    f = rng.standard_normal(1 << L)
    fl = twisted_fields(ctx, f)
    for k in range(L):
        d = level_difference(f, grid, k)
        assert np.allclose(fl.delta[k], d)
        assert np.allclose(fl.half[k], d)
        assert np.allclose(fl.plain[k], d)
        assert not np.any(fl.chi[k])


def test_field_relations(osc_ctx, grid, rng):
    f = rng.standard_normal(1 << L)
    fl = twisted_fields(osc_ctx, f)
    for k in range(L):
        s = fl.same[k]
        # same stopping parent: twisted = half * B and plain = half
        assert np.allclose(fl.delta[k][s], (fl.half[k] * osc_ctx.B[k + 1])[s])
        assert np.allclose(fl.plain[k][s], fl.half[k][s])
        # a stopping child: the half difference drops the child ratio
        assert np.allclose(fl.half[k][~s], -fl.ratio[k][~s])
        assert np.allclose(box_field(fl, k), np.abs(fl.half[k]) + fl.chi[k])


def test_per_cube_forms_match_fields(osc_ctx, grid, rng):
    f = rng.standard_normal(1 << L)
    fl = twisted_fields(osc_ctx, f)
    for k in (1, 3, 5):
        for Q in grid.cubes(k)[:4]:
            sl = Q.slices()
            assert np.allclose(twisted_diff(osc_ctx, f, Q).values[sl], fl.delta[k][sl])
            assert np.allclose(half_twisted_diff(osc_ctx, f, Q).values[sl], fl.half[k][sl])
            assert np.allclose(plain_twisted_diff(osc_ctx, f, Q).values[sl], fl.plain[k][sl])
            assert np.allclose(box_majorant(osc_ctx, f, Q).values[sl], box_field(fl, k)[sl])


def test_twisted_differences_telescope(osc_ctx, grid, rng):
    # one stopping family: sum of twisted differences from the top = <f>_Q'/<b>_Q' b - top term
    f = rng.standard_normal(1 << L)
    fl = twisted_fields(osc_ctx, f)
    total = sum(fl.delta[k] for k in range(L))
    assert np.allclose(total, fl.ratio[L] * osc_ctx.B[L] - fl.ratio[0] * osc_ctx.B[0])
    assert np.allclose(fl.ratio[L] * osc_ctx.B[L], f)


def test_vanishing_denominator_named(grid):
    S = grid.cubes(0)[0]
    b = np.zeros(1 << L)
    with pytest.raises(ConsistencyError, match=S.id):
        twisted_fields(TwistedContext(grid, [S], [b]), np.ones(1 << L))


def test_admissible_context_and_check():
    grid = standard_grid(quiet_params(n=1, L=6, r=2))
    S0 = grid.cube(0, 0)
    T = grid.cube(3, 2)
    sys = oscillatory_system(grid, 2.0, 1.5, 0.5, seed=1)
    ctx = admissible_context(grid, S0, sys.values(S0), [T], [sys.values(T)])
    rep = check_admissible(ctx)
    assert rep.min_mean >= 0.25 and rep.terminal_mean_err < 1e-12
    assert not ctx.members[3][grid.local_index(T)]
    bad = np.zeros(64)
    bad[:32] = 2.0
    with pytest.raises(ValidationError):
        check_admissible(admissible_context(grid, S0, bad))


def test_sign_patterns_count_and_values(grid):
    pats = list(sign_patterns(grid, 5, seed=1))
    assert len(pats) == 7
    for pat in pats:
        for v in pat.values():
            assert set(np.unique(v)) <= {-1.0, 1.0}
    again = list(sign_patterns(grid, 5, seed=1))
    assert all(np.array_equal(a[k], b[k]) for a, b in zip(pats, again) for k in a)


def test_universal_transform_l2_oracle(grid, rng):
    # b = 1: signs preserve the L2 norm of an orthogonal sum, so every ratio is exactly 1
    stops = list(grid.cubes(0))
    ctx = TwistedContext(grid, stops, [trivial_system(grid).values(S) for S in stops])
    f = rng.standard_normal(1 << L)
    f = f - level_averages(f, grid, 0)
    rep = universal_transform_test(ctx, f, 2.0, trials=10, seed=2)
    assert rep.half == pytest.approx(1.0) and rep.plain == pytest.approx(1.0) and rep.delta == pytest.approx(1.0)
    assert universal_transform_test(ctx, f, 3.0, trials=3).delta is None


def test_universal_transform_bounded_for_oscillatory(osc_ctx, rng):
    f = rng.standard_normal(1 << L)
    for q in (1.5, 2.0, 3.0):
        rep = universal_transform_test(osc_ctx, f, q, trials=10)
        assert 0 < rep.half < 20 and 0 < rep.plain < 20


def _perturbation_pair(upsilon_fraction):
    grid = standard_grid(quiet_params(n=1, L=6, r=2))
    S0 = grid.cube(0, 0)
    sys = oscillatory_system(grid, 2.0, 1.5, 0.5, seed=1)
    b = sys.values(S0)
    h = _fine_signs(S0, 6, 5)
    ctx_b = admissible_context(grid, S0, b)
    ctx_q = admissible_context(grid, S0, b + upsilon_fraction * h)
    return ctx_b, ctx_q


def test_perturbation_identical_contexts_give_zero(rng):
    ctx_b, _ = _perturbation_pair(0.0)
    f = rng.uniform(-1, 1, 64)
    rep = perturbation_test(ctx_b, ctx_b, f, 0.05, 1.0)
    assert rep.lhs_full == 0 and rep.lhs_half == 0 and rep.closeness == 0 and rep.control_ok


def test_perturbation_bound_and_linearity(rng):
    f = rng.uniform(-1, 1, 64)
    lhs = []
    ups = [0.01, 0.02, 0.04]
    for u in ups:
        ctx_b, ctx_q = _perturbation_pair(u)
        assert closeness(ctx_b, ctx_q)[0] == pytest.approx(u)
        rep = perturbation_test(ctx_b, ctx_q, f, u, 1.0)
        assert rep.control_ok
        assert rep.ratio_full < 50
        lhs.append(rep.lhs_full)
    slope = np.polyfit(np.log(ups), np.log(lhs), 1)[0]
    assert abs(slope - 1) < 0.2


def test_perturbation_preconditions(rng):
    ctx_b, ctx_q = _perturbation_pair(0.04)
    f = rng.uniform(-1, 1, 64)
    with pytest.raises(ConfigError):
        perturbation_test(ctx_b, ctx_q, f, 0.2, 1.0)
    with pytest.raises(ValidationError):
        perturbation_test(ctx_b, ctx_q, f, 0.02, 1.0)
    with pytest.raises(ValidationError):
        perturbation_test(ctx_b, ctx_q, 3 + f, 0.05, 1.0)


@pytest.fixture(scope="module")
def trivial_corona(zero_ops):
    gp = quiet_params(n=1, L=8, r=3, epsilon=Fraction(1, 2))
    g1, g2 = new_random_grid(gp, 1, 0), new_random_grid(gp, 2, 0)
    f = np.random.default_rng(0).uniform(-1, 1, 256)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_corona(1, g1, g2, trivial_system(g1), zero_ops(8), f, gp, CoronaParams())


def test_twisted_transform_trivial_oracle(trivial_corona):
    c = trivial_corona
    f = c.f.values
    good_part = f - level_averages(f, c.grid, 0)
    assert twisted_transform_test(c) == pytest.approx(lq_norm(good_part, 2))
    assert twisted_transform_test(c, variant="b") == pytest.approx(twisted_transform_test(c))
    with pytest.raises(ConfigError):
        twisted_transform_test(c, coeffs={0: np.full(c.grid.counts(0), 2.0)})


def test_generation_norms_cover_roots(trivial_corona):
    gens = generation_norms(trivial_corona)
    assert [d for d, _, _ in gens] == [0]
    assert gens[0][2] == pytest.approx(sum(float(Q.volume_in_domain()) for Q in trivial_corona.a_star))
    assert gens[0][1] == pytest.approx(twisted_transform_test(trivial_corona) ** 2)
