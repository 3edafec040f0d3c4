import json
import warnings
from fractions import Fraction

import numpy as np
import pytest

from localtb.accretive import oscillatory_system, stopping_lower_bound, trivial_system
from localtb.corona import (
    CoronaParams,
    a_collection,
    build_auxiliary_tree,
    build_corona,
    export_corona,
    lambda_constants,
    lambda_sweep,
    representation_check,
    select_f,
    sparseness,
    standard_q0,
    typeA_lemma_check,
    zero_difference_check,
)
from localtb.dyfun import level_averages, level_difference, martingale_diff
from localtb.errors import ConfigError
from localtb.grid import bad_mask, new_random_grid

from conftest import quiet_params

L = 8


def _build(kind, seed, op, f=None, cparams=None, r=3):
    gp = quiet_params(n=1, L=L, r=r, epsilon=Fraction(1, 2))
    g1, g2 = new_random_grid(gp, 1, seed), new_random_grid(gp, 2, seed)
    if kind == "trivial":
        sys = trivial_system(g1)
    else:
        sys = oscillatory_system(g1, 2.0, 1.6, 0.6, seed=seed)
    if f is None:
        f = np.random.default_rng(seed).uniform(-1, 1, 1 << L)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_corona(1, g1, g2, sys, op, f, gp, cparams or CoronaParams())


@pytest.fixture(scope="module")
def trivial_coronas(zero_ops):
    return [_build("trivial", s, zero_ops(L)) for s in range(3)]


@pytest.fixture(scope="module")
def osc_coronas(hilbert_ops):
    return [_build("osc", s, hilbert_ops(L)) for s in range(3)]


def test_corona_params_validation():
    with pytest.raises(ConfigError):
        CoronaParams(p1=1.5, p2=1.5)
    with pytest.raises(ConfigError):
        CoronaParams(tau=1.0)
    with pytest.raises(ConfigError):
        CoronaParams(Lambda=1.0)
    with pytest.raises(ConfigError):
        CoronaParams(upsilon1=1 / 16)
    assert CoronaParams().upsilon1 == pytest.approx(1 / 32)
    assert CoronaParams(p1=3, p2=1.5).exponents(1) == (3, 3.0)


def test_a_collection_covers_q0():
    g = new_random_grid(quiet_params(n=1, L=6, r=2), 1, 5)
    a_star, inA = a_collection(g)
    assert sum(Q.volume_in_domain() for Q in a_star) == 1
    assert all(Q.intersects_domain() and Q.level == standard_q0(g).level for Q in a_star)
    assert all(inA[k].all() for k in inA)


def test_select_f_keeps_good_differences_only(rng):
    gp = quiet_params(n=1, L=7, r=2, epsilon=Fraction(1, 2))
    g1, g2 = new_random_grid(gp, 1, 2), new_random_grid(gp, 2, 2)
    v = rng.standard_normal(128)
    sel = select_f(g1, g2, v, gp)
    oracle = level_averages(v, g1, 0)
    for k in range(7):
        bad = bad_mask(g1, k, g2, gp)
        for Q in g1.cubes(k):
            if not bad[g1.local_index(Q)]:
                oracle = oracle + martingale_diff(v, Q).values
    assert np.allclose(sel.f.values, oracle)
    assert sel.diff_norm == pytest.approx(np.sqrt(np.mean((v - oracle) ** 2)))


def test_trivial_corona_has_no_stops_or_types(trivial_coronas):
    for c in trivial_coronas:
        assert c.tree.stops == c.a_star
        assert c.B == []
        assert all(not np.any(t) for t in c.beta_tilde)
        assert all(np.array_equal(c.G[k], c.selected.good[k]) for k in c.G)


def test_trivial_twisted_differences_are_classical(trivial_coronas):
    c = trivial_coronas[0]
    f = c.f.values
    for k in range(L):
        assert np.allclose(c.fields.delta[k], level_difference(f, c.grid, k), atol=1e-13)
        assert np.allclose(c.fields.half[k], level_difference(f, c.grid, k), atol=1e-13)


def test_representation_reproduces_f(trivial_coronas, osc_coronas):
    for c in trivial_coronas + osc_coronas:
        rep = representation_check(c)
        assert rep.rel_l2 <= 1e-9, rep


def test_zero_difference_exhaustive(trivial_coronas, osc_coronas):
    for c in trivial_coronas + osc_coronas:
        rep = zero_difference_check(c)
        assert rep.violations == 0, rep


def test_perturbed_stopping_data(osc_coronas):
    for c in osc_coronas:
        rep = typeA_lemma_check(c)
        assert rep.mean_err <= 1e-12
        assert rep.min_avg >= 0.25
        assert np.isfinite(rep.C_maximal) and np.isfinite(rep.C_operator)


def test_beta_tilde_matches_bruteforce(osc_coronas):
    c = osc_coronas[0]
    g = c.grid
    for i, S in enumerate(c.tree.stops[:6]):
        b = c.sys.values(S)
        oracle = np.zeros_like(b)
        for k in range(S.level, L):
            for Q in g.cubes(k):
                if S.contains(Q) and not c.selected.good[k][g.local_index(Q)] and c.ctx.stopping_parent(Q) == S:
                    oracle += martingale_diff(b, Q).values
        assert np.allclose(c.beta_tilde[i], oracle, atol=1e-13)
        assert np.allclose(c.beta[i], b - oracle)


def test_sparseness_and_stopping_measure(osc_coronas):
    for c in osc_coronas:
        assert np.all(sparseness(c.tree) <= c.cparams.tau)
        for S in c.tree.stops:
            if S.level < L:
                rem, bound = stopping_lower_bound(c.sys, S)
                assert rem >= bound


def test_stopping_criteria_recorded(osc_coronas):
    c = osc_coronas[0]
    for i, S in enumerate(c.tree.stops):
        if c.tree.parent[i] < 0:
            assert c.tree.criteria[i] == ("root",)
        else:
            assert c.tree.criteria[i] and c.tree.stops[c.tree.parent[i]].contains(S)


def test_finest_level_stops_warn(hilbert_ops):
    gp = quiet_params(n=1, L=6, r=2)
    g = new_random_grid(gp, 1, 0)
    sys = oscillatory_system(g, 2.0, 1.9, 0.9, seed=0)
    with pytest.warns(RuntimeWarning, match="finest level"):
        tree = build_auxiliary_tree(sys, hilbert_ops(6), CoronaParams(), 1, a_collection(g)[0])
    assert tree.terminal and all(tree.stops[i].level == 6 for i in tree.terminal)


def test_type_c_oracle(zero_ops):
    c = _build("trivial", 0, zero_ops(L), f=np.full(1 << L, 5.0))
    assert set(c.B) == set(c.a_star)
    assert all(not np.any(m) for m in c.G.values())
    assert representation_check(c).max_abs == 0.0


def test_lambda_sweep_consistent_with_pointwise(osc_coronas):
    c = osc_coronas[1]
    sweep = lambda_sweep(c)
    assert sweep.count > 0
    g = c.grid
    worst = 0.0
    for Q in c.good_cubes()[:40]:
        S = c.ctx.stopping_parent(Q)
        for Qc in g.children(Q):
            if Qc.intersects_domain():
                worst = max(worst, abs(lambda_constants(c, Q, Qc, S)))
    assert worst <= sweep.max_abs + 1e-12


def test_lambda_trivial_oracle(trivial_coronas):
    # b = 1: the partial sums telescope to <f>_{Q'} - <f>_S when every cube on the chain is in G
    c = trivial_coronas[0]
    g = c.grid
    f = c.f.values
    checked = 0
    for Q in c.good_cubes():
        S = c.ctx.stopping_parent(Q)
        chain = [g.ancestor(Q, k) for k in range(S.level, Q.level + 1)]
        if not all(c.G[P.level][g.local_index(P)] for P in chain):
            continue
        for Qc in g.children(Q):
            if Qc.intersects_domain():
                want = f[Qc.slices()].mean() - f[S.slices()].mean()
                assert lambda_constants(c, Q, Qc, S) == pytest.approx(want, abs=1e-12)
                checked += 1
    assert checked > 0


def test_wrong_grid_rejected(zero_ops):
    gp = quiet_params(n=1, L=L, r=3)
    g1, g2 = new_random_grid(gp, 1, 0), new_random_grid(gp, 2, 0)
    with pytest.raises(ConfigError):
        build_corona(1, g1, g2, trivial_system(g2), zero_ops(L), np.zeros(1 << L), gp, CoronaParams())


def test_export(tmp_path, osc_coronas):
    c = osc_coronas[0]
    path = export_corona(c, tmp_path, with_functions=True)
    doc = json.loads(path.read_text())
    assert len(doc["stops"]) == len(c.tree.stops)
    assert doc["measure_B"] == pytest.approx(c.measure_B())
    assert any(p.name.startswith("beta_") for p in tmp_path.iterdir())
