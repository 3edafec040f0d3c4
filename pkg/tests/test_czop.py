import numpy as np
import pytest

from localtb.accretive import oscillatory_system, trivial_system
from localtb.czop import (
    DiscretizedOperator,
    apply,
    assemble,
    bump_kernel,
    cell_centres,
    estimate_opnorm,
    hardy_check,
    hilbert_kernel,
    riesz_kernel,
    testing_constant as t_loc,
    validate_kernel,
    witness_pair,
    zero_kernel,
)
from localtb.dyfun import DyadicFunction
from localtb.errors import ConfigError, DimensionError, ValidationError
from localtb.grid import Cube, new_random_grid, standard_grid

from conftest import quiet_params


def test_hilbert_matrix_matches_closed_form():
    L = 5
    op = assemble(hilbert_kernel(2.0), L)
    x = (np.arange(32) + 0.5) / 32
    d = x[:, None] - x[None, :]
    with np.errstate(divide="ignore"):
        oracle = np.where(d == 0, 0.0, 2.0 / d)
    assert np.allclose(op.matrix, oracle)
    assert np.allclose(op.matrix, -op.matrix.T)


def test_riesz_matrix_antisymmetric_and_entry():
    op = assemble(riesz_kernel(2, 1), 3)
    assert np.allclose(op.matrix, -op.matrix.T)
    c = cell_centres(2, 3)
    i, j = 3, 17
    d = c[i] - c[j]
    assert op.matrix[i, j] == pytest.approx(d[1] / np.linalg.norm(d) ** 3)


def test_kernel_constants_within_declared_bounds():
    for k in (hilbert_kernel(), riesz_kernel(2, 0)):
        kc = validate_kernel(k, samples=4000, seed=1)
        assert kc.C_size <= k.C_size * (1 + 1e-9)
        assert kc.C_smooth <= k.C_smooth
    assert validate_kernel(zero_kernel(1), 500).C_size == 0.0


def test_bump_kernel_vanishes_beyond_width():
    k = bump_kernel(1, width=0.25)
    assert k(np.array([[0.0]]), np.array([[0.3]]))[0] == 0.0
    assert k(np.array([[0.0]]), np.array([[0.1]]))[0] > 0
    with pytest.raises(ConfigError):
        bump_kernel(1, width=0)


def test_apply_and_bilinear(rng):
    op = assemble(hilbert_kernel(), 4)
    f, g = rng.standard_normal(16), rng.standard_normal(16)
    Tf = apply(op, f).values
    assert np.allclose(Tf, op.matrix @ f / 16)
    assert op.bilinear(f, g) == pytest.approx(np.dot(Tf, g) / 16)
    assert op.transpose().bilinear(g, f) == pytest.approx(op.bilinear(f, g))
    stack = np.stack([f, g])
    assert np.allclose(op.apply_values(stack)[1], apply(op, g).values)
    with pytest.raises(DimensionError):
        apply(op, np.zeros(8))


def test_assembly_refuses_large_sizes_and_caches(tmp_path):
    with pytest.raises(ConfigError):
        assemble(hilbert_kernel(), 13)
    a = assemble(hilbert_kernel(), 4, cache_dir=tmp_path)
    b = assemble(hilbert_kernel(), 4, cache_dir=tmp_path)
    assert np.array_equal(a.matrix, b.matrix)
    assert any(tmp_path.iterdir())
    c = assemble(hilbert_kernel(3.0), 4, cache_dir=tmp_path)
    assert np.allclose(c.matrix, 3 * a.matrix)


def test_operator_save_load(tmp_path):
    op = assemble(riesz_kernel(2, 0), 3)
    op.save(tmp_path / "op")
    back = DiscretizedOperator.load(tmp_path / "op")
    assert np.array_equal(back.matrix, op.matrix) and back.spec == op.spec


def test_nonfinite_matrix_rejected():
    with pytest.raises(ValidationError):
        DiscretizedOperator(np.full((4, 4), np.inf), 1, 2)


def test_opnorm_matches_svd():
    op = assemble(hilbert_kernel(), 6)
    exact = np.linalg.svd(op.matrix, compute_uv=False)[0] * op.cell_volume
    assert estimate_opnorm(op, seed=3) == pytest.approx(exact, rel=1e-8)
    assert estimate_opnorm(assemble(zero_kernel(), 4)) == 0.0


def test_testing_constant_trivial_system_oracle():
    # For b_Q = 1_Q the constant is a max of explicit normalised norms of T 1_Q.
    grid = standard_grid(quiet_params(n=1, L=5, r=2))
    op = assemble(hilbert_kernel(), 5)
    sys = trivial_system(grid)
    best = 0.0
    for k in range(6):
        for Q in grid.cubes(k):
            tf = op.matrix @ DyadicFunction.indicator(Q).values / 32
            best = max(best, np.sqrt(np.mean(tf[Q.slices()] ** 2)))
    assert t_loc(op, sys) == pytest.approx(best)
    assert t_loc(assemble(zero_kernel(), 5), sys) == 0.0


def test_testing_constant_adjoint_of_antisymmetric_kernel():
    grid = new_random_grid(quiet_params(n=1, L=5, r=2), 1, 1)
    op = assemble(hilbert_kernel(), 5)
    sys = oscillatory_system(grid, 2.0, 1.5, 0.5, seed=1)
    assert t_loc(op, sys, adjoint=True) == pytest.approx(t_loc(op, sys))


def test_witness_pair_pairing_is_l1_of_transform():
    op = assemble(hilbert_kernel(), 6)
    Q0 = Cube(0, 1, (0,), (0,), 6)
    w = witness_pair(op, Q0)
    Tf = op.apply_values(w.f1.values)
    assert w.pairing == pytest.approx(np.sum(np.abs(Tf[:32])) / 64)
    assert w.pairing > 0


def test_hardy_check_bounded_and_validated():
    L = 8
    Q = Cube(0, 2, (1,), (64,), L)
    g1 = np.zeros(256)
    g1[64:128] = 1
    g2 = np.zeros(256)
    g2[32:64] = 1
    g2[128:160] = 1
    val = hardy_check(Q, 2.0, 2.0, g1, g2)
    assert 0 < val < 10
    with pytest.raises(ValidationError):
        hardy_check(Q, 2.0, 2.0, g1, g1)
    with pytest.raises(ConfigError):
        hardy_check(Q, 1.0, 2.0, g1, g2)
